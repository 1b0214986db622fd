//! Experiment configuration (TOML) and its resolution into library types.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dsm_core::dsm::{auto_schedule, AutoScheduleOptions, StopKind, StoppingRule};
use dsm_core::operators::{MonotoneProblem, ProblemSpec};
use dsm_core::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

/// A number or the keyword `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    Auto(AutoKeyword),
    Value(f64),
}

impl Default for AutoOr {
    fn default() -> Self {
        AutoOr::Auto(AutoKeyword::Auto)
    }
}

impl AutoOr {
    pub fn value(self) -> Option<f64> {
        match self {
            AutoOr::Auto(_) => None,
            AutoOr::Value(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub d0: AutoOr,
    #[serde(default = "one")]
    pub d: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default)]
    pub lambda: AutoOr,
    #[serde(rename = "C1", default = "two")]
    pub c1: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub y_norm_est: AutoOr,
    /// Sample points for the derivative-bound estimates.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Radius of the ball for the bound estimates; defaults to the containment radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Last index at which `verify` checks the schedule conditions.
    #[serde(default = "default_check_steps")]
    pub check_steps: u64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            d0: AutoOr::default(),
            d: 1.0,
            b: 1.0,
            lambda: AutoOr::default(),
            c1: 2.0,
            gamma: 1.0,
            y_norm_est: AutoOr::default(),
            samples: default_samples(),
            radius: None,
            check_steps: default_check_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_rule")]
    pub rule: StopKind,
    #[serde(default = "default_n_cap")]
    pub n_cap: u64,
    #[serde(default)]
    pub diagnostics: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            rule: default_rule(),
            n_cap: default_n_cap(),
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

impl OutputSpec {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    #[serde(default)]
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "is_empty_study")]
    pub study: StudySpec,
}

fn is_empty_study(s: &StudySpec) -> bool {
    s.deltas.is_empty()
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn default_samples() -> usize {
    16
}

fn default_check_steps() -> u64 {
    10_000
}

fn default_rule() -> StopKind {
    StopKind::Discrepancy
}

fn default_n_cap() -> u64 {
    1_000_000
}

fn default_dir() -> PathBuf {
    PathBuf::from("dsm-out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

/// Invalid field, reported by its dotted path.
#[derive(Debug)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for FieldError {}

fn field(field: &'static str, message: impl Into<String>) -> anyhow::Error {
    FieldError {
        field,
        message: message.into(),
    }
    .into()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("malformed config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        p.operator().map_err(|e| field("problem", e.to_string()))?;
        p.solution().map_err(|e| field("problem.y", e.to_string()))?;
        if let Some(delta) = p.delta {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(field("problem.delta", format!("must be positive and finite, got {delta}")));
            }
        }
        let s = &self.schedule;
        if !(s.c1 > 1.0 && s.c1.is_finite()) {
            return Err(field("schedule.C1", format!("must exceed 1, got {}", s.c1)));
        }
        if !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return Err(field("schedule.gamma", format!("must lie in (0, 1], got {}", s.gamma)));
        }
        if !(s.d >= 1.0 && s.d.is_finite()) {
            return Err(field("schedule.d", format!("must be finite and >= 1, got {}", s.d)));
        }
        if !(s.b > 0.0 && s.b <= 1.0) {
            return Err(field("schedule.b", format!("must lie in (0, 1], got {}", s.b)));
        }
        for (name, v) in [
            ("schedule.d0", s.d0.value()),
            ("schedule.lambda", s.lambda.value()),
            ("schedule.y_norm_est", s.y_norm_est.value()),
            ("schedule.radius", s.radius),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(field(name, format!("must be positive and finite, got {v}")));
                }
            }
        }
        if s.samples == 0 {
            return Err(field("schedule.samples", "must be positive"));
        }
        if self.run.n_cap == 0 {
            return Err(field("run.n_cap", "must be positive"));
        }
        if self.run.rule != StopKind::MaxIter && p.delta.is_none() {
            return Err(field(
                "problem.delta",
                "the discrepancy and a_priori rules need the noise level; set delta or use rule = \"max_iter\"",
            ));
        }
        if self.output.formats.is_empty() {
            return Err(field("output.formats", "list at least one of \"csv\", \"json\""));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<MonotoneProblem> {
        Ok(self.problem.build()?)
    }

    /// Fills in every `auto` field of the schedule for this problem.
    pub fn resolve_schedule(&self, problem: &MonotoneProblem) -> Result<ResolvedSchedule> {
        let s = &self.schedule;
        if problem.delta <= 0.0 && s.y_norm_est.value().is_none() {
            bail!("schedule.y_norm_est: \"auto\" needs a noise level; set problem.delta or give a value");
        }
        let opts = AutoScheduleOptions {
            c_stop: s.c1,
            gamma: s.gamma,
            y_norm_est: s.y_norm_est.value(),
            radius: s.radius,
            samples: s.samples,
            d: s.d,
            b: s.b,
        };
        let auto = auto_schedule(problem.operator.as_ref(), &problem.f_delta, problem.delta, &opts)
            .context("selecting schedule constants")?;
        let mut schedule = auto.schedule;
        if let Some(d0) = s.d0.value() {
            schedule.d0 = d0;
        }
        if let Some(lambda) = s.lambda.value() {
            schedule.lambda = lambda;
        }
        schedule.validate()?;
        Ok(ResolvedSchedule {
            schedule,
            m1: auto.bounds.m1,
            m2: auto.bounds.m2,
            bounds_radius: auto.bounds.radius,
            misfit: auto.misfit,
        })
    }

    pub fn stopping_rule(&self, delta: f64) -> StoppingRule {
        StoppingRule {
            kind: self.run.rule,
            c1: self.schedule.c1,
            gamma: self.schedule.gamma,
            delta,
            n_cap: self.run.n_cap,
        }
    }
}

/// Schedule with the estimates that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSchedule {
    pub schedule: Schedule,
    pub m1: f64,
    pub m2: f64,
    pub bounds_radius: f64,
    /// `||f_delta - F(0)||`
    pub misfit: f64,
}
