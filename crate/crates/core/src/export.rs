//! Number formatting shared by the CSV writers.

/// Scientific notation with 17 significant digits, enough to round-trip any `f64`.
pub fn sci(x: f64) -> String {
    format!("{x:.16e}")
}
