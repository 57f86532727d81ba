//! Number formatting shared by every text artifact.

/// Shortest decimal representation that parses back to the same `f64`.
pub fn float(x: f64) -> String {
    format!("{x:?}")
}
