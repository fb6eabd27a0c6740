//! Round aggregation.

/// Mean and standard error (sample SD over √n). The standard error is
/// `None` for a single value. Returns `None` for an empty slice.
pub fn mean_stderr(values: &[f64]) -> Option<(f64, Option<f64>)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Some((mean, se))
}

/// Formats an optional number as a CSV field.
pub fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}
