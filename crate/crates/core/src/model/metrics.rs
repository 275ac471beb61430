use super::ModelError;

fn check_lengths(yhat: &[f64], y: &[f64]) -> Result<(), ModelError> {
    if yhat.len() != y.len() || y.len() < 2 {
        return Err(ModelError::Contract(format!(
            "need two equal-length series of at least 2 values, got {} and {}",
            yhat.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `1 − Σ(ŷᵢ−yᵢ)² / Σ(ȳ−yᵢ)²`.
pub fn r_squared(yhat: &[f64], y: &[f64]) -> Result<f64, ModelError> {
    check_lengths(yhat, y)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (mean - v) * (mean - v)).sum();
    if ss_tot == 0.0 {
        return Err(ModelError::ConstantTarget);
    }
    let ss_res: f64 = yhat.iter().zip(y).map(|(p, v)| (p - v) * (p - v)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation; errors when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, ModelError> {
    check_lengths(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(ModelError::ConstantTarget);
    }
    Ok(sab / (saa * sbb).sqrt())
}
