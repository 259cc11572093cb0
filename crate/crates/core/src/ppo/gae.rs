use crate::error::{Error, Result};

/// Generalized advantage estimates and value targets for one episode.
///
/// `values` has one more entry than `rewards`; the last one bootstraps the
/// truncated tail.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Shape(format!(
            "{} values for {} rewards (expected one more)",
            values.len(),
            rewards.len()
        )));
    }
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit standard deviation. A constant
/// input becomes all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 0.0 { (*a - mean) / std } else { 0.0 };
    }
}
