//! pass@k, G-RIR, and key-layer distribution statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact: acc * (n - i) is divisible by (i + 1)
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// Unbiased pass@k estimator `1 − C(n−c, k) / C(n, k)`.
///
/// Evaluated as the exact integer ratio `(C(n,k) − C(n−c,k)) / C(n,k)` with a
/// single rounding, so `pass_at_k(n, c, 1) == c / n` holds bitwise. Falls back
/// to the running product when the binomials overflow 128 bits.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::Parameter(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must lie in 1..={n}")));
    }
    let (n64, c64, k64) = (n as u64, c as u64, k as u64);
    if let (Some(all), Some(fail)) = (binomial(n64, k64), binomial(n64 - c64, k64)) {
        return Ok((all - fail) as f64 / all as f64);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let prod = (n - c + 1..=n).fold(1.0f64, |acc, i| acc * (1.0 - k as f64 / i as f64));
    Ok(1.0 - prod)
}

/// Restoration improvement on held-out aggregates:
/// `(edited − pert) / (ori − pert)`. Unbounded in both directions.
pub fn g_rir(acc_ori_held: f64, acc_pert_held: f64, acc_edited_held: f64) -> Result<f64> {
    if acc_ori_held <= acc_pert_held {
        return Err(Error::NoRobustnessGap {
            acc_ori: acc_ori_held,
            acc_pert: acc_pert_held,
        });
    }
    Ok((acc_edited_held - acc_pert_held) / (acc_ori_held - acc_pert_held))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyLayerStats {
    /// `histogram[ℓ - 1]` counts layer ℓ.
    pub histogram: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn key_layer_stats(layers: &[usize], n_layers: usize) -> Result<KeyLayerStats> {
    if layers.is_empty() {
        return Err(Error::Parameter("no key layers to summarize".into()));
    }
    let mut histogram = vec![0; n_layers];
    for &l in layers {
        if l == 0 || l > n_layers {
            return Err(Error::LayerIndex { layer: l, n_layers });
        }
        histogram[l - 1] += 1;
    }
    let n = layers.len() as f64;
    let mean = layers.iter().map(|&l| l as f64).sum::<f64>() / n;
    let var = layers.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(KeyLayerStats {
        histogram,
        mean,
        std: var.sqrt(),
    })
}
