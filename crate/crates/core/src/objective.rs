//! Training loss (Huber + correlation, "Hubcor") and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub corr_weight: f64,
    pub corr_degenerate_value: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_delta: 0.1,
            corr_weight: 0.5,
            corr_degenerate_value: 0.0,
        }
    }
}

impl LossConfig {
    /// Pure squared error, `½e²` per element (Huber with an unreachable threshold).
    pub fn mse_only() -> Self {
        LossConfig {
            huber_delta: 1e12,
            corr_weight: 0.0,
            corr_degenerate_value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("huber_delta must be > 0"));
        }
        if !(self.corr_weight >= 0.0) || !self.corr_weight.is_finite() {
            return Err(Error::config("corr_weight must be finite and >= 0"));
        }
        if !self.corr_degenerate_value.is_finite() {
            return Err(Error::config("corr_degenerate_value must be finite"));
        }
        Ok(())
    }
}

pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// Sum of squared deviations below which a channel counts as constant.
fn is_degenerate(ss: f64, n: usize, scale: f64) -> bool {
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    ss <= tol * tol * n as f64
}

struct ChannelCorr {
    r: f64,
    /// `∂r/∂x_i`, empty when the channel is degenerate.
    grad: Vec<f64>,
}

fn channel_corr(x: &[f64], y: &[f64], want_grad: bool) -> Option<ChannelCorr> {
    let n = x.len();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let scale_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_y = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if is_degenerate(sxx, n, scale_x) || is_degenerate(syy, n, scale_y) {
        return None;
    }
    let denom = (sxx * syy).sqrt();
    let r = (sxy / denom).clamp(-1.0, 1.0);
    let grad = if want_grad {
        x.iter()
            .zip(y)
            .map(|(a, b)| (b - my) / denom - r * (a - mx) / sxx)
            .collect()
    } else {
        Vec::new()
    };
    Some(ChannelCorr { r, grad })
}

fn check_shapes(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} rows, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn column(rows: &[[f64; 3]], ch: usize) -> Vec<f64> {
    rows.iter().map(|r| r[ch]).collect()
}

/// Hubcor loss over a batch and its gradient with respect to the predictions.
///
/// `loss = mean(Huber_δ(pred − target)) + λ·(1 − mean_ch r_ch)`, where `r_ch`
/// is the Pearson correlation of one output channel across the batch.
pub fn hubcor_loss(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<(f64, Vec<[f64; 3]>)> {
    check_shapes(pred, target)?;
    let n = pred.len();
    if cfg.corr_weight > 0.0 && n < 2 {
        return Err(Error::Shape(
            "correlation term needs a batch of at least 2".into(),
        ));
    }
    if pred.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite prediction"));
    }

    let inv = 1.0 / (3 * n) as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for ((p, t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        for ch in 0..3 {
            let e = p[ch] - t[ch];
            loss += huber(e, cfg.huber_delta);
            g[ch] = huber_grad(e, cfg.huber_delta) * inv;
        }
    }
    loss *= inv;

    if cfg.corr_weight > 0.0 {
        let mut r_sum = 0.0;
        for ch in 0..3 {
            let x = column(pred, ch);
            let y = column(target, ch);
            match channel_corr(&x, &y, true) {
                Some(c) => {
                    r_sum += c.r;
                    let w = -cfg.corr_weight / 3.0;
                    for (g, dr) in grad.iter_mut().zip(&c.grad) {
                        g[ch] += w * dr;
                    }
                }
                None => r_sum += cfg.corr_degenerate_value,
            }
        }
        loss += cfg.corr_weight * (1.0 - r_sum / 3.0);
    }
    Ok((loss, grad))
}

pub fn mse(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    check_shapes(pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).powi(2)))
        .sum();
    Ok(s / (3 * pred.len()) as f64)
}

pub fn mae(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    check_shapes(pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).abs()))
        .sum();
    Ok(s / (3 * pred.len()) as f64)
}

/// Pearson correlation of two series, `None` when either is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    channel_corr(x, y, false).map(|c| c.r)
}

/// Per-channel Pearson r averaged over the three outputs.
///
/// Constant channels contribute `degenerate_value`.
pub fn pearson_cc_with(pred: &[[f64; 3]], target: &[[f64; 3]], degenerate_value: f64) -> Result<f64> {
    check_shapes(pred, target)?;
    if pred.len() < 2 {
        return Err(Error::Shape("correlation needs at least 2 samples".into()));
    }
    let sum: f64 = (0..3)
        .map(|ch| pearson(&column(pred, ch), &column(target, ch)).unwrap_or(degenerate_value))
        .sum();
    Ok(sum / 3.0)
}

pub fn pearson_cc(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    pearson_cc_with(pred, target, LossConfig::default().corr_degenerate_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Pearson r in [-1, 1].
    pub cc: f64,
}

impl Metrics {
    pub fn compute(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<Self> {
        Ok(Metrics {
            mse: mse(pred, target)?,
            mae: mae(pred, target)?,
            cc: pearson_cc(pred, target)?,
        })
    }

    /// Weighted mean of several metric sets.
    pub fn weighted_mean(items: &[(Metrics, usize)]) -> Option<Metrics> {
        let total: usize = items.iter().map(|(_, w)| w).sum();
        if total == 0 {
            return None;
        }
        let t = total as f64;
        let fold = |f: fn(&Metrics) -> f64| items.iter().map(|(m, w)| f(m) * *w as f64).sum::<f64>() / t;
        Some(Metrics {
            mse: fold(|m| m.mse),
            mae: fold(|m| m.mae),
            cc: fold(|m| m.cc),
        })
    }

    /// Flat `key = value` document with keys `mse`, `mae`, `cc_percent`.
    pub fn to_kv_text(&self) -> String {
        format!(
            "mse = {:e}\nmae = {:e}\ncc_percent = {:e}\n",
            self.mse,
            self.mae,
            self.cc * 100.0
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let (mut mse, mut mae, mut cc) = (None, None, None);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad number `{}`", v.trim()),
            })?;
            match k.trim() {
                "mse" => mse = Some(v),
                "mae" => mae = Some(v),
                "cc_percent" => cc = Some(v / 100.0),
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        match (mse, mae, cc) {
            (Some(mse), Some(mae), Some(cc)) => Ok(Metrics { mse, mae, cc }),
            _ => Err(Error::Parse {
                line: 0,
                msg: "missing one of mse, mae, cc_percent".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }

    #[test]
    fn huber_pieces() {
        assert!((huber(0.05, 0.1) - 0.00125).abs() < 1e-15);
        assert!((huber(0.3, 0.1) - 0.025).abs() < 1e-15);
        assert!((huber(-0.3, 0.1) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_batch(&mut rng, 16);
        let (loss, _) = hubcor_loss(&t, &t, &LossConfig::default()).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn zero_corr_weight_is_mean_huber() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = LossConfig {
            corr_weight: 0.0,
            ..LossConfig::default()
        };
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let p = random_batch(&mut rng, n);
            let t = random_batch(&mut rng, n);
            let (loss, _) = hubcor_loss(&p, &t, &cfg).unwrap();
            // direct elementwise recomputation
            let mut direct = 0.0;
            for i in 0..n {
                for c in 0..3 {
                    let e: f64 = p[i][c] - t[i][c];
                    direct += if e.abs() <= 0.1 {
                        0.5 * e * e
                    } else {
                        0.1 * (e.abs() - 0.05)
                    };
                }
            }
            direct /= (3 * n) as f64;
            assert!((loss - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        let p = random_batch(&mut rng, 12);
        let t = random_batch(&mut rng, 12);
        let (_, g) = hubcor_loss(&p, &t, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            for c in 0..3 {
                let mut pp = p.clone();
                pp[i][c] += h;
                let mut pm = p.clone();
                pm[i][c] -= h;
                let fd = (hubcor_loss(&pp, &t, &cfg).unwrap().0 - hubcor_loss(&pm, &t, &cfg).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - g[i][c]).abs() / fd.abs().max(g[i][c].abs()).max(1e-8);
                assert!(rel < 1e-4, "({i},{c}) fd={fd} an={}", g[i][c]);
            }
        }
    }

    #[test]
    fn degenerate_channel_contributes_configured_value() {
        let p = vec![[0.5, 0.1, 0.2], [0.5, 0.3, 0.1], [0.5, 0.2, 0.4]];
        let t = vec![[0.1, 0.1, 0.2], [0.2, 0.3, 0.1], [0.3, 0.2, 0.4]];
        let cfg = LossConfig::default();
        let (loss, g) = hubcor_loss(&p, &t, &cfg).unwrap();
        // channels 1, 2 are exact; channel 0 is constant → r = 0
        let huber_part: f64 = (0..3).map(|i| huber(p[i][0] - t[i][0], 0.1)).sum::<f64>() / 9.0;
        assert!((loss - (huber_part + 0.5 * (1.0 - 2.0 / 3.0))).abs() < 1e-12);
        // no correlation gradient through the constant channel
        for i in 0..3 {
            assert!((g[i][0] - huber_grad(p[i][0] - t[i][0], 0.1) / 9.0).abs() < 1e-15);
        }
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    }

    #[test]
    fn small_batch_with_correlation_is_rejected() {
        let p = vec![[0.2, 0.3, 0.5]];
        assert!(hubcor_loss(&p, &p, &LossConfig::default()).is_err());
        assert!(hubcor_loss(&p, &p, &LossConfig::mse_only()).is_ok());
        assert!(hubcor_loss(&p, &[], &LossConfig::mse_only()).is_err());
    }

    #[test]
    fn mse_mae_examples() {
        let p = vec![[1.0, 0.0, 0.0]];
        let t = vec![[0.0, 1.0, 0.0]];
        assert!((mse(&p, &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mae(&p, &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert!(mse(&p, &[]).is_err());
    }

    #[test]
    fn mse_mae_match_elementwise_resum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_batch(&mut rng, 100);
        let t = random_batch(&mut rng, 100);
        let mut sq = 0.0;
        let mut ab = 0.0;
        for i in 0..100 {
            for c in 0..3 {
                sq += (p[i][c] - t[i][c]) * (p[i][c] - t[i][c]);
                ab += (p[i][c] - t[i][c]).abs();
            }
        }
        assert!((mse(&p, &t).unwrap() - sq / 300.0).abs() < 1e-15);
        assert!((mae(&p, &t).unwrap() - ab / 300.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let t = vec![[0.1, 0.5, 0.2], [0.4, 0.2, 0.9], [0.3, 0.7, 0.5]];
        let p: Vec<_> = t.iter().map(|r| r.map(|v| 2.0 * v)).collect();
        assert!((pearson_cc(&p, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson_cc(&t[..1], &t[..1]).is_err());
    }

    #[test]
    fn huber_approaches_half_mse_for_large_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_batch(&mut rng, 50);
        let t = random_batch(&mut rng, 50);
        let cfg = LossConfig {
            huber_delta: 10.0,
            corr_weight: 0.0,
            ..LossConfig::default()
        };
        let (loss, _) = hubcor_loss(&p, &t, &cfg).unwrap();
        assert!((2.0 * loss - mse(&p, &t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn metrics_text_round_trip() {
        let m = Metrics {
            mse: 0.0079,
            mae: 0.0612,
            cc: 0.7731,
        };
        let text = m.to_kv_text();
        assert!(text.contains("cc_percent = "));
        let back = Metrics::from_kv_text(&text).unwrap();
        assert_eq!(back.mse, m.mse);
        assert!((back.cc - m.cc).abs() < 1e-15);
        assert!(Metrics::from_kv_text("mse = 1\n").is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(
            x in proptest::collection::vec(-10.0f64..10.0, 3..30),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.random::<f64>()).collect();
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            if let (Some(r0), Some(r1)) = (pearson(&x, &y), pearson(&xs, &y)) {
                prop_assert!((r0 - r1).abs() < 1e-9);
                prop_assert!(r0.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn hubcor_is_nonnegative(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_batch(&mut rng, n);
            let t = random_batch(&mut rng, n);
            let (loss, _) = hubcor_loss(&p, &t, &LossConfig::default()).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
