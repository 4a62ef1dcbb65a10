//! Comparison methods: the base network trained by plain supervision, and k-NN.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::{Batch, Phase, Sample, Scaler, SplitPools, Task, TaskSampler};
use crate::error::{Error, Result};
use crate::metatrain::{
    adabelief_update, evaluate_tasks, lr_schedule, sample_eval_tasks, test_task_seed, AdaBeliefState, EvalReport,
    MetaConfig,
};
use crate::net::{self, init_params, Mode};
use crate::objective::Metrics;
use crate::oracle::{DesignVector, ResponseTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[default]
    PlainDnn,
    Knn,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::PlainDnn => "plain_dnn",
            BaselineKind::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub epochs: usize,
    pub lr: f64,
    pub k: usize,
    pub batch_size: usize,
    /// Fraction of train-region rows held out for the in-distribution score.
    pub holdout_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::PlainDnn,
            epochs: 200,
            lr: 0.0003,
            k: 5,
            batch_size: 256,
            holdout_fraction: 0.1,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lr > 0.0) || self.batch_size < 1 {
            return Err(Error::config("lr must be > 0 and batch_size >= 1"));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction must be in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainReport {
    pub epochs: Vec<PlainEpoch>,
    pub best_epoch: Option<usize>,
    /// Held-out rows of the training regions (None without a holdout).
    pub in_distribution: Option<Metrics>,
}

/// Splits train-region rows into fit and holdout parts by seeded shuffle.
fn holdout_split(pool: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x401d));
    let n_hold = (pool.len() as f64 * fraction).round() as usize;
    let hold = idx[..n_hold].iter().map(|&i| pool[i]).collect();
    let fit = idx[n_hold..].iter().map(|&i| pool[i]).collect();
    (fit, hold)
}

/// Supervised training of the base network on every train-region row,
/// with the meta-learner's architecture, loss, optimizer and schedule.
/// The epoch with the lowest zero-shot validation MSE is kept.
pub fn train_plain(
    pools: &SplitPools,
    meta: &MetaConfig,
    cfg: &BaselineConfig,
) -> Result<(Checkpoint, PlainReport)> {
    if cfg.epochs > 0 {
        cfg.validate()?;
    }
    meta.architecture.validate()?;
    meta.loss.validate()?;
    let (fit, hold) = holdout_split(&pools.train, cfg.holdout_fraction, meta.seed);
    if fit.is_empty() {
        return Err(Error::InsufficientData {
            region: "meta-train".into(),
            needed: 1,
            available: 0,
        });
    }
    let data = Batch::from_samples(&fit, &pools.scaler);
    let val_sampler = TaskSampler::new(&pools.val, &pools.scaler, &meta.split, Phase::Eval);
    let val = val_sampler.query_rows();

    let mut params = init_params(&meta.architecture, meta.seed)?;
    let mut state = AdaBeliefState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, net::ModelParams)> = None;
    let mut xs = Vec::with_capacity(cfg.batch_size);
    let mut ys = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr, meta.lr_schedule);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            xs.clear();
            ys.clear();
            xs.extend(chunk.iter().map(|&i| data.x[i]));
            ys.extend(chunk.iter().map(|&i| data.y[i]));
            let (loss, g) = net::loss_and_grad(&params, &xs, &ys, Mode::Train, &meta.loss, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("plain epoch {epoch}: loss is {loss}")));
            }
            total += loss * chunk.len() as f64;
            let (next, next_state) = adabelief_update(&state, &params, &g, lr, &meta.adabelief)?;
            params = next;
            state = next_state;
        }
        let val_metrics = if val.is_empty() {
            Metrics {
                mse: f64::NAN,
                mae: f64::NAN,
                cc: f64::NAN,
            }
        } else {
            Metrics::compute(&net::predict_batch(&params, &val.x)?, &val.y)?
        };
        epochs.push(PlainEpoch {
            epoch,
            train_loss: total / data.len() as f64,
            val: val_metrics,
            lr,
        });
        if best.as_ref().is_none_or(|(_, l, _)| val_metrics.mse < *l) || val.is_empty() {
            best = Some((epoch, val_metrics.mse, params.clone()));
        }
    }

    let (best_epoch, best_val, params) = match best {
        Some((e, l, p)) => (Some(e), Some(l), p),
        None => (None, None, params),
    };
    let in_distribution = if hold.is_empty() {
        None
    } else {
        let b = Batch::from_samples(&hold, &pools.scaler);
        Some(Metrics::compute(&net::predict_batch(&params, &b.x)?, &b.y)?)
    };
    let ck = Checkpoint {
        params,
        scaler: pools.scaler.clone(),
        meta: TrainingMeta {
            kind: BaselineKind::PlainDnn.name().into(),
            seed: meta.seed,
            split: meta.split.name.as_str().into(),
            epochs: cfg.epochs,
            best_epoch,
            best_val_loss: best_val,
            inner_lr: 0.0,
            inner_steps: 0,
        },
    };
    Ok((
        ck,
        PlainReport {
            epochs,
            best_epoch,
            in_distribution,
        },
    ))
}

/// The meta-test tasks [`crate::metatrain::meta_evaluate`] draws for `meta`.
pub fn meta_test_tasks(pools: &SplitPools, meta: &MetaConfig) -> Result<Vec<Task>> {
    let sampler = TaskSampler::new(&pools.test, &pools.scaler, &meta.split, Phase::Eval);
    sample_eval_tasks(&sampler, meta.test_tasks, meta.n_support, meta.n_query, test_task_seed(meta.seed))
}

/// Zero-shot score of a plain checkpoint on the meta-test query sets.
pub fn evaluate_plain(ck: &Checkpoint, pools: &SplitPools, meta: &MetaConfig) -> Result<EvalReport> {
    ck.check_architecture(&meta.architecture)?;
    let tasks = meta_test_tasks(pools, meta)?;
    evaluate_tasks(&ck.params, &tasks, 0, 0.0, &meta.loss)
}

/// Mean target of the `k` nearest rows of `train` in scaled-feature space.
pub fn knn_predict(train: &[Sample], scaler: &Scaler, x: &DesignVector, k: usize) -> Result<ResponseTriple> {
    let index = KnnIndex::new(train, scaler)?;
    index.predict(&scaler.transform_design(x), k)
}

/// Pre-scaled reference set for repeated k-NN queries.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    x: Vec<[f64; crate::oracle::N_FEATURES]>,
    y: Vec<[f64; 3]>,
}

impl KnnIndex {
    pub fn new(train: &[Sample], scaler: &Scaler) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InsufficientData {
                region: "k-NN reference set".into(),
                needed: 1,
                available: 0,
            });
        }
        let b = Batch::from_samples(train, scaler);
        Ok(KnnIndex { x: b.x, y: b.y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `q` is already scaled.
    pub fn predict(&self, q: &[f64; crate::oracle::N_FEATURES], k: usize) -> Result<ResponseTriple> {
        if k == 0 || k > self.len() {
            return Err(Error::config(format!("k = {k} must be in 1..={}", self.len())));
        }
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
        }
        let mut near = d[..k].to_vec();
        // fixed summation order
        near.sort_by(cmp);
        let mut acc = [0.0; 3];
        for &(_, i) in &near {
            for (a, v) in acc.iter_mut().zip(self.y[i]) {
                *a += v;
            }
        }
        let kf = k as f64;
        Ok(ResponseTriple::from_array([acc[0] / kf, acc[1] / kf, acc[2] / kf]))
    }

    pub fn predict_batch(&self, qs: &[[f64; crate::oracle::N_FEATURES]], k: usize) -> Result<Vec<[f64; 3]>> {
        qs.par_iter().map(|q| self.predict(q, k).map(|r| r.to_array())).collect()
    }
}

/// k-NN over all train-region rows, scored on the meta-test query sets.
pub fn evaluate_knn(pools: &SplitPools, meta: &MetaConfig, k: usize) -> Result<EvalReport> {
    let index = KnnIndex::new(&pools.train, &pools.scaler)?;
    let tasks = meta_test_tasks(pools, meta)?;
    let per_task = tasks
        .iter()
        .map(|t| {
            let pred = index.predict_batch(&t.query.x, k)?;
            let support = index.predict_batch(&t.support.x, k)?;
            Ok(crate::metatrain::TaskMetrics {
                task_id: t.id,
                n_query: t.query.len(),
                query: Metrics::compute(&pred, &t.query.y)?,
                support_after: Metrics::compute(&support, &t.support.y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weighted: Vec<(Metrics, usize)> = per_task.iter().map(|t| (t.query, t.n_query)).collect();
    let metrics = Metrics::weighted_mean(&weighted).ok_or_else(|| Error::Shape("no tasks".into()))?;
    Ok(EvalReport { metrics, per_task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, preset_split};
    use crate::oracle::OracleConfig;

    fn identity_scaler() -> Scaler {
        Scaler {
            mean: [0.0; 8],
            std: [1.0; 8],
        }
    }

    fn point(freq: f64, theta: f64, y: [f64; 3]) -> Sample {
        let mut s = generate_dataset(1, &OracleConfig::default(), 0).unwrap()[0];
        s.x.freq_ghz = freq;
        s.x.theta_deg = theta;
        s.y = ResponseTriple::from_array(y);
        s
    }

    fn crafted() -> Vec<Sample> {
        vec![
            point(6.0, 0.0, [1.0, 0.0, 0.0]),
            point(7.0, 0.0, [0.0, 1.0, 0.0]),
            point(9.0, 0.0, [0.0, 0.0, 1.0]),
            point(10.0, 0.0, [0.5, 0.5, 0.0]),
            point(20.0, 0.0, [0.2, 0.2, 0.6]),
        ]
    }

    #[test]
    fn knn_exact_hit_returns_label() {
        let set = crafted();
        let r = knn_predict(&set, &identity_scaler(), &set[2].x, 1).unwrap();
        assert_eq!(r.to_array(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn knn_all_points_is_label_mean() {
        let set = crafted();
        let r = knn_predict(&set, &identity_scaler(), &set[0].x, 5).unwrap().to_array();
        let mean = [1.7 / 5.0, 1.7 / 5.0, 1.6 / 5.0];
        for c in 0..3 {
            assert!((r[c] - mean[c]).abs() < 1e-15);
        }
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn knn_three_neighbours_by_brute_force() {
        let set = crafted();
        let mut q = set[0].x;
        q.freq_ghz = 8.2;
        // distances along frequency only: 2.2, 1.2, 0.8, 1.8, 11.8
        let r = knn_predict(&set, &identity_scaler(), &q, 3).unwrap().to_array();
        let expected = [0.5 / 3.0, 1.5 / 3.0, 1.0 / 3.0];
        for c in 0..3 {
            assert!((r[c] - expected[c]).abs() < 1e-15, "{r:?}");
        }
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let mut set = crafted();
        set[1].x = set[0].x;
        let r = knn_predict(&set, &identity_scaler(), &set[0].x, 1).unwrap();
        assert_eq!(r.to_array(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let set = crafted();
        assert!(knn_predict(&set, &identity_scaler(), &set[0].x, 6).is_err());
        assert!(knn_predict(&set, &identity_scaler(), &set[0].x, 0).is_err());
        assert!(knn_predict(&[], &identity_scaler(), &set[0].x, 1).is_err());
    }

    fn small_pools() -> SplitPools {
        let data = generate_dataset(4_000, &OracleConfig::default(), 8).unwrap();
        SplitPools::build(&data, &preset_split("primary").unwrap()).unwrap()
    }

    fn small_meta() -> MetaConfig {
        MetaConfig {
            n_support: 32,
            n_query: 16,
            test_tasks: 2,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let pools = small_pools();
        let meta = small_meta();
        let cfg = BaselineConfig {
            epochs: 0,
            ..BaselineConfig::default()
        };
        let (ck, rep) = train_plain(&pools, &meta, &cfg).unwrap();
        assert_eq!(ck.params, init_params(&meta.architecture, meta.seed).unwrap());
        assert!(rep.epochs.is_empty() && rep.best_epoch.is_none());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plain_training_is_deterministic_and_learns() {
        let pools = small_pools();
        let meta = small_meta();
        let cfg = BaselineConfig {
            epochs: 4,
            lr: 3e-3,
            ..BaselineConfig::default()
        };
        let (a, ra) = train_plain(&pools, &meta, &cfg).unwrap();
        let (b, rb) = train_plain(&pools, &meta, &cfg).unwrap();
        assert_eq!(a.to_text().unwrap(), b.to_text().unwrap());
        assert_eq!(ra, rb);
        assert!(ra.epochs.last().unwrap().train_loss < ra.epochs[0].train_loss);
        let ev = evaluate_plain(&a, &pools, &meta).unwrap();
        assert!(ev.metrics.mse.is_finite());
    }

    #[test]
    fn knn_outputs_stay_on_simplex() {
        let pools = small_pools();
        let meta = small_meta();
        let rep = evaluate_knn(&pools, &meta, 5).unwrap();
        assert!(rep.metrics.mse.is_finite());
        let index = KnnIndex::new(&pools.train, &pools.scaler).unwrap();
        for t in meta_test_tasks(&pools, &meta).unwrap() {
            for y in index.predict_batch(&t.query.x, 5).unwrap() {
                assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
