//! Dataset generation, CSV persistence, feature scaling, frequency splits and
//! episodic task sampling.

use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    self, DesignVector, OracleConfig, ResponseTriple, ARRAY_SIZES, CVB_RANGE_PF, CVT_RANGE_FF,
    FEATURE_NAMES, FREQ_BANDS_GHZ, LV_RANGE_PH, N_FEATURES, RV_RANGE_OHM, SPACING_RANGE,
    THETA_RANGE_DEG,
};

pub const DEFAULT_DATASET_SIZE: usize = 50_000;

/// Exact CSV header.
pub const CSV_HEADER: [&str; 11] = [
    "freq_ghz",
    "theta_deg",
    "spacing_lambda",
    "cvt_ff",
    "cvb_pf",
    "rv_ohm",
    "lv_ph",
    "array_n",
    "transmittance",
    "reflectance",
    "absorbance",
];

/// Closure tolerance for labels read from disk.
const LABEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: DesignVector,
    pub y: ResponseTriple,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws one design point uniformly over the feature domain.
pub fn random_design(rng: &mut impl Rng) -> DesignVector {
    let total: f64 = FREQ_BANDS_GHZ.iter().map(|(lo, hi)| hi - lo).sum();
    let mut u = total * rng.random::<f64>();
    let mut freq = FREQ_BANDS_GHZ[FREQ_BANDS_GHZ.len() - 1].1;
    for &(lo, hi) in &FREQ_BANDS_GHZ {
        if u < hi - lo {
            freq = lo + u;
            break;
        }
        u -= hi - lo;
    }
    DesignVector {
        freq_ghz: freq,
        theta_deg: uniform(rng, THETA_RANGE_DEG),
        spacing_lambda: uniform(rng, SPACING_RANGE),
        cvt_ff: uniform(rng, CVT_RANGE_FF),
        cvb_pf: uniform(rng, CVB_RANGE_PF),
        rv_ohm: uniform(rng, RV_RANGE_OHM),
        lv_ph: uniform(rng, LV_RANGE_PH),
        array_n: ARRAY_SIZES[rng.random_range(0..ARRAY_SIZES.len())],
    }
}

/// `n_samples` uniformly drawn design points labelled by the oracle.
///
/// Designs are drawn sequentially from a seeded stream; labelling runs in
/// parallel and keeps the draw order.
pub fn generate_dataset(n_samples: usize, cfg: &OracleConfig, seed: u64) -> Result<Vec<Sample>> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be > 0"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let designs: Vec<DesignVector> = (0..n_samples).map(|_| random_design(&mut rng)).collect();
    designs
        .into_par_iter()
        .map(|x| Ok(Sample { x, y: oracle::unit_cell_response(&x, cfg)? }))
        .collect()
}

/// Oracle response of `base` at each frequency in `freqs_ghz`.
pub fn frequency_sweep(base: &DesignVector, freqs_ghz: &[f64], cfg: &OracleConfig) -> Result<Vec<Sample>> {
    freqs_ghz
        .iter()
        .map(|&f| {
            let x = DesignVector { freq_ghz: f, ..*base };
            Ok(Sample {
                x,
                y: oracle::unit_cell_response(&x, cfg)?,
            })
        })
        .collect()
}

/// Evenly spaced frequencies over both bands, `step_ghz` apart, endpoints included.
pub fn frequency_grid(step_ghz: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for &(lo, hi) in &FREQ_BANDS_GHZ {
        let n = ((hi - lo) / step_ghz).round() as usize;
        out.extend((0..=n).map(|i| (lo + i as f64 * step_ghz).min(hi)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo && f <= self.hi
    }

    fn overlaps(&self, o: &Interval) -> bool {
        self.lo.max(o.lo) < self.hi.min(o.hi)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

fn in_any(intervals: &[Interval], f: f64) -> bool {
    intervals.iter().any(|i| i.contains(f))
}

fn describe(intervals: &[Interval]) -> String {
    intervals.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ∪ ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Primary,
    Easy,
    Hard,
    Custom,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Primary => "primary",
            SplitName::Easy => "easy",
            SplitName::Hard => "hard",
            SplitName::Custom => "custom",
        }
    }
}

/// Frequency regions of one meta-learning split, in GHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: SplitName,
    pub train_support_ghz: Vec<Interval>,
    pub train_query_ghz: Vec<Interval>,
    /// Shared by meta-validation and meta-test.
    pub eval_support_ghz: Vec<Interval>,
    pub eval_query_ghz: Vec<Interval>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        preset_split("primary").expect("primary preset exists")
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["primary", "easy", "hard"];

/// The three published split presets.
pub fn preset_split(name: &str) -> Result<SplitSpec> {
    let low = Interval::new(5.0, 11.0);
    let (name, cut1, cut2, cut3) = match name {
        "primary" => (SplitName::Primary, 16.5, 19.0, 22.0),
        "easy" => (SplitName::Easy, 17.0, 20.0, 22.5),
        "hard" => (SplitName::Hard, 16.0, 18.0, 21.5),
        other => {
            return Err(Error::config(format!(
                "unknown split `{other}`; valid names: {}",
                SPLIT_NAMES.join(", ")
            )))
        }
    };
    Ok(SplitSpec {
        name,
        train_support_ghz: vec![low, Interval::new(15.0, cut1)],
        train_query_ghz: vec![Interval::new(cut1, cut2)],
        eval_support_ghz: vec![Interval::new(cut2, cut3)],
        eval_query_ghz: vec![Interval::new(cut3, 25.0)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (label, list) in [
            ("train_support_ghz", &self.train_support_ghz),
            ("train_query_ghz", &self.train_query_ghz),
            ("eval_support_ghz", &self.eval_support_ghz),
            ("eval_query_ghz", &self.eval_query_ghz),
        ] {
            if list.is_empty() {
                return Err(Error::config(format!("{label} has no intervals")));
            }
            if let Some(bad) = list.iter().find(|i| !(i.lo < i.hi) || !i.lo.is_finite() || !i.hi.is_finite()) {
                return Err(Error::config(format!("{label}: empty interval {bad}")));
            }
        }
        for (s, q, which) in [
            (&self.train_support_ghz, &self.train_query_ghz, "train"),
            (&self.eval_support_ghz, &self.eval_query_ghz, "eval"),
        ] {
            if s.iter().any(|a| q.iter().any(|b| a.overlaps(b))) {
                return Err(Error::config(format!(
                    "{which} support and query intervals overlap"
                )));
            }
        }
        Ok(())
    }

    pub fn support(&self, phase: Phase) -> &[Interval] {
        match phase {
            Phase::Train => &self.train_support_ghz,
            Phase::Eval => &self.eval_support_ghz,
        }
    }

    pub fn query(&self, phase: Phase) -> &[Interval] {
        match phase {
            Phase::Train => &self.train_query_ghz,
            Phase::Eval => &self.eval_query_ghz,
        }
    }

    pub fn in_phase(&self, phase: Phase, f: f64) -> bool {
        in_any(self.support(phase), f) || in_any(self.query(phase), f)
    }
}

/// Per-feature z-score transform fitted on the meta-train pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

pub fn fit_scaler(samples: &[Sample]) -> Result<Scaler> {
    if samples.is_empty() {
        return Err(Error::config("cannot fit a scaler on zero samples"));
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.x.to_features()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; N_FEATURES];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.x.to_features()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = std::array::from_fn(|k| {
        let sd = (var[k] / n).sqrt();
        // zero-variance columns keep unit scale
        if sd <= 1e-12 * mean[k].abs().max(1.0) {
            1.0
        } else {
            sd
        }
    });
    Ok(Scaler { mean, std })
}

impl Scaler {
    pub fn transform(&self, raw: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|k| (raw[k] - self.mean[k]) / self.std[k])
    }

    pub fn transform_design(&self, d: &DesignVector) -> [f64; N_FEATURES] {
        self.transform(&d.to_features())
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("scaler needs finite means and positive stds"));
        }
        Ok(())
    }
}

/// Scaled features and targets in struct-of-arrays form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub x: Vec<[f64; N_FEATURES]>,
    pub y: Vec<[f64; 3]>,
    /// Unscaled frequency of each row, GHz.
    pub freq_ghz: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], scaler: &Scaler) -> Self {
        Batch {
            x: samples.iter().map(|s| scaler.transform_design(&s.x)).collect(),
            y: samples.iter().map(|s| s.y.to_array()).collect(),
            freq_ghz: samples.iter().map(|s| s.x.freq_ghz).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn gather(&self, idx: impl Iterator<Item = usize>) -> Batch {
        let mut out = Batch::default();
        for i in idx {
            out.x.push(self.x[i]);
            out.y.push(self.y[i]);
            out.freq_ghz.push(self.freq_ghz[i]);
        }
        out
    }

    /// Concatenation of two batches.
    pub fn concat(&self, other: &Batch) -> Batch {
        let mut out = self.clone();
        out.x.extend_from_slice(&other.x);
        out.y.extend_from_slice(&other.y);
        out.freq_ghz.extend_from_slice(&other.freq_ghz);
        out
    }
}

/// One episode: adapt on `support`, measure on `query`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: u64,
    pub support: Batch,
    pub query: Batch,
}

/// Pre-indexed support and query regions of a pool for one phase.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    support: Batch,
    query: Batch,
    support_label: String,
    query_label: String,
}

impl TaskSampler {
    /// Rows on a shared support/query boundary are assigned to the support region.
    pub fn new(pool: &[Sample], scaler: &Scaler, spec: &SplitSpec, phase: Phase) -> Self {
        let all = Batch::from_samples(pool, scaler);
        let sup = spec.support(phase);
        let qry = spec.query(phase);
        let s_idx = (0..all.len()).filter(|&i| in_any(sup, all.freq_ghz[i]));
        let q_idx = (0..all.len()).filter(|&i| !in_any(sup, all.freq_ghz[i]) && in_any(qry, all.freq_ghz[i]));
        let phase_name = match phase {
            Phase::Train => "train",
            Phase::Eval => "eval",
        };
        TaskSampler {
            support: all.gather(s_idx),
            query: all.gather(q_idx),
            support_label: format!("{phase_name} support region {}", describe(sup)),
            query_label: format!("{phase_name} query region {}", describe(qry)),
        }
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    pub fn query_len(&self) -> usize {
        self.query.len()
    }

    /// All rows of the support region.
    pub fn support_rows(&self) -> &Batch {
        &self.support
    }

    pub fn query_rows(&self) -> &Batch {
        &self.query
    }

    /// Uniform draw without replacement within each region. Consumes exactly
    /// two words of `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, n_support: usize, n_query: usize, id: u64, rng: &mut R) -> Result<Task> {
        if n_support == 0 || n_query == 0 {
            return Err(Error::config("tasks need at least one support and one query sample"));
        }
        for (label, needed, have) in [
            (&self.support_label, n_support, self.support.len()),
            (&self.query_label, n_query, self.query.len()),
        ] {
            if needed > have {
                return Err(Error::InsufficientData {
                    region: label.clone(),
                    needed,
                    available: have,
                });
            }
        }
        // one sub-stream per region, so the query draw does not depend on n_support
        let mut s_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut q_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let s = index::sample(&mut s_rng, self.support.len(), n_support);
        let q = index::sample(&mut q_rng, self.query.len(), n_query);
        Ok(Task {
            id,
            support: self.support.gather(s.into_iter()),
            query: self.query.gather(q.into_iter()),
        })
    }
}

/// Samples one task from `pool`; see [`TaskSampler`] for repeated draws.
pub fn sample_task<R: Rng + ?Sized>(
    pool: &[Sample],
    scaler: &Scaler,
    spec: &SplitSpec,
    phase: Phase,
    n_support: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Task> {
    TaskSampler::new(pool, scaler, spec, phase).sample(n_support, n_query, 0, rng)
}

/// Meta-train, meta-validation and meta-test pools of one split, plus the scaler.
#[derive(Debug, Clone)]
pub struct SplitPools {
    pub spec: SplitSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub scaler: Scaler,
}

impl SplitPools {
    /// Partitions `samples` by frequency region. Eval-region rows alternate
    /// between validation and test so the two pools are disjoint.
    pub fn build(samples: &[Sample], spec: &SplitSpec) -> Result<Self> {
        spec.validate()?;
        let train: Vec<Sample> = samples
            .iter()
            .filter(|s| spec.in_phase(Phase::Train, s.x.freq_ghz))
            .copied()
            .collect();
        let eval: Vec<Sample> = samples
            .iter()
            .filter(|s| spec.in_phase(Phase::Eval, s.x.freq_ghz) && !spec.in_phase(Phase::Train, s.x.freq_ghz))
            .copied()
            .collect();
        if train.is_empty() {
            return Err(Error::InsufficientData {
                region: "meta-train".into(),
                needed: 1,
                available: 0,
            });
        }
        let scaler = fit_scaler(&train)?;
        let (mut val, mut test) = (Vec::new(), Vec::new());
        for (i, s) in eval.into_iter().enumerate() {
            if i % 2 == 0 {
                val.push(s);
            } else {
                test.push(s);
            }
        }
        Ok(SplitPools {
            spec: spec.clone(),
            train,
            val,
            test,
            scaler,
        })
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for s in samples {
        let x = &s.x;
        w.write_record([
            fmt_f64(x.freq_ghz),
            fmt_f64(x.theta_deg),
            fmt_f64(x.spacing_lambda),
            fmt_f64(x.cvt_ff),
            fmt_f64(x.cvb_pf),
            fmt_f64(x.rv_ohm),
            fmt_f64(x.lv_ph),
            x.array_n.to_string(),
            fmt_f64(s.y.transmittance),
            fmt_f64(s.y.reflectance),
            fmt_f64(s.y.absorbance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    read_csv_from(file)
}

/// Parses the dataset CSV format from any reader.
pub fn read_csv_from<R: std::io::Read>(reader: R) -> Result<Vec<Sample>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let mut v = [0.0f64; 11];
        for (k, field) in rec.iter().enumerate() {
            v[k] = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("{}: `{field}` is not a number", CSV_HEADER[k]),
            })?;
        }
        if v[7].fract() != 0.0 || v[7] < 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("array_n must be an integer, got {}", v[7]),
            });
        }
        let x = DesignVector {
            freq_ghz: v[0],
            theta_deg: v[1],
            spacing_lambda: v[2],
            cvt_ff: v[3],
            cvb_pf: v[4],
            rv_ohm: v[5],
            lv_ph: v[6],
            array_n: v[7] as u32,
        };
        let y = ResponseTriple::new(v[8], v[9], v[10]);
        let tag = |e: Error| match e {
            Error::Domain(m) => Error::Domain(format!("line {line}: {m}")),
            other => other,
        };
        x.validate().map_err(tag)?;
        y.validate(LABEL_TOL).map_err(tag)?;
        out.push(Sample { x, y });
    }
    Ok(out)
}

// Keep the column order in one place.
const _: () = assert!(FEATURE_NAMES.len() == 8);
