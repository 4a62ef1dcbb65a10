//! Branched surrogate network with hand-written reverse-mode gradients.
//!
//! ```text
//!   x (8) ──► gating  8→12 ReLU →8 sigmoid ─────────────► h_g (8)  ┐
//!   x[1..8] ► other   7→24 ReLU, LN, dropout →16 ReLU ──► h_o (16) ├► concat (32) ► head ► softmax (3)
//!   x[0]  ──► freq    1→8 ReLU →8 ReLU ─────────────────► h_f (8)  ┘
//!   head: 32→48 ReLU, LN, dropout →24 ReLU →3
//! ```
//!
//! All weights live in one flat `Vec<f64>`; a [`Layout`] maps each layer onto
//! contiguous slices. Activations are stored batch-major (`batch × width`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{hubcor_loss, LossConfig};
use crate::oracle::{ResponseTriple, N_FEATURES};

const LN_EPS: f64 = 1e-5;

/// How the gating network's output enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `h_g` is concatenated with the branch outputs.
    #[default]
    Concat,
    /// `h_g` also scales the input features elementwise before the branches.
    Multiply,
}

/// Branch removal for ablations; the removed branch outputs zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Complete,
    NoFreqBranch,
    NoOtherBranch,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Complete => "complete",
            Ablation::NoFreqBranch => "no_freq_branch",
            Ablation::NoOtherBranch => "no_other_branch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub gating: Vec<usize>,
    pub other: Vec<usize>,
    pub freq: Vec<usize>,
    pub head: Vec<usize>,
    pub dropout_rate: f64,
    pub gate_mode: GateMode,
    pub ablation: Ablation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            gating: vec![8, 12, 8],
            other: vec![7, 24, 16],
            freq: vec![1, 8, 8],
            head: vec![32, 48, 24, 3],
            dropout_rate: 0.1,
            gate_mode: GateMode::Concat,
            ablation: Ablation::Complete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Sigmoid,
    Identity,
}

impl Architecture {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    fn stack_specs(&self) -> [(&'static str, &[usize], bool, Act); 4] {
        [
            ("gating", &self.gating, false, Act::Sigmoid),
            ("other", &self.other, true, Act::Relu),
            ("freq", &self.freq, false, Act::Relu),
            ("head", &self.head, true, Act::Identity),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dims, _, _) in self.stack_specs() {
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::config(format!(
                    "{name} widths must list at least input and output, all non-zero"
                )));
            }
        }
        let last = |d: &[usize]| d[d.len() - 1];
        if self.gating[0] != N_FEATURES {
            return Err(Error::config("gating input width must be 8"));
        }
        if self.other[0] != N_FEATURES - 1 {
            return Err(Error::config("other-branch input width must be 7"));
        }
        if self.freq[0] != 1 {
            return Err(Error::config("frequency-branch input width must be 1"));
        }
        let concat = last(&self.gating) + last(&self.other) + last(&self.freq);
        if self.head[0] != concat {
            return Err(Error::config(format!(
                "head input width {} != concatenation width {concat}",
                self.head[0]
            )));
        }
        if last(&self.head) != 3 {
            return Err(Error::config("head output width must be 3"));
        }
        if self.gate_mode == GateMode::Multiply && last(&self.gating) != N_FEATURES {
            return Err(Error::config("multiplicative gating needs an 8-wide gate"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must be in [0, 1)"));
        }
        Ok(())
    }

    /// Parameter count from the widths alone.
    pub fn param_count(&self) -> usize {
        self.stack_specs()
            .iter()
            .map(|(_, dims, norm, _)| {
                let dense: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
                let ln = if *norm && dims.len() > 2 { 2 * dims[1] } else { 0 };
                dense + ln
            })
            .sum()
    }

    pub fn concat_width(&self) -> usize {
        self.head[0]
    }
}

/// One named contiguous slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseSlot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct StackLayout {
    dims: Vec<usize>,
    layers: Vec<DenseSlot>,
    /// Offsets of (gain, shift) of the layer norm after the first layer.
    norm: Option<(usize, usize)>,
    out_act: Act,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    stacks: [StackLayout; 4],
    total: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut entries = Vec::new();
        let mut off = 0usize;
        let mut push = |entries: &mut Vec<LayoutEntry>, name: String, len: usize| {
            let o = off;
            entries.push(LayoutEntry {
                name,
                offset: o,
                len,
            });
            off += len;
            o
        };
        let stacks = arch.stack_specs().map(|(name, dims, norm, act)| {
            let mut layers = Vec::new();
            let mut norm_slot = None;
            for (l, w) in dims.windows(2).enumerate() {
                let wo = push(&mut entries, format!("{name}.{l}.weight"), w[0] * w[1]);
                let bo = push(&mut entries, format!("{name}.{l}.bias"), w[1]);
                layers.push(DenseSlot {
                    w: wo,
                    b: bo,
                    fan_in: w[0],
                    fan_out: w[1],
                });
                if l == 0 && norm && dims.len() > 2 {
                    let g = push(&mut entries, format!("{name}.norm.gain"), w[1]);
                    let s = push(&mut entries, format!("{name}.norm.shift"), w[1]);
                    norm_slot = Some((g, s));
                }
            }
            StackLayout {
                dims: dims.to_vec(),
                layers,
                norm: norm_slot,
                out_act: act,
            }
        });
        Layout {
            entries,
            stacks,
            total: off,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat parameter vector together with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layout: Layout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if values.len() != layout.total() {
            return Err(Error::ArchitectureMismatch(format!(
                "architecture needs {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(ModelParams {
            arch,
            layout,
            values,
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.param_count();
        Self::from_values(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same architecture, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(ModelParams {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            values,
        })
    }
}

/// Glorot-uniform weights, zero biases, unit norm gains.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let layout = Layout::new(arch);
    let mut values = vec![0.0; layout.total()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for stack in &layout.stacks {
        for (l, slot) in stack.layers.iter().enumerate() {
            let a = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for v in &mut values[slot.w..slot.w + slot.fan_in * slot.fan_out] {
                *v = rng.random_range(-a..a);
            }
            if l == 0 {
                if let Some((g, _)) = stack.norm {
                    values[g..g + slot.fan_out].fill(1.0);
                }
            }
        }
    }
    Ok(ModelParams {
        arch: arch.clone(),
        layout,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    /// Inverted-dropout multipliers, all ones outside training.
    mask: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StackCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    norm: Option<NormCache>,
}

impl StackCache {
    fn output(&self) -> &[f64] {
        self.post.last().expect("stack has layers")
    }
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    arch: Architecture,
    param_len: usize,
    pub mode: Mode,
    pub batch: usize,
    x: Vec<f64>,
    gated_x: Option<Vec<f64>>,
    gating: StackCache,
    other: Option<StackCache>,
    freq: Option<StackCache>,
    head: StackCache,
    concat: Vec<f64>,
    pub output: Vec<[f64; 3]>,
}

impl ForwardCache {
    /// Gating output `h_g`, `batch × width`.
    pub fn gate(&self) -> &[f64] {
        self.gating.output()
    }

    pub fn concat(&self) -> &[f64] {
        &self.concat
    }

    /// Dropout multipliers of the other branch and the head.
    pub fn dropout_masks(&self) -> (Option<&[f64]>, Option<&[f64]>) {
        (
            self.other
                .as_ref()
                .and_then(|s| s.norm.as_ref())
                .map(|n| n.mask.as_slice()),
            self.head.norm.as_ref().map(|n| n.mask.as_slice()),
        )
    }
}

fn dense_forward(values: &[f64], slot: &DenseSlot, input: &[f64], batch: usize) -> Vec<f64> {
    let (ni, no) = (slot.fan_in, slot.fan_out);
    let w = &values[slot.w..slot.w + ni * no];
    let b = &values[slot.b..slot.b + no];
    let mut out = vec![0.0; batch * no];
    for (row_in, row_out) in input.chunks_exact(ni).zip(out.chunks_exact_mut(no)) {
        for ((o, wj), bj) in row_out.iter_mut().zip(w.chunks_exact(ni)).zip(b) {
            let mut s = *bj;
            for (wi, xi) in wj.iter().zip(row_in) {
                s += wi * xi;
            }
            *o = s;
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient if asked.
fn dense_backward(
    values: &[f64],
    slot: &DenseSlot,
    input: &[f64],
    dz: &[f64],
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (ni, no) = (slot.fan_in, slot.fan_out);
    let w = &values[slot.w..slot.w + ni * no];
    let mut din = if want_input {
        Some(vec![0.0; input.len()])
    } else {
        None
    };
    {
        let (gw_all, rest) = grad.split_at_mut(slot.b);
        let gw = &mut gw_all[slot.w..slot.w + ni * no];
        let gb = &mut rest[..no];
        for (r, (row_in, row_dz)) in input.chunks_exact(ni).zip(dz.chunks_exact(no)).enumerate() {
            for (j, &d) in row_dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                for (g, xi) in gw[j * ni..(j + 1) * ni].iter_mut().zip(row_in) {
                    *g += d * xi;
                }
                if let Some(din) = din.as_mut() {
                    let drow = &mut din[r * ni..(r + 1) * ni];
                    for (di, wi) in drow.iter_mut().zip(&w[j * ni..(j + 1) * ni]) {
                        *di += d * wi;
                    }
                }
            }
        }
    }
    din
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn apply_act(act: Act, z: &[f64]) -> Vec<f64> {
    match act {
        Act::Relu => z.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect(),
        Act::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        Act::Identity => z.to_vec(),
    }
}

/// Per-row layer norm; returns (y, xhat, rstd).
pub(crate) fn layer_norm(
    a: &[f64],
    width: usize,
    gain: &[f64],
    shift: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let batch = a.len() / width;
    let mut y = vec![0.0; a.len()];
    let mut xhat = vec![0.0; a.len()];
    let mut rstd = vec![0.0; batch];
    for r in 0..batch {
        let row = &a[r * width..(r + 1) * width];
        let mu = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for k in 0..width {
            let xh = (row[k] - mu) * rs;
            xhat[r * width + k] = xh;
            y[r * width + k] = gain[k] * xh + shift[k];
        }
    }
    (y, xhat, rstd)
}

fn stack_forward<R: Rng + ?Sized>(
    values: &[f64],
    sl: &StackLayout,
    input: Vec<f64>,
    batch: usize,
    dropout: Option<(f64, &mut R)>,
) -> StackCache {
    let n_layers = sl.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut norm = None;
    let mut dropout = dropout;
    for (l, slot) in sl.layers.iter().enumerate() {
        let inp = if l == 0 { &input } else { &post[l - 1] };
        let z = dense_forward(values, slot, inp, batch);
        let act = if l + 1 == n_layers { sl.out_act } else { Act::Relu };
        let a = apply_act(act, &z);
        let out = match (l, sl.norm) {
            (0, Some((g, s))) => {
                let w = slot.fan_out;
                let (mut y, xhat, rstd) =
                    layer_norm(&a, w, &values[g..g + w], &values[s..s + w]);
                let mask = match dropout.as_mut() {
                    Some((rate, rng)) if *rate > 0.0 => {
                        let keep = 1.0 / (1.0 - *rate);
                        (0..y.len())
                            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                            .collect()
                    }
                    _ => vec![1.0; y.len()],
                };
                for (v, m) in y.iter_mut().zip(&mask) {
                    *v *= m;
                }
                norm = Some(NormCache {
                    xhat,
                    rstd,
                    mask,
                });
                y
            }
            _ => a,
        };
        pre.push(z);
        post.push(out);
    }
    StackCache {
        input,
        pre,
        post,
        norm,
    }
}

fn stack_backward(
    values: &[f64],
    sl: &StackLayout,
    cache: &StackCache,
    d_out: Vec<f64>,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let n_layers = sl.layers.len();
    let mut d = d_out;
    for l in (0..n_layers).rev() {
        let slot = &sl.layers[l];
        let w = slot.fan_out;
        // d is the gradient w.r.t. post[l]
        let mut d_act = d;
        if let (0, Some((g, s)), Some(nc)) = (l, sl.norm, cache.norm.as_ref()) {
            let gain = &values[g..g + w];
            let batch = nc.rstd.len();
            let mut da = vec![0.0; batch * w];
            for r in 0..batch {
                let rng = r * w..(r + 1) * w;
                let mut dxhat = vec![0.0; w];
                for k in 0..w {
                    let i = r * w + k;
                    let dy = d_act[i] * nc.mask[i];
                    grad[g + k] += dy * nc.xhat[i];
                    grad[s + k] += dy;
                    dxhat[k] = dy * gain[k];
                }
                let xh = &nc.xhat[rng.clone()];
                let m1 = dxhat.iter().sum::<f64>() / w as f64;
                let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                for k in 0..w {
                    da[r * w + k] = nc.rstd[r] * (dxhat[k] - m1 - xh[k] * m2);
                }
            }
            d_act = da;
        }
        let act = if l + 1 == n_layers { sl.out_act } else { Act::Relu };
        let z = &cache.pre[l];
        let dz: Vec<f64> = match act {
            Act::Relu => d_act
                .iter()
                .zip(z)
                .map(|(g, &zv)| if zv > 0.0 { *g } else { 0.0 })
                .collect(),
            Act::Sigmoid => d_act
                .iter()
                .zip(&cache.post[l])
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
            Act::Identity => d_act,
        };
        let inp = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let need = l > 0 || want_input;
        d = dense_backward(values, slot, inp, &dz, grad, need)?;
    }
    Some(d)
}

fn softmax(z: &[f64]) -> [f64; 3] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn split_input(x: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xf = Vec::with_capacity(batch);
    let mut xo = Vec::with_capacity(batch * (N_FEATURES - 1));
    for row in x.chunks_exact(N_FEATURES) {
        xf.push(row[0]);
        xo.extend_from_slice(&row[1..]);
    }
    (xf, xo)
}

/// Batched forward pass. `rng` drives dropout in [`Mode::Train`] and is untouched otherwise.
pub fn forward_batch<R: Rng + ?Sized>(
    p: &ModelParams,
    xs: &[[f64; N_FEATURES]],
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardCache> {
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite network input"));
    }
    let arch = &p.arch;
    let st = &p.layout.stacks;
    let vals = &p.values;
    let batch = xs.len();
    let x: Vec<f64> = xs.iter().flatten().copied().collect();
    let rate = arch.dropout_rate;

    let gating = stack_forward::<R>(vals, &st[0], x.clone(), batch, None);
    let gated_x = match arch.gate_mode {
        GateMode::Concat => None,
        GateMode::Multiply => Some(
            x.iter()
                .zip(gating.output())
                .map(|(a, g)| a * g)
                .collect::<Vec<f64>>(),
        ),
    };
    let (xf, xo) = split_input(gated_x.as_deref().unwrap_or(&x), batch);

    let train = mode == Mode::Train;
    let other = if arch.ablation != Ablation::NoOtherBranch {
        let d = if train { Some((rate, &mut *rng)) } else { None };
        Some(stack_forward(vals, &st[1], xo, batch, d))
    } else {
        None
    };
    let freq = (arch.ablation != Ablation::NoFreqBranch)
        .then(|| stack_forward::<R>(vals, &st[2], xf, batch, None));

    let (wg, wo, wf) = (st[0].dims[st[0].dims.len() - 1], st[1].dims[st[1].dims.len() - 1], st[2].dims[st[2].dims.len() - 1]);
    let wc = wg + wo + wf;
    let mut concat = vec![0.0; batch * wc];
    for r in 0..batch {
        let row = &mut concat[r * wc..(r + 1) * wc];
        row[..wg].copy_from_slice(&gating.output()[r * wg..(r + 1) * wg]);
        if let Some(o) = &other {
            row[wg..wg + wo].copy_from_slice(&o.output()[r * wo..(r + 1) * wo]);
        }
        if let Some(f) = &freq {
            row[wg + wo..].copy_from_slice(&f.output()[r * wf..(r + 1) * wf]);
        }
    }

    let d = if train { Some((rate, &mut *rng)) } else { None };
    let head = stack_forward(vals, &st[3], concat.clone(), batch, d);
    let output = head.output().chunks_exact(3).map(softmax).collect();

    Ok(ForwardCache {
        arch: arch.clone(),
        param_len: p.values.len(),
        mode,
        batch,
        x,
        gated_x,
        gating,
        other,
        freq,
        head,
        concat,
        output,
    })
}

/// Single-sample forward pass.
pub fn forward<R: Rng + ?Sized>(
    p: &ModelParams,
    x: &[f64; N_FEATURES],
    mode: Mode,
    rng: &mut R,
) -> Result<(ResponseTriple, ForwardCache)> {
    let cache = forward_batch(p, std::slice::from_ref(x), mode, rng)?;
    Ok((ResponseTriple::from_array(cache.output[0]), cache))
}

/// Gradient of a scalar objective given its gradient w.r.t. the softmax outputs.
pub fn backward_from_output_grad(
    p: &ModelParams,
    cache: &ForwardCache,
    d_output: &[[f64; 3]],
) -> Result<Vec<f64>> {
    if cache.param_len != p.values.len() || cache.arch != p.arch {
        return Err(Error::ArchitectureMismatch(
            "forward cache was produced by a different architecture".into(),
        ));
    }
    if d_output.len() != cache.batch {
        return Err(Error::Shape(format!(
            "output gradient has {} rows, batch is {}",
            d_output.len(),
            cache.batch
        )));
    }
    let st = &p.layout.stacks;
    let vals = &p.values;
    let batch = cache.batch;
    let mut grad = vec![0.0; p.values.len()];

    // softmax
    let mut d_logits = Vec::with_capacity(batch * 3);
    for (y, dy) in cache.output.iter().zip(d_output) {
        let dot = y[0] * dy[0] + y[1] * dy[1] + y[2] * dy[2];
        for k in 0..3 {
            d_logits.push(y[k] * (dy[k] - dot));
        }
    }
    let d_concat = stack_backward(vals, &st[3], &cache.head, d_logits, &mut grad, true)
        .expect("input gradient requested");

    let last = |s: &StackLayout| s.dims[s.dims.len() - 1];
    let (wg, wo, wf) = (last(&st[0]), last(&st[1]), last(&st[2]));
    let wc = wg + wo + wf;
    let mut d_gate = vec![0.0; batch * wg];
    let mut d_other = vec![0.0; batch * wo];
    let mut d_freq = vec![0.0; batch * wf];
    for r in 0..batch {
        let row = &d_concat[r * wc..(r + 1) * wc];
        d_gate[r * wg..(r + 1) * wg].copy_from_slice(&row[..wg]);
        d_other[r * wo..(r + 1) * wo].copy_from_slice(&row[wg..wg + wo]);
        d_freq[r * wf..(r + 1) * wf].copy_from_slice(&row[wg + wo..]);
    }

    let multiply = cache.gated_x.is_some();
    let d_xo = cache
        .other
        .as_ref()
        .and_then(|c| stack_backward(vals, &st[1], c, d_other, &mut grad, multiply));
    let d_xf = cache
        .freq
        .as_ref()
        .and_then(|c| stack_backward(vals, &st[2], c, d_freq, &mut grad, multiply));

    if multiply {
        // gate scales the raw input: d g_k += d x'_k * x_k
        for r in 0..batch {
            let x = &cache.x[r * N_FEATURES..(r + 1) * N_FEATURES];
            let dg = &mut d_gate[r * N_FEATURES..(r + 1) * N_FEATURES];
            if let Some(d) = &d_xf {
                dg[0] += d[r] * x[0];
            }
            if let Some(d) = &d_xo {
                let w = N_FEATURES - 1;
                for k in 0..w {
                    dg[k + 1] += d[r * w + k] * x[k + 1];
                }
            }
        }
    }
    stack_backward(vals, &st[0], &cache.gating, d_gate, &mut grad, false);
    Ok(grad)
}

/// Hubcor loss of a cached forward pass and its gradient w.r.t. the parameters.
pub fn backward(
    p: &ModelParams,
    cache: &ForwardCache,
    targets: &[[f64; 3]],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (loss, d_out) = hubcor_loss(&cache.output, targets, loss_cfg)?;
    let grad = backward_from_output_grad(p, cache, &d_out)?;
    Ok((loss, grad))
}

/// Forward and backward on one batch.
pub fn loss_and_grad<R: Rng + ?Sized>(
    p: &ModelParams,
    xs: &[[f64; N_FEATURES]],
    ys: &[[f64; 3]],
    mode: Mode,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let cache = forward_batch(p, xs, mode, rng)?;
    backward(p, &cache, ys, loss_cfg)
}

/// Loss only, in evaluation mode.
pub fn eval_loss(
    p: &ModelParams,
    xs: &[[f64; N_FEATURES]],
    ys: &[[f64; 3]],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let pred = predict_batch(p, xs)?;
    Ok(hubcor_loss(&pred, ys, loss_cfg)?.0)
}

/// Evaluation-mode predictions in input order.
pub fn predict_batch(p: &ModelParams, xs: &[[f64; N_FEATURES]]) -> Result<Vec<[f64; 3]>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    Ok(forward_batch(p, xs, Mode::Eval, &mut unused)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_inputs(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 8]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| r.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn default_architecture_has_3871_parameters() {
        let arch = Architecture::default();
        // gating 108+104, other 192+48+400, freq 16+72, head 1584+96+1176+75
        assert_eq!(arch.param_count(), 212 + 640 + 88 + 2931);
        assert_eq!(arch.param_count(), 3871);
        let p = init_params(&arch, 0).unwrap();
        assert_eq!(p.len(), 3871);
        assert_eq!(p.layout().entries.iter().map(|e| e.len).sum::<usize>(), 3871);
    }

    #[test]
    fn layout_slices_tile_the_vector() {
        let layout = Layout::new(&Architecture::default());
        let mut next = 0;
        for e in &layout.entries {
            assert_eq!(e.offset, next, "{}", e.name);
            next += e.len;
        }
        assert_eq!(next, layout.total());
    }

    #[test]
    fn init_rules() {
        let arch = Architecture::default();
        let a = init_params(&arch, 11).unwrap();
        let b = init_params(&arch, 11).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, init_params(&arch, 12).unwrap().values);
        for e in &a.layout().entries {
            let s = &a.values[e.offset..e.offset + e.len];
            if e.name.ends_with("bias") || e.name.ends_with("shift") {
                assert!(s.iter().all(|&v| v == 0.0), "{}", e.name);
            } else if e.name.ends_with("gain") {
                assert!(s.iter().all(|&v| v == 1.0));
            }
        }
        let w = a.layout().entry("head.0.weight").unwrap();
        let bound = (6.0f64 / 80.0).sqrt();
        assert!(a.values[w.offset..w.offset + w.len].iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn outputs_lie_on_simplex() {
        let arch = Architecture::default();
        let mut r = rng(1);
        for seed in 0..5 {
            let p = init_params(&arch, seed).unwrap();
            let xs = random_inputs(&mut r, 20);
            for y in predict_batch(&p, &xs).unwrap() {
                assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let p = ModelParams::zeros(Architecture::default()).unwrap();
        let y = predict_batch(&p, &[[0.3; 8]]).unwrap()[0];
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_ignores_rng() {
        let p = init_params(&Architecture::default(), 3).unwrap();
        let x = [0.1, -0.4, 0.9, 1.2, -1.1, 0.0, 0.5, -0.3];
        let (a, _) = forward(&p, &x, Mode::Eval, &mut rng(1)).unwrap();
        let (b, _) = forward(&p, &x, Mode::Eval, &mut rng(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_masks_and_eval_masks() {
        let p = init_params(&Architecture::default(), 3).unwrap();
        let xs = random_inputs(&mut rng(2), 16);
        let c = forward_batch(&p, &xs, Mode::Eval, &mut rng(0)).unwrap();
        let (mo, mh) = c.dropout_masks();
        assert!(mo.unwrap().iter().chain(mh.unwrap()).all(|&m| m == 1.0));
        let c = forward_batch(&p, &xs, Mode::Train, &mut rng(0)).unwrap();
        let (_, mh) = c.dropout_masks();
        assert!(mh.unwrap().iter().any(|&m| m == 0.0));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = init_params(&Architecture::default(), 0).unwrap();
        let mut x = [0.0; 8];
        x[3] = f64::NAN;
        assert!(forward(&p, &x, Mode::Eval, &mut rng(0)).is_err());
    }

    #[test]
    fn predict_batch_matches_single_forward() {
        let p = init_params(&Architecture::default(), 5).unwrap();
        let xs = random_inputs(&mut rng(3), 7);
        let batch = predict_batch(&p, &xs).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            let (single, _) = forward(&p, x, Mode::Eval, &mut rng(0)).unwrap();
            assert_eq!(single.to_array(), *y);
        }
        assert!(predict_batch(&p, &[]).unwrap().is_empty());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn fd_check(arch: Architecture, mode: Mode, seed: u64) {
        let mut r = rng(seed);
        let p = init_params(&arch, seed).unwrap();
        let xs = random_inputs(&mut r, 8);
        let ys: Vec<[f64; 3]> = (0..8)
            .map(|_| {
                let a: [f64; 3] = std::array::from_fn(|_| r.random::<f64>());
                let s: f64 = a.iter().sum();
                a.map(|v| v / s)
            })
            .collect();
        let cfg = LossConfig::default();
        let mask_seed = r.random::<u64>();
        let (_, g) = loss_and_grad(&p, &xs, &ys, mode, &cfg, &mut rng(mask_seed)).unwrap();
        let h = 1e-5;
        for _ in 0..50 {
            let i = r.random_range(0..p.len());
            let mut vp = p.values.clone();
            vp[i] += h;
            let mut vm = p.values.clone();
            vm[i] -= h;
            let lp = loss_and_grad(&p.with_values(vp).unwrap(), &xs, &ys, mode, &cfg, &mut rng(mask_seed)).unwrap().0;
            let lm = loss_and_grad(&p.with_values(vm).unwrap(), &xs, &ys, mode, &cfg, &mut rng(mask_seed)).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(fd, g[i]) < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(Architecture::default(), Mode::Eval, 1);
        fd_check(Architecture::default(), Mode::Train, 2);
    }

    #[test]
    fn gradients_match_for_variants() {
        let mult = Architecture {
            gate_mode: GateMode::Multiply,
            ..Architecture::default()
        };
        fd_check(mult, Mode::Train, 3);
        fd_check(Architecture::default().with_ablation(Ablation::NoFreqBranch), Mode::Eval, 4);
        fd_check(Architecture::default().with_ablation(Ablation::NoOtherBranch), Mode::Eval, 5);
    }

    #[test]
    fn removed_branch_gets_no_gradient() {
        let arch = Architecture::default().with_ablation(Ablation::NoFreqBranch);
        let p = init_params(&arch, 0).unwrap();
        let xs = random_inputs(&mut rng(4), 8);
        let ys = vec![[0.2, 0.3, 0.5]; 8];
        let mut cfg = LossConfig::default();
        cfg.corr_weight = 0.0;
        let (_, g) = loss_and_grad(&p, &xs, &ys, Mode::Eval, &cfg, &mut rng(0)).unwrap();
        for e in p.layout().entries.iter().filter(|e| e.name.starts_with("freq.")) {
            assert!(g[e.offset..e.offset + e.len].iter().all(|&v| v == 0.0));
        }
        let c = forward_batch(&p, &xs, Mode::Eval, &mut rng(0)).unwrap();
        for row in c.concat().chunks(32) {
            assert!(row[24..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dropped_unit_has_zero_outgoing_gradient() {
        let arch = Architecture {
            dropout_rate: 0.5,
            ..Architecture::default()
        };
        let p = init_params(&arch, 8).unwrap();
        let x = [[0.3, -0.2, 0.8, 1.0, -0.5, 0.2, 0.1, -1.0]];
        let y = [[0.1, 0.7, 0.2]];
        let cache = forward_batch(&p, &x, Mode::Train, &mut rng(6)).unwrap();
        let (_, head_mask) = cache.dropout_masks();
        let mask = head_mask.unwrap().to_vec();
        let dead: Vec<usize> = (0..mask.len()).filter(|&k| mask[k] == 0.0).collect();
        assert!(!dead.is_empty());
        let (_, g) = backward(&p, &cache, &y, &LossConfig::mse_only()).unwrap();
        let w = p.layout().entry("head.1.weight").unwrap();
        for j in 0..24 {
            for &k in &dead {
                assert_eq!(g[w.offset + j * 48 + k], 0.0);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let p = init_params(&Architecture::default(), 2).unwrap();
        let xs = random_inputs(&mut rng(9), 8);
        let ys = predict_batch(&p, &xs).unwrap();
        let (loss, g) = loss_and_grad(&p, &xs, &ys, Mode::Eval, &LossConfig::mse_only(), &mut rng(0)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-9);
    }

    #[test]
    fn cache_from_other_architecture_is_rejected() {
        let p = init_params(&Architecture::default(), 0).unwrap();
        let q = init_params(&Architecture::default().with_ablation(Ablation::NoFreqBranch), 0).unwrap();
        let xs = random_inputs(&mut rng(1), 4);
        let cache = forward_batch(&q, &xs, Mode::Eval, &mut rng(0)).unwrap();
        assert!(backward(&p, &cache, &vec![[0.3, 0.3, 0.4]; 4], &LossConfig::default()).is_err());
    }

    #[test]
    fn layer_norm_ignores_constant_shift() {
        let mut r = rng(10);
        let a: Vec<f64> = (0..24).map(|_| r.random_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = a.iter().map(|v| v + 7.25).collect();
        let g = vec![1.0; 24];
        let s = vec![0.0; 24];
        let (y0, _, _) = layer_norm(&a, 24, &g, &s);
        let (y1, _, _) = layer_norm(&shifted, 24, &g, &s);
        for (u, v) in y0.iter().zip(&y1) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        let mut a = Architecture::default();
        a.head[0] = 31;
        assert!(a.validate().is_err());
        let mut a = Architecture::default();
        a.gating = vec![8, 12, 6];
        a.head[0] = 30;
        assert!(a.validate().is_ok());
        a.gate_mode = GateMode::Multiply;
        assert!(a.validate().is_err());
        assert!(ModelParams::from_values(Architecture::default(), vec![0.0; 10]).is_err());
    }
}
