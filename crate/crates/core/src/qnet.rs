//! Two-layer convolutional Q-network with one two-action head per
//! decision axis, trained by hand-written backpropagation.
//!
//! ```text
//! 64x64x1 --conv 16x16 (same) + ReLU + maxpool 4--> 16x16x4
//!         --conv 16x16 (same) + ReLU + maxpool 4--> 4x4x4 = 64 features
//!         --fc 64->2--> (Q_track, Q_reinit)
//!         --fc 64->2--> (Q_update, Q_ignore)
//! ```
//!
//! Even kernels use 7 cells of padding before and 8 after. Parameters are
//! `f32`; activations and gradients are accumulated in `f64`.
//!
//! The input plane is rescaled so its peak is 1 before the first
//! convolution. Featurized heatmaps carry unit total mass spread over
//! hundreds of cells, so without rescaling every activation would be tiny.

use crate::belief::{Action, Appearance, Motion};
use crate::heatmap::{normalize, resample_area, Heatmap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const INPUT: usize = 64;
pub const KERNEL: usize = 16;
pub const PAD: usize = 7;
pub const POOL: usize = 4;
pub const C1: usize = 4;
pub const C2: usize = 4;
pub const H1: usize = INPUT / POOL;
pub const H2: usize = H1 / POOL;
pub const FEATURES: usize = C2 * H2 * H2;
pub const ACTIONS: usize = 2;

pub const N_TENSORS: usize = 8;

/// Checkpoint tensor order and shapes.
pub const TENSOR_NAMES: [&str; N_TENSORS] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "motion.weight",
    "motion.bias",
    "appearance.weight",
    "appearance.bias",
];

pub fn tensor_shape(k: usize) -> &'static [usize] {
    const SHAPES: [&[usize]; N_TENSORS] = [
        &[C1, 1, KERNEL, KERNEL],
        &[C1],
        &[C2, C1, KERNEL, KERNEL],
        &[C2],
        &[ACTIONS, FEATURES],
        &[ACTIONS],
        &[ACTIONS, FEATURES],
        &[ACTIONS],
    ];
    SHAPES[k]
}

fn tensor_len(k: usize) -> usize {
    tensor_shape(k).iter().product()
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const WM: usize = 4;
const BM: usize = 5;
const WA: usize = 6;
const BA: usize = 7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QNetError {
    #[error("unsupported checkpoint (magic {magic:?}, version {version})")]
    Version { magic: [u8; 4], version: u32 },
    #[error("checkpoint truncated or oversized: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-head action values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QValues {
    /// (TRACK, REINIT)
    pub motion: [f64; ACTIONS],
    /// (UPDATE, IGNORE)
    pub appearance: [f64; ACTIONS],
}

impl QValues {
    pub fn head(&self, h: Head) -> &[f64; ACTIONS] {
        match h {
            Head::Motion => &self.motion,
            Head::Appearance => &self.appearance,
        }
    }

    pub fn head_mut(&mut self, h: Head) -> &mut [f64; ACTIONS] {
        match h {
            Head::Motion => &mut self.motion,
            Head::Appearance => &mut self.appearance,
        }
    }

    pub fn best_motion(&self) -> Motion {
        Motion::from_index(argmax2(&self.motion))
    }

    pub fn best_appearance(&self) -> Appearance {
        Appearance::from_index(argmax2(&self.appearance))
    }

    /// Per-head argmax (first index on ties).
    pub fn greedy(&self) -> Action {
        Action::new(self.best_motion(), self.best_appearance())
    }

    /// Total value of a joint action: the sum of its two heads.
    pub fn joint(&self, a: Action) -> f64 {
        self.motion[a.motion.index()] + self.appearance[a.appearance.index()]
    }

    /// Argmax of the summed value over all four joint actions.
    pub fn joint_greedy(&self) -> Action {
        let mut best = Action::ALL[0];
        for a in Action::ALL {
            if self.joint(a) > self.joint(best) {
                best = a;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.motion.iter().chain(&self.appearance).all(|v| v.is_finite())
    }
}

pub fn argmax2(v: &[f64; ACTIONS]) -> usize {
    usize::from(v[1] > v[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Motion,
    Appearance,
}

impl Head {
    pub const BOTH: [Head; 2] = [Head::Motion, Head::Appearance];
}

/// The network input for a heatmap: the normalized map resampled to
/// 64x64 by area weighting. Sums to 1.
pub fn featurize(h: &Heatmap) -> Vec<f32> {
    let n = normalize(h);
    resample_area(n.scores(), n.width(), n.height(), INPUT, INPUT)
}

/// Gradients shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: [Vec<f64>; N_TENSORS],
}

impl Grads {
    pub fn zeros() -> Self {
        Self {
            tensors: std::array::from_fn(|k| vec![0.0; tensor_len(k)]),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&x| x == 0.0)
    }
}

/// Intermediates of one forward pass, consumed by [`QNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    arg1: Vec<usize>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    arg2: Vec<usize>,
    features: Vec<f64>,
}

impl Trace {
    /// (conv1 output, pool1 output, conv2 output, pool2 output) shapes as
    /// (height, width, channels).
    pub fn shapes(&self) -> [(usize, usize, usize); 4] {
        [
            (INPUT, INPUT, self.pre1.len() / (INPUT * INPUT)),
            (H1, H1, self.act1.len() / (H1 * H1)),
            (H1, H1, self.pre2.len() / (H1 * H1)),
            (H2, H2, self.features.len() / (H2 * H2)),
        ]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    params: [Vec<f32>; N_TENSORS],
    momentum: [Vec<f32>; N_TENSORS],
}

impl QNet {
    pub fn zeros() -> Self {
        Self {
            params: std::array::from_fn(|k| vec![0.0; tensor_len(k)]),
            momentum: std::array::from_fn(|k| vec![0.0; tensor_len(k)]),
        }
    }

    /// Glorot-uniform weights, zero biases and momentum.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros();
        let area = KERNEL * KERNEL;
        let fans = [
            (W1, area, C1 * area),
            (W2, C1 * area, C2 * area),
            (WM, FEATURES, ACTIONS),
            (WA, FEATURES, ACTIONS),
        ];
        for (k, fan_in, fan_out) in fans {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            for w in net.params[k].iter_mut() {
                *w = rng.random_range(-limit..=limit);
            }
        }
        net
    }

    pub fn param(&self, k: usize) -> &[f32] {
        &self.params[k]
    }

    pub fn param_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.params[k]
    }

    pub fn momentum(&self, k: usize) -> &[f32] {
        &self.momentum[k]
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|w| w.is_finite())
    }

    /// Same weights with zeroed momentum slots.
    pub fn with_momentum_cleared(mut self) -> Self {
        for m in &mut self.momentum {
            m.fill(0.0);
        }
        self
    }

    pub fn forward(&self, plane: &[f32]) -> QValues {
        self.forward_trace(plane).0
    }

    pub fn forward_trace(&self, plane: &[f32]) -> (QValues, Trace) {
        assert_eq!(plane.len(), INPUT * INPUT, "input must be 64x64");
        let peak = plane.iter().copied().fold(0f32, f32::max) as f64;
        let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        let input: Vec<f64> = plane.iter().map(|&v| v as f64 * scale).collect();

        let pre1 = conv_same(&input, 1, INPUT, &self.params[W1], &self.params[B1], C1);
        let (act1, arg1) = relu_pool(&pre1, C1, INPUT);
        let pre2 = conv_same(&act1, C1, H1, &self.params[W2], &self.params[B2], C2);
        let (features, arg2) = relu_pool(&pre2, C2, H1);

        let head = |w: &[f32], b: &[f32]| -> [f64; ACTIONS] {
            std::array::from_fn(|a| {
                b[a] as f64
                    + w[a * FEATURES..(a + 1) * FEATURES]
                        .iter()
                        .zip(&features)
                        .map(|(&w, f)| w as f64 * f)
                        .sum::<f64>()
            })
        };
        let q = QValues {
            motion: head(&self.params[WM], &self.params[BM]),
            appearance: head(&self.params[WA], &self.params[BA]),
        };
        (
            q,
            Trace {
                input,
                pre1,
                arg1,
                act1,
                pre2,
                arg2,
                features,
            },
        )
    }

    /// Exact parameter gradients of a scalar loss given dLoss/dQ.
    pub fn backward(&self, trace: &Trace, dq: &QValues) -> Grads {
        let mut g = Grads::zeros();
        let mut dfeat = vec![0f64; FEATURES];
        for (wk, bk, d) in [(WM, BM, &dq.motion), (WA, BA, &dq.appearance)] {
            for a in 0..ACTIONS {
                if d[a] == 0.0 {
                    continue;
                }
                g.tensors[bk][a] += d[a];
                let row = &self.params[wk][a * FEATURES..(a + 1) * FEATURES];
                for f in 0..FEATURES {
                    g.tensors[wk][a * FEATURES + f] += d[a] * trace.features[f];
                    dfeat[f] += d[a] * row[f] as f64;
                }
            }
        }

        let dpre2 = unpool(&dfeat, &trace.arg2, &trace.pre2);
        let (w_part, b_part) = g.tensors.split_at_mut(B2);
        let dact1 = conv_same_backward(
            &trace.act1,
            C1,
            H1,
            &self.params[W2],
            C2,
            &dpre2,
            &mut w_part[W2],
            &mut b_part[0],
            true,
        );
        let dpre1 = unpool(&dact1, &trace.arg1, &trace.pre1);
        let (w_part, b_part) = g.tensors.split_at_mut(B1);
        conv_same_backward(
            &trace.input,
            1,
            INPUT,
            &self.params[W1],
            C1,
            &dpre1,
            &mut w_part[W1],
            &mut b_part[0],
            false,
        );
        g
    }

    /// SGD with momentum and weight decay:
    /// `v <- momentum*v + (g + weight_decay*w)`, `w <- w - lr*v`.
    pub fn sgd_step(
        &mut self,
        grads: &Grads,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<(), QNetError> {
        for k in 0..N_TENSORS {
            if grads.tensors[k].len() != self.params[k].len() {
                return Err(QNetError::ShapeMismatch(format!(
                    "{}: gradient has {} entries, parameter has {}",
                    TENSOR_NAMES[k],
                    grads.tensors[k].len(),
                    self.params[k].len()
                )));
            }
        }
        for k in 0..N_TENSORS {
            let (w, v) = (&mut self.params[k], &mut self.momentum[k]);
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(&grads.tensors[k]) {
                let vn = momentum * *v as f64 + (g + weight_decay * *w as f64);
                *v = vn as f32;
                *w = (*w as f64 - lr * vn) as f32;
            }
        }
        Ok(())
    }

    /// `PTRK`, version 1 (u32 LE), then the parameter tensors followed by
    /// the momentum tensors in [`TENSOR_NAMES`] order, each as rank (u32),
    /// dims (u32 each) and f32 LE data.
    pub fn save_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.n_params() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for tensors in [&self.params, &self.momentum] {
            for (k, t) in tensors.iter().enumerate() {
                let shape = tensor_shape(k);
                out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<Self, QNetError> {
        let expected = checkpoint_len();
        if bytes.len() < 8 {
            return Err(QNetError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if &magic != MAGIC || version != VERSION {
            return Err(QNetError::Version { magic, version });
        }
        if bytes.len() != expected {
            return Err(QNetError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut pos = 8;
        let read_u32 = |pos: &mut usize| {
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            v
        };
        let mut net = Self::zeros();
        for slot in 0..2 {
            for k in 0..N_TENSORS {
                let shape = tensor_shape(k);
                let rank = read_u32(&mut pos) as usize;
                if rank != shape.len() {
                    return Err(QNetError::ShapeMismatch(format!(
                        "{}: rank {rank}, expected {}",
                        TENSOR_NAMES[k],
                        shape.len()
                    )));
                }
                for &d in shape {
                    let got = read_u32(&mut pos) as usize;
                    if got != d {
                        return Err(QNetError::ShapeMismatch(format!(
                            "{}: dimension {got}, expected {d}",
                            TENSOR_NAMES[k]
                        )));
                    }
                }
                let t = if slot == 0 {
                    &mut net.params[k]
                } else {
                    &mut net.momentum[k]
                };
                for v in t.iter_mut() {
                    *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                    pos += 4;
                }
            }
        }
        Ok(net)
    }
}

const MAGIC: &[u8; 4] = b"PTRK";
const VERSION: u32 = 1;

/// Byte length of a version-1 checkpoint.
pub fn checkpoint_len() -> usize {
    8 + 2
        * (0..N_TENSORS)
            .map(|k| 4 * (1 + tensor_shape(k).len()) + 4 * tensor_len(k))
            .sum::<usize>()
}

/// Same-padded 16x16 convolution of a `cin x n x n` input, scattering
/// only nonzero inputs.
fn conv_same(input: &[f64], cin: usize, n: usize, w: &[f32], b: &[f32], cout: usize) -> Vec<f64> {
    let plane = n * n;
    let mut out = vec![0f64; cout * plane];
    for o in 0..cout {
        out[o * plane..(o + 1) * plane].fill(b[o] as f64);
    }
    // kernel rows reversed along x so each input spreads over a contiguous
    // run of outputs
    let flipped: Vec<f64> = w
        .chunks(KERNEL)
        .flat_map(|row| row.iter().rev().map(|&v| v as f64))
        .collect();
    for c in 0..cin {
        for iy in 0..n {
            for ix in 0..n {
                let v = input[c * plane + iy * n + ix];
                if v == 0.0 {
                    continue;
                }
                // output y = iy + PAD - ky must lie in [0, n)
                let ky_lo = (iy + PAD + 1).saturating_sub(n);
                let ky_hi = (iy + PAD).min(KERNEL - 1);
                // output x = ix + PAD - kx; flipped index m = KERNEL - 1 - kx
                let x_lo = (ix + PAD).saturating_sub(KERNEL - 1);
                let x_hi = (ix + PAD).min(n - 1);
                let m_lo = x_lo + KERNEL - 1 - ix - PAD;
                let len = x_hi + 1 - x_lo;
                for o in 0..cout {
                    let wk = &flipped[(o * cin + c) * KERNEL * KERNEL..(o * cin + c + 1) * KERNEL * KERNEL];
                    let out_o = &mut out[o * plane..(o + 1) * plane];
                    for ky in ky_lo..=ky_hi {
                        let y = iy + PAD - ky;
                        let wrow = &wk[ky * KERNEL + m_lo..ky * KERNEL + m_lo + len];
                        let orow = &mut out_o[y * n + x_lo..y * n + x_lo + len];
                        for (o, w) in orow.iter_mut().zip(wrow) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a [`conv_same`] layer. Accumulates into `dw`/`db` and
/// returns the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv_same_backward(
    input: &[f64],
    cin: usize,
    n: usize,
    w: &[f32],
    cout: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_input: bool,
) -> Vec<f64> {
    let plane = n * n;
    let mut din = if want_input {
        vec![0f64; cin * plane]
    } else {
        Vec::new()
    };
    for o in 0..cout {
        for y in 0..n {
            for x in 0..n {
                let g = dout[o * plane + y * n + x];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                // input iy = y + ky - PAD must lie in [0, n)
                let ky_lo = PAD.saturating_sub(y);
                let ky_hi = (n + PAD - 1 - y).min(KERNEL - 1);
                let kx_lo = PAD.saturating_sub(x);
                let kx_hi = (n + PAD - 1 - x).min(KERNEL - 1);
                for c in 0..cin {
                    let base = (o * cin + c) * KERNEL * KERNEL;
                    let inp = &input[c * plane..(c + 1) * plane];
                    for ky in ky_lo..=ky_hi {
                        let iy = y + ky - PAD;
                        for kx in kx_lo..=kx_hi {
                            let ix = x + kx - PAD;
                            dw[base + ky * KERNEL + kx] += g * inp[iy * n + ix];
                            if want_input {
                                din[c * plane + iy * n + ix] += g * w[base + ky * KERNEL + kx] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// ReLU followed by non-overlapping 4x4 max pooling; ties go to the first
/// cell in row-major window order. Returns pooled values and the flat
/// index of each window's winner.
fn relu_pool(pre: &[f64], channels: usize, n: usize) -> (Vec<f64>, Vec<usize>) {
    let m = n / POOL;
    let mut out = vec![0f64; channels * m * m];
    let mut arg = vec![0usize; channels * m * m];
    for c in 0..channels {
        for py in 0..m {
            for px in 0..m {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let i = c * n * n + (py * POOL + dy) * n + px * POOL + dx;
                        let v = pre[i].max(0.0);
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                out[c * m * m + py * m + px] = best;
                arg[c * m * m + py * m + px] = best_i;
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to each window's winner, through ReLU.
fn unpool(dpooled: &[f64], arg: &[usize], pre: &[f64]) -> Vec<f64> {
    let mut d = vec![0f64; pre.len()];
    for (g, &i) in dpooled.iter().zip(arg) {
        if *g != 0.0 && pre[i] > 0.0 {
            d[i] += g;
        }
    }
    d
}
