//! The depth-guided dynamic mask head: three 1x1 layers plus a depth layer whose
//! sigmoid output scales the mask logit.
//!
//! ```text
//! F1     = relu(M2(relu(M1(F0))))
//! Pdepth = sigmoid(Md(F1))
//! Pmask  = sigmoid(Mm(F1) * Pdepth)
//! ```
//!
//! Because `Pdepth` lies in (0,1) it can shrink a mask logit but never flip its sign.
//! All accumulation is channel-major over contiguous pixel planes, so results do not
//! depend on how instances are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureStack, INPUT_CHANNELS};
use crate::imagegrid::Raster;

pub const HIDDEN: usize = 8;

/// Offsets into the flat parameter vector.
pub mod layout {
    use super::{HIDDEN, INPUT_CHANNELS};

    pub const W1: usize = 0;
    pub const B1: usize = W1 + HIDDEN * INPUT_CHANNELS;
    pub const W2: usize = B1 + HIDDEN;
    pub const B2: usize = W2 + HIDDEN * HIDDEN;
    pub const WD: usize = B2 + HIDDEN;
    pub const BD: usize = WD + HIDDEN;
    pub const WM: usize = BD + 1;
    pub const BM: usize = WM + HIDDEN;
    pub const LEN: usize = BM + 1;
}

pub const PARAM_COUNT: usize = layout::LEN;

/// Flat per-instance head parameters, row-major weights `[out][in]` for each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams(Vec<f64>);

impl HeadParams {
    pub fn zeros() -> Self {
        HeadParams(vec![0.0; PARAM_COUNT])
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        if v.len() != PARAM_COUNT {
            return Err(Error::Shape(format!(
                "head parameters need {PARAM_COUNT} values, got {}",
                v.len()
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("head parameters must be finite".into()));
        }
        Ok(HeadParams(v))
    }

    /// Uniform weights in [-scale, scale], zero biases.
    pub fn init(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; PARAM_COUNT];
        let weights = [
            layout::W1..layout::B1,
            layout::W2..layout::B2,
            layout::WD..layout::BD,
            layout::WM..layout::BM,
        ];
        for range in weights {
            for x in &mut v[range] {
                *x = rng.gen_range(-scale..=scale);
            }
        }
        HeadParams(v)
    }

    /// Random init with a box-shaped prior wired into the first units:
    /// hidden-1 units 0..4 carry relu(+-dx), relu(+-dy); hidden-2 unit 0 sums them
    /// as `|dx|/half_w + |dy|/half_h`; the mask logit starts at `gain * (1 - that)`.
    /// `half_w`/`half_h` are in relative-coordinate units. `gain == 0` gives [`HeadParams::init`].
    pub fn init_box_prior(seed: u64, scale: f64, half_w: f64, half_h: f64, gain: f64) -> Self {
        let mut p = Self::init(seed, scale);
        if gain == 0.0 {
            return p;
        }
        let (dx, dy) = (INPUT_CHANNELS - 2, INPUT_CHANNELS - 1);
        let v = &mut p.0;
        for (unit, (ch, sign)) in [(dx, 1.0), (dx, -1.0), (dy, 1.0), (dy, -1.0)].into_iter().enumerate() {
            let row = layout::W1 + unit * INPUT_CHANNELS;
            v[row..row + INPUT_CHANNELS].fill(0.0);
            v[row + ch] = sign;
        }
        let hw = half_w.max(1e-3);
        let hh = half_h.max(1e-3);
        v[layout::W2..layout::W2 + HIDDEN].fill(0.0);
        v[layout::W2..layout::W2 + 4].copy_from_slice(&[1.0 / hw, 1.0 / hw, 1.0 / hh, 1.0 / hh]);
        v[layout::WM] = -gain;
        v[layout::BM] = gain;
        p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intermediate activations kept for the backward pass (channel-major planes).
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    mask_logit: Vec<f64>,
    params: HeadParams,
    depth_gate: bool,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub mask_prob: Raster,
    pub depth_pred: Raster,
    pub cache: Option<HeadCache>,
}

impl HeadOutput {
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

/// Head variant. With `depth_gate` off the mask logit is used as is (plain CondInst head).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskHead {
    pub depth_gate: bool,
}

impl Default for MaskHead {
    fn default() -> Self {
        MaskHead { depth_gate: true }
    }
}

/// `out[o] = bias[o] + sum_c weights[o][c] * input[c]` over whole pixel planes.
fn dense_planes(input: &[f64], in_ch: usize, weights: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let out_ch = bias.len();
    let mut out = vec![0.0; out_ch * n];
    for o in 0..out_ch {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for c in 0..in_ch {
            let w = weights[o * in_ch + c];
            let src = &input[c * n..(c + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl MaskHead {
    pub fn forward(&self, f0: &FeatureStack, params: &HeadParams) -> Result<HeadOutput> {
        if f0.channels() != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "mask head expects {INPUT_CHANNELS} input channels, got {}",
                f0.channels()
            )));
        }
        if params.len() != PARAM_COUNT {
            return Err(Error::Shape(format!("parameter vector has length {}", params.len())));
        }
        let (h, w) = (f0.height(), f0.width());
        let n = h * w;
        let p = params.as_slice();
        let input = f0.planar();

        let mut hidden1 = dense_planes(&input, INPUT_CHANNELS, &p[layout::W1..layout::B1], &p[layout::B1..layout::W2], n);
        relu_in_place(&mut hidden1);
        let mut hidden2 = dense_planes(&hidden1, HIDDEN, &p[layout::W2..layout::B2], &p[layout::B2..layout::WD], n);
        relu_in_place(&mut hidden2);
        let depth_logit = dense_planes(&hidden2, HIDDEN, &p[layout::WD..layout::BD], &p[layout::BD..layout::WM], n);
        let mask_logit = dense_planes(&hidden2, HIDDEN, &p[layout::WM..layout::BM], &p[layout::BM..layout::LEN], n);

        let depth: Vec<f64> = depth_logit.iter().map(|&z| sigmoid(z)).collect();
        let mask: Vec<f64> = if self.depth_gate {
            mask_logit.iter().zip(&depth).map(|(&z, &d)| sigmoid(z * d)).collect()
        } else {
            mask_logit.iter().map(|&z| sigmoid(z)).collect()
        };

        Ok(HeadOutput {
            mask_prob: Raster::new(h, w, 1, mask)?,
            depth_pred: Raster::new(h, w, 1, depth)?,
            cache: Some(HeadCache {
                input,
                hidden1,
                hidden2,
                mask_logit,
                params: params.clone(),
                depth_gate: self.depth_gate,
            }),
        })
    }
}

pub fn forward(f0: &FeatureStack, params: &HeadParams) -> Result<HeadOutput> {
    MaskHead::default().forward(f0, params)
}

/// Gradient of a scalar loss with respect to the head parameters, given the loss
/// gradients with respect to `Pmask` and `Pdepth`.
pub fn backward(output: &HeadOutput, d_mask: &Raster, d_depth: &Raster) -> Result<Vec<f64>> {
    let cache = output.cache.as_ref().ok_or(Error::MissingCache)?;
    output.mask_prob.ensure_same_size(d_mask, "mask gradient")?;
    output.mask_prob.ensure_same_size(d_depth, "depth gradient")?;
    let n = output.mask_prob.pixel_count();
    let p = cache.params.as_slice();
    let mask = output.mask_prob.data();
    let depth = output.depth_pred.data();
    let mut grad = vec![0.0; PARAM_COUNT];

    let mut d_mlogit = vec![0.0; n];
    let mut d_dlogit = vec![0.0; n];
    for i in 0..n {
        let du = d_mask.data()[i] * mask[i] * (1.0 - mask[i]);
        let (dzm, dd) = if cache.depth_gate {
            (du * depth[i], d_depth.data()[i] + du * cache.mask_logit[i])
        } else {
            (du, d_depth.data()[i])
        };
        d_mlogit[i] = dzm;
        d_dlogit[i] = dd * depth[i] * (1.0 - depth[i]);
    }

    // Output layers.
    grad[layout::BM] = d_mlogit.iter().sum();
    grad[layout::BD] = d_dlogit.iter().sum();
    for c in 0..HIDDEN {
        let plane = &cache.hidden2[c * n..(c + 1) * n];
        grad[layout::WM + c] = plane.iter().zip(&d_mlogit).map(|(a, b)| a * b).sum();
        grad[layout::WD + c] = plane.iter().zip(&d_dlogit).map(|(a, b)| a * b).sum();
    }

    // Back into the second hidden layer (through its relu).
    let mut d_h2 = vec![0.0; HIDDEN * n];
    for c in 0..HIDDEN {
        let (wm, wd) = (p[layout::WM + c], p[layout::WD + c]);
        let act = &cache.hidden2[c * n..(c + 1) * n];
        let dst = &mut d_h2[c * n..(c + 1) * n];
        for i in 0..n {
            dst[i] = if act[i] > 0.0 {
                wm * d_mlogit[i] + wd * d_dlogit[i]
            } else {
                0.0
            };
        }
    }
    layer_grads(&cache.hidden1, HIDDEN, &d_h2, HIDDEN, n, &mut grad[layout::W2..layout::WD]);

    let mut d_h1 = vec![0.0; HIDDEN * n];
    for o in 0..HIDDEN {
        let src = &d_h2[o * n..(o + 1) * n];
        for c in 0..HIDDEN {
            let w = p[layout::W2 + o * HIDDEN + c];
            let dst = &mut d_h1[c * n..(c + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    for (d, &a) in d_h1.iter_mut().zip(&cache.hidden1) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
    layer_grads(&cache.input, INPUT_CHANNELS, &d_h1, HIDDEN, n, &mut grad[layout::W1..layout::W2]);
    Ok(grad)
}

/// Smallest |pre-activation| over both hidden layers: how far the input sits from a ReLU kink.
pub fn relu_margin(f0: &FeatureStack, params: &HeadParams) -> f64 {
    let n = f0.height() * f0.width();
    let p = params.as_slice();
    let input = f0.planar();
    let z1 = dense_planes(&input, INPUT_CHANNELS, &p[layout::W1..layout::B1], &p[layout::B1..layout::W2], n);
    let mut h1 = z1.clone();
    relu_in_place(&mut h1);
    let z2 = dense_planes(&h1, HIDDEN, &p[layout::W2..layout::B2], &p[layout::B2..layout::WD], n);
    z1.iter().chain(&z2).fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

/// Weight and bias gradients of one dense layer: `out = [W (out x in) | b (out)]`.
fn layer_grads(input: &[f64], in_ch: usize, d_out: &[f64], out_ch: usize, n: usize, out: &mut [f64]) {
    for o in 0..out_ch {
        let g = &d_out[o * n..(o + 1) * n];
        for c in 0..in_ch {
            let x = &input[c * n..(c + 1) * n];
            out[o * in_ch + c] = x.iter().zip(g).map(|(a, b)| a * b).sum();
        }
        out[out_ch * in_ch + o] = g.iter().sum();
    }
}
