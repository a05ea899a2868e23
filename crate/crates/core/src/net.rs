//! The ratio network `r_theta(z) = max(softplus(f_theta(z)), eps)`.
//!
//! `f_theta` is a fully connected network with softplus hidden activations
//! and a linear output. Parameters live in one flat vector so that Adam,
//! finite-difference checks and checkpoints all work on the same buffer.
//! Layer `l` stores its weight matrix row-major as `(fan_in, fan_out)`
//! followed by its bias.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Stream;

pub const CHECKPOINT_VERSION: u32 = 1;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Softplus and its derivative from a single exponential.
#[inline]
fn softplus_and_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sg = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sg)
}

// Branch-free softplus used on hidden layers. The scalar libm calls dominate
// the training step otherwise; written as straight-line arithmetic so the
// row loop vectorizes.

const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// `exp(-a)` for `a >= 0`, flushed to zero past the normal range.
#[inline(always)]
fn exp_neg(a: f64) -> f64 {
    let ac = a.min(708.0);
    let t = ac * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = t.to_bits() & 0x7ff;
    let kf = t - ROUND_MAGIC;
    let r = (kf * LN2_HI - ac) + kf * LN2_LO;
    // Taylor to degree 13 on |r| <= ln2/2: truncation below 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    p = fma(p, r, 1.0 / 479_001_600.0);
    p = fma(p, r, 1.0 / 39_916_800.0);
    p = fma(p, r, 1.0 / 3_628_800.0);
    p = fma(p, r, 1.0 / 362_880.0);
    p = fma(p, r, 1.0 / 40_320.0);
    p = fma(p, r, 1.0 / 5_040.0);
    p = fma(p, r, 1.0 / 720.0);
    p = fma(p, r, 1.0 / 120.0);
    p = fma(p, r, 1.0 / 24.0);
    p = fma(p, r, 1.0 / 6.0);
    p = fma(p, r, 0.5);
    p = fma(p, r, 1.0);
    p = fma(p, r, 1.0);
    let scale = f64::from_bits((1023 - k) << 52);
    if a > 708.0 {
        0.0
    } else {
        p * scale
    }
}

#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// `ln(1 + e)` for `e` in `[0, 1]`, given `u = 1 + e` and `inv_u = 1 / u`.
#[inline(always)]
fn ln_1p_unit(e: f64, u: f64, inv_u: f64) -> f64 {
    // rounding error of 1 + e, restored to first order
    let c = (e - (u - 1.0)) * inv_u;
    let big = u > std::f64::consts::SQRT_2;
    let m = if big { 0.5 * u } else { u };
    let add = if big { std::f64::consts::LN_2 } else { 0.0 };
    let s = (m - 1.0) / (m + 1.0);
    let z = s * s;
    // 2 atanh(s), |s| <= 3 - 2 sqrt 2
    let mut q = 1.0 / 23.0;
    q = fma(q, z, 1.0 / 21.0);
    q = fma(q, z, 1.0 / 19.0);
    q = fma(q, z, 1.0 / 17.0);
    q = fma(q, z, 1.0 / 15.0);
    q = fma(q, z, 1.0 / 13.0);
    q = fma(q, z, 1.0 / 11.0);
    q = fma(q, z, 1.0 / 9.0);
    q = fma(q, z, 1.0 / 7.0);
    q = fma(q, z, 1.0 / 5.0);
    q = fma(q, z, 1.0 / 3.0);
    q = fma(q, z, 1.0);
    fma(2.0 * s, q, add) + c
}

/// In place: `x <- softplus(x + bias)`, `slope <- sigmoid(x + bias)`, row by row.
fn bias_softplus_rows(z: &mut [f64], slope: &mut [f64], bias: &[f64]) {
    let w = bias.len();
    assert_eq!(z.len(), slope.len());
    for (zr, sr) in z.chunks_exact_mut(w).zip(slope.chunks_exact_mut(w)) {
        let (zr, sr) = (&mut zr[..w], &mut sr[..w]);
        for j in 0..w {
            let x = zr[j] + bias[j];
            let e = exp_neg(x.abs());
            let u = 1.0 + e;
            let inv_u = 1.0 / u;
            zr[j] = x.max(0.0) + ln_1p_unit(e, u, inv_u);
            sr[j] = if x >= 0.0 { 1.0 } else { e } * inv_u;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub layer_sizes: Vec<usize>,
    pub floor: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

fn spans(sizes: &[usize]) -> Vec<LayerSpan> {
    let mut off = 0;
    sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = LayerSpan {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            };
            off += fan_in * fan_out + fan_out;
            s
        })
        .collect()
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Rows per block of [`RatioModel::forward_blocked`].
pub const BLOCK_ROWS: usize = 1024;

/// Per-block forward caches.
#[derive(Debug, Clone)]
pub struct BlockedCache {
    blocks: Vec<ForwardCache>,
    pub ratio: Vec<f64>,
}

/// Cached activations of one forward pass, needed by [`RatioModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Inputs to every layer: `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Softplus slopes of each hidden layer.
    slopes: Vec<Array2<f64>>,
    /// `d r / d f` at the output, zero on the floored branch.
    out_slope: Array1<f64>,
    /// Ratio values.
    pub ratio: Array1<f64>,
}

impl RatioModel {
    /// Uniform fan-in initialization on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(layer_sizes: &[usize], floor: f64, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::EmptyLayers);
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidConfig("output width must be 1".into()));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidConfig(format!("floor must be positive, got {floor}")));
        }
        let mut stream = Stream::new(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for s in spans(layer_sizes) {
            let bound = (1.0 / s.fan_in as f64).sqrt();
            for _ in 0..(s.fan_in * s.fan_out + s.fan_out) {
                params.push(stream.uniform_in(-bound, bound));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            floor,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn weights(&self, s: &LayerSpan) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.fan_in, s.fan_out), &self.params[s.w..s.b]).unwrap()
    }

    fn bias(&self, s: &LayerSpan) -> &[f64] {
        &self.params[s.b..s.b + s.fan_out]
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> ForwardCache {
        let layers = spans(&self.layer_sizes);
        let last = layers.len() - 1;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut slopes = Vec::with_capacity(last);
        let mut act = batch.to_owned();
        for (l, s) in layers.iter().enumerate() {
            let mut z = act.dot(&self.weights(s));
            if !z.is_standard_layout() {
                z = z.as_standard_layout().into_owned();
            }
            let b = self.bias(s);
            inputs.push(act);
            if l < last {
                let mut slope = Array2::zeros(z.raw_dim());
                bias_softplus_rows(
                    z.as_slice_mut().expect("standard layout"),
                    slope.as_slice_mut().expect("standard layout"),
                    b,
                );
                slopes.push(slope);
            } else {
                for mut row in z.rows_mut() {
                    for (v, bj) in row.iter_mut().zip(b) {
                        *v += bj;
                    }
                }
            }
            act = z;
        }
        let f = act.column(0).to_owned();
        let floor = self.floor;
        let mut ratio = Array1::zeros(f.len());
        let mut out_slope = Array1::zeros(f.len());
        ndarray::Zip::from(&f)
            .and(&mut ratio)
            .and(&mut out_slope)
            .for_each(|&fi, r, g| {
                let (sp, sg) = softplus_and_slope(fi);
                if sp >= floor {
                    *r = sp;
                    *g = sg;
                } else {
                    *r = floor;
                    *g = 0.0;
                }
            });
        ForwardCache {
            inputs,
            slopes,
            out_slope,
            ratio,
        }
    }

    /// Gradient of `sum_i upstream_i * r(z_i)` given a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let n = cache.ratio.len();
        if upstream.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: upstream.len(),
            });
        }
        let layers = spans(&self.layer_sizes);
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = Array2::from_shape_fn((n, 1), |(i, _)| upstream[i] * cache.out_slope[i]);
        for (l, s) in layers.iter().enumerate().rev() {
            let gw = cache.inputs[l].t().dot(&delta);
            for (dst, v) in grad[s.w..s.b].iter_mut().zip(gw.iter()) {
                *dst = *v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (dst, v) in grad[s.b..s.b + s.fan_out].iter_mut().zip(gb.iter()) {
                *dst = *v;
            }
            if l > 0 {
                let mut prev = delta.dot(&self.weights(s).t());
                prev *= &cache.slopes[l - 1];
                delta = prev;
            }
        }
        Ok(grad)
    }

    /// Forward pass in row blocks of [`BLOCK_ROWS`], so each block's
    /// activations stay cache-resident. Blocks run on the rayon pool when the
    /// `parallel` feature is on; the result does not depend on it.
    pub fn forward_blocked(&self, batch: ArrayView2<'_, f64>) -> BlockedCache {
        let n = batch.nrows();
        let starts: Vec<usize> = (0..n).step_by(BLOCK_ROWS).collect();
        let blocks = par::map(&starts, |&s| self.forward(batch.slice(s![s..(s + BLOCK_ROWS).min(n), ..])));
        let mut ratio = Vec::with_capacity(n);
        for b in &blocks {
            ratio.extend(b.ratio.iter());
        }
        BlockedCache { blocks, ratio }
    }

    /// [`RatioModel::backward`] over a blocked cache; block gradients are
    /// summed in block order.
    pub fn backward_blocked(&self, cache: &BlockedCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != cache.ratio.len() {
            return Err(Error::LengthMismatch {
                expected: cache.ratio.len(),
                got: upstream.len(),
            });
        }
        let idx: Vec<usize> = (0..cache.blocks.len()).collect();
        let parts = par::map(&idx, |&i| {
            let s = i * BLOCK_ROWS;
            let b = &cache.blocks[i];
            self.backward(b, &upstream[s..s + b.ratio.len()])
        });
        let mut grad = vec![0.0; self.params.len()];
        for part in parts {
            for (g, v) in grad.iter_mut().zip(part?) {
                *g += v;
            }
        }
        Ok(grad)
    }

    /// Ratio values on a batch of rows.
    pub fn evaluate_rows(&self, batch: ArrayView2<'_, f64>) -> Vec<f64> {
        self.forward(batch).ratio.to_vec()
    }

    /// Ratio values on one-dimensional inputs.
    pub fn evaluate(&self, zs: &[f64]) -> Vec<f64> {
        self.evaluate_rows(column(zs).view())
    }

    /// Gradient of `sum_i upstream_i * r(z_i)` for one-dimensional inputs.
    pub fn gradient(&self, zs: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if zs.len() != upstream.len() {
            return Err(Error::LengthMismatch {
                expected: zs.len(),
                got: upstream.len(),
            });
        }
        let cache = self.forward(column(zs).view());
        self.backward(&cache, upstream)
    }

    /// Zero the final layer so that `f_theta == 0` everywhere.
    pub fn zero_output_layer(&mut self) {
        let s = *spans(&self.layer_sizes).last().unwrap();
        for p in &mut self.params[s.w..s.b + s.fan_out] {
            *p = 0.0;
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.model.params.len() != param_count(&ck.model.layer_sizes) {
            return Err(Error::Schema("parameter count does not match layer sizes".into()));
        }
        Ok(ck.model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: RatioModel,
}

/// One-column matrix view of a slice of scalars.
pub fn column(zs: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((zs.len(), 1), zs.to_vec()).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// One bias-corrected Adam step on `model` in place.
pub fn adam_step(model: &mut RatioModel, state: &mut AdamState, grad: &[f64]) -> Result<()> {
    let n = model.params.len();
    if grad.len() != n || state.first_moment.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i} = {}", grad[i])));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for i in 0..n {
        let g = grad[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let mhat = m / c1;
        let vhat = v / c2;
        model.params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps_hat);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Central finite differences of `sum_i u_i r(z_i)`.
    fn fd_gradient(model: &RatioModel, zs: &[f64], up: &[f64], h: f64) -> Vec<f64> {
        let obj = |m: &RatioModel| -> f64 { m.evaluate(zs).iter().zip(up).map(|(r, u)| r * u).sum() };
        (0..model.n_params())
            .map(|k| {
                let mut p = model.clone();
                p.params[k] += h;
                let fp = obj(&p);
                p.params[k] -= 2.0 * h;
                let fm = obj(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(a: &[f64], b: &[f64]) {
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale <= 1e-4, "coord {k}: analytic {x} fd {y}");
        }
    }

    #[test]
    fn fast_softplus_matches_libm() {
        let mut s = Stream::new(5);
        let mut xs: Vec<f64> = (0..20_000).map(|_| 30.0 * s.normal()).collect();
        xs.extend([0.0, -0.0, 1e-300, -1e-300, 0.34657, -0.34657, 36.0, -36.0, 700.0, -707.9, -708.5, -800.0, 1e6, -1e6]);
        let mut z = xs.clone();
        let mut g = vec![0.0; xs.len()];
        bias_softplus_rows(&mut z, &mut g, &[0.0]);
        for ((x, v), sl) in xs.iter().zip(&z).zip(&g) {
            let (sp, sg) = softplus_and_slope(*x);
            assert!((v - sp).abs() <= 4.0 * f64::EPSILON * sp.abs() + 1e-300, "softplus({x}) {v} vs {sp}");
            assert!((sl - sg).abs() <= 4.0 * f64::EPSILON * sg.abs() + 1e-300, "sigmoid({x}) {sl} vs {sg}");
        }
    }

    #[test]
    fn blocked_pass_matches_single_pass() {
        let m = RatioModel::init(&[1, 8, 8, 1], 1e-3, 9).unwrap();
        let mut s = Stream::new(3);
        let n = 2 * BLOCK_ROWS + 17;
        let zs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let up: Vec<f64> = (0..n).map(|_| s.normal() / n as f64).collect();
        let x = column(&zs);
        let one = m.forward(x.view());
        let blocked = m.forward_blocked(x.view());
        assert_eq!(one.ratio.to_vec(), blocked.ratio);
        let g1 = m.backward(&one, &up).unwrap();
        let g2 = m.backward_blocked(&blocked, &up).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        assert!(m.backward_blocked(&blocked, &up[1..]).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = RatioModel::init(&[1, 64, 64, 1], 1e-3, 5).unwrap();
        let b = RatioModel::init(&[1, 64, 64, 1], 1e-3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_params(), 64 + 64 + 64 * 64 + 64 + 64 + 1);
        assert!(a.params.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn init_errors() {
        assert!(matches!(RatioModel::init(&[], 1e-3, 0), Err(Error::EmptyLayers)));
        assert!(matches!(RatioModel::init(&[1], 1e-3, 0), Err(Error::EmptyLayers)));
        assert!(RatioModel::init(&[1, 4, 1], 0.0, 0).is_err());
    }

    #[test]
    fn output_respects_floor() {
        let mut s = Stream::new(1);
        for seed in 0..5 {
            let mut m = RatioModel::init(&[1, 16, 16, 1], 1e-3, seed).unwrap();
            // push the output strongly negative so the floor binds
            let last = m.n_params() - 1;
            m.params[last] = -20.0;
            let zs: Vec<f64> = (0..200).map(|_| 10.0 * s.normal()).collect();
            let r = m.evaluate(&zs);
            assert_eq!(r.len(), zs.len());
            assert!(r.iter().all(|&v| v >= 1e-3 && v.is_finite()));
        }
    }

    #[test]
    fn zero_output_layer_gives_ln2() {
        let mut m = RatioModel::init(&[1, 8, 8, 1], 1e-3, 3).unwrap();
        m.zero_output_layer();
        for r in m.evaluate(&[-5.0, 0.0, 2.5, 100.0]) {
            assert_relative_eq!(r, std::f64::consts::LN_2, max_relative = 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut s = Stream::new(77);
        for (seed, sizes) in [(1u64, vec![1, 5, 4, 1]), (2, vec![1, 3, 1]), (3, vec![1, 6, 6, 1]), (4, vec![1, 1])] {
            let m = RatioModel::init(&sizes, 1e-3, seed).unwrap();
            let zs: Vec<f64> = (0..12).map(|_| s.normal()).collect();
            let up: Vec<f64> = (0..12).map(|_| s.normal()).collect();
            let g = m.gradient(&zs, &up).unwrap();
            let fd = fd_gradient(&m, &zs, &up, 1e-5);
            assert_grad_close(&g, &fd);
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let m = RatioModel::init(&[1, 4, 1], 1e-3, 0).unwrap();
        let g = m.gradient(&[0.1, 0.2], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(matches!(m.gradient(&[0.1], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn floored_sample_contributes_nothing() {
        let mut m = RatioModel::init(&[1, 1], 1e-3, 0).unwrap();
        // f(z) = w z + b with w = 1, b = 0: z = -30 is deep in the floor
        m.params = vec![1.0, 0.0];
        let g = m.gradient(&[-30.0], &[1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = m.gradient(&[-30.0, 0.5], &[1.0, 1.0]).unwrap();
        let g_single = m.gradient(&[0.5], &[1.0]).unwrap();
        assert_eq!(g, g_single);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut m = RatioModel::init(&[1, 3, 1], 1e-3, 0).unwrap();
        let before = m.params.clone();
        let mut st = AdamState::new(m.n_params(), 1e-3);
        adam_step(&mut m, &mut st, &vec![0.0; before.len()]).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut m = RatioModel::init(&[1, 3, 1], 1e-3, 0).unwrap();
        let before = m.params.clone();
        let mut st = AdamState::new(m.n_params(), 1e-3);
        let g: Vec<f64> = (0..before.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        adam_step(&mut m, &mut st, &g).unwrap();
        for ((a, b), gi) in m.params.iter().zip(&before).zip(&g) {
            let step = a - b;
            assert_relative_eq!(step.abs(), 1e-3, max_relative = 1e-6);
            assert!(step * gi < 0.0);
        }
    }

    #[test]
    fn adam_descends_under_constant_gradient() {
        let mut m = RatioModel::init(&[1, 2, 1], 1e-3, 0).unwrap();
        let before = m.params.clone();
        let mut st = AdamState::new(m.n_params(), 1e-3);
        let g = vec![0.5; before.len()];
        for _ in 0..100 {
            adam_step(&mut m, &mut st, &g).unwrap();
        }
        assert!(m.params.iter().zip(&before).all(|(a, b)| a < b));
        assert_eq!(st.step_count, 100);
    }

    #[test]
    fn adam_rejects_nonfinite() {
        let mut m = RatioModel::init(&[1, 2, 1], 1e-3, 0).unwrap();
        let mut st = AdamState::new(m.n_params(), 1e-3);
        let mut g = vec![0.0; m.n_params()];
        g[2] = f64::NAN;
        assert!(matches!(adam_step(&mut m, &mut st, &g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = RatioModel::init(&[1, 7, 5, 1], 1e-3, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save_json(&path).unwrap();
        let back = RatioModel::load_json(&path).unwrap();
        assert_eq!(m, back);
    }
}
