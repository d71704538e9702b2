//! Small dense networks with hand-written backprop.
//!
//! Parameters of an [`Mlp`] live in one flat `Vec<f64>`: for each layer the
//! row-major `out × in` weight matrix followed by the `out` biases. The flat
//! layout is what Adam, target-network averaging, checkpoints and the
//! finite-difference checker all operate on.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Dense ReLU network with an identity output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn layer_len(n_in: usize, n_out: usize) -> usize {
    n_out * n_in + n_out
}

impl Mlp {
    /// All-zero network with the given layer widths `[in, h1, ..., out]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| layer_len(w[0], w[1])).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; n] })
    }

    /// Fan-in scaled uniform init; the last layer is shrunk by `final_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], final_scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let n_layers = net.n_layers();
        for l in 0..n_layers {
            let n_in = net.sizes[l];
            let bound = 1.0 / (n_in as f64).sqrt();
            let scale = if l + 1 == n_layers { final_scale } else { 1.0 };
            let (w, _) = net.layer_ranges(l);
            for p in &mut net.params[w] {
                *p = scale * rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch { expected: net.params.len(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Flat ranges of the weight matrix and bias vector of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let offset: usize = self.sizes[..=l].windows(2).map(|w| layer_len(w[0], w[1])).sum();
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = offset..offset + n_in * n_out;
        let b = w.end..w.end + n_out;
        (w, b)
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.layer_ranges(l);
        ArrayView2::from_shape((self.sizes[l + 1], self.sizes[l]), &self.params[w]).expect("layer shape")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.layer_ranges(l);
        ArrayView1::from(&self.params[b])
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: cols });
        }
        Ok(())
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let n_layers = self.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut a = x.to_owned();
        for l in 0..n_layers {
            let mut z = a.dot(&self.weight(l).t());
            z += &self.bias(l);
            inputs.push(a);
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(ForwardCache { inputs, output: a })
    }

    /// Smallest `|z|` over all hidden pre-activations for the rows of `x`.
    pub fn min_abs_preactivation(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        let mut min = f64::INFINITY;
        for l in 0..self.n_layers() - 1 {
            let mut z = a.dot(&self.weight(l).t());
            z += &self.bias(l);
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            z.mapv_inplace(|v| v.max(0.0));
            a = z;
        }
        Ok(min)
    }

    /// Output only, without keeping activations.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let n_layers = self.n_layers();
        let mut a = x.to_owned();
        for l in 0..n_layers {
            let mut z = a.dot(&self.weight(l).t());
            z += &self.bias(l);
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut z: Vec<f64> = (0..w.nrows()).map(|o| w.row(o).dot(&ArrayView1::from(&a[..])) + b[o]).collect();
            if l + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Reverse pass for a batched forward. Parameter gradients are summed
    /// over the batch; `grad_out` carries any `1/B` factor of the loss.
    pub fn backward_batch(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if grad_out.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch { expected: cache.output.ncols(), got: grad_out.ncols() });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let a_prev = &cache.inputs[l];
            let (wr, br) = self.layer_ranges(l);
            let dw = delta.t().dot(a_prev);
            // Logical (row-major) order regardless of the operands' memory layout.
            grads[wr].iter_mut().zip(dw.iter()).for_each(|(g, v)| *g = *v);
            let db = delta.sum_axis(Axis(0));
            grads[br].iter_mut().zip(db.iter()).for_each(|(g, v)| *g = *v);
            let mut d_prev = delta.dot(&self.weight(l));
            if l > 0 {
                // a_prev = relu(z_prev); derivative is 1 where a_prev > 0.
                ndarray::Zip::from(&mut d_prev).and(a_prev).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = d_prev;
        }
        Ok((grads, delta))
    }

    /// Single-sample reverse pass: `(parameter grads, input grads)`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x.len())?;
        if grad_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: grad_out.len() });
        }
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let cache = self.forward_batch(xb)?;
        let gb = ArrayView2::from_shape((1, grad_out.len()), grad_out).expect("row");
        let (g, gin) = self.backward_batch(&cache, gb)?;
        Ok((g, gin.iter().copied().collect()))
    }

    /// `self ← (1 − tau)·self + tau·source`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if source.sizes != self.sizes {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: source.params.len() });
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - tau) * *t + tau * s;
        }
        Ok(())
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: params.len() });
        }
        if grads.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len() });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 − tanh(u)²)` in the overflow-free softplus form.
pub fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Keeps squashed actions strictly inside the open interval.
const ACTION_BOUND: f64 = 1.0 - 1e-12;

/// Squashed-Gaussian policy: one trunk whose output layer holds the means
/// (first half) and raw log standard deviations (second half).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicyHead {
    pub net: Mlp,
    action_dim: usize,
}

/// Per-batch quantities of a reparameterized policy sample.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    noise: Array2<f64>,
    pre_tanh: Array2<f64>,
    std: Array2<f64>,
    log_std_clamped: Array2<bool>,
    cache: ForwardCache,
}

impl GaussianPolicyHead {
    pub fn new(net: Mlp) -> Result<Self> {
        let out = net.output_dim();
        if !out.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("policy output width {out} must be even")));
        }
        Ok(Self { net, action_dim: out / 2 })
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Self::new(Mlp::init(&sizes, 1e-3, rng)?)
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Mean and clamped log-std for a single observation.
    pub fn distribution(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(obs)?;
        let d = self.action_dim;
        let mean = out[..d].to_vec();
        let log_std = out[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok((mean, log_std))
    }

    /// Draws `noise` as standard normals and evaluates the batch sample.
    pub fn sample_batch<R: Rng + ?Sized>(&self, obs: ArrayView2<'_, f64>, rng: &mut R) -> Result<PolicySample> {
        let noise = Array2::from_shape_simple_fn((obs.nrows(), self.action_dim), || StandardNormal.sample(rng));
        self.sample_with_noise(obs, noise)
    }

    /// Reparameterized sample `a = tanh(mean + std·noise)` with its log-density.
    pub fn sample_with_noise(&self, obs: ArrayView2<'_, f64>, noise: Array2<f64>) -> Result<PolicySample> {
        let cache = self.net.forward_batch(obs)?;
        let d = self.action_dim;
        let b = obs.nrows();
        if noise.dim() != (b, d) {
            return Err(Error::DimensionMismatch { expected: d, got: noise.ncols() });
        }
        let out = cache.output();
        let mut actions = Array2::zeros((b, d));
        let mut pre_tanh = Array2::zeros((b, d));
        let mut std = Array2::zeros((b, d));
        let mut clamped = Array2::from_elem((b, d), false);
        let mut log_probs = Array1::zeros(b);
        for r in 0..b {
            let mut lp = 0.0;
            for i in 0..d {
                let raw = out[[r, d + i]];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                clamped[[r, i]] = raw != ls;
                let s = ls.exp();
                let eps = noise[[r, i]];
                let u = out[[r, i]] + s * eps;
                lp += -0.5 * eps * eps - ls - HALF_LN_2PI - log_tanh_jacobian(u);
                pre_tanh[[r, i]] = u;
                std[[r, i]] = s;
                actions[[r, i]] = u.tanh().clamp(-ACTION_BOUND, ACTION_BOUND);
            }
            log_probs[r] = lp;
        }
        Ok(PolicySample { actions, log_probs, noise, pre_tanh, std, log_std_clamped: clamped, cache })
    }

    /// Backprop of `Σ_r (d_actions[r]·a_r + d_logp[r]·log π(a_r))` to the
    /// network parameters, holding the noise fixed.
    pub fn backward_sample(
        &self,
        sample: &PolicySample,
        d_actions: ArrayView2<'_, f64>,
        d_logp: ArrayView1<'_, f64>,
    ) -> Result<Vec<f64>> {
        let d = self.action_dim;
        let b = sample.actions.nrows();
        if d_actions.dim() != (b, d) || d_logp.len() != b {
            return Err(Error::DimensionMismatch { expected: b, got: d_logp.len() });
        }
        let mut grad_out = Array2::zeros((b, 2 * d));
        for r in 0..b {
            for i in 0..d {
                let u = sample.pre_tanh[[r, i]];
                let t = u.tanh();
                let jac = 1.0 - t * t;
                let s = sample.std[[r, i]];
                let eps = sample.noise[[r, i]];
                // d log π / d u through the tanh correction term.
                let dlogp_du = 2.0 * t;
                let du = d_actions[[r, i]] * jac + d_logp[r] * dlogp_du;
                grad_out[[r, i]] = du;
                let dls = du * s * eps - d_logp[r];
                grad_out[[r, d + i]] = if sample.log_std_clamped[[r, i]] { 0.0 } else { dls };
            }
        }
        let (g, _) = self.net.backward_batch(&sample.cache, grad_out.view())?;
        Ok(g)
    }
}

/// Single-observation squashed-Gaussian draw. With `deterministic` the
/// pre-squash value is the mean.
pub fn sample_squashed_gaussian<R: Rng + ?Sized>(
    head: &GaussianPolicyHead,
    obs: &[f64],
    rng: &mut R,
    deterministic: bool,
) -> Result<(Vec<f64>, f64)> {
    let d = head.action_dim();
    let noise: Vec<f64> = if deterministic {
        vec![0.0; d]
    } else {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    };
    let x = ArrayView2::from_shape((1, obs.len()), obs).expect("row");
    let sample = head.sample_with_noise(x, Array2::from_shape_vec((1, d), noise).expect("row"))?;
    Ok((sample.actions.row(0).to_vec(), sample.log_probs[0]))
}

/// A named contiguous slice of a flat parameter vector.
#[derive(Clone, Debug)]
pub struct GradBlock {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `(block name, max relative error)` in block order.
    pub blocks: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.blocks.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.blocks.iter().all(|(_, e)| *e <= tol)
    }
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to rounding do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], blocks: &[GradBlock], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let blocks = blocks
        .iter()
        .map(|blk| {
            let mut worst = 0.0f64;
            for i in blk.range.clone() {
                let orig = p[i];
                p[i] = orig + h;
                let up = loss(&p);
                p[i] = orig - h;
                let down = loss(&p);
                p[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(relative_error(analytic[i], numeric));
            }
            (blk.name.clone(), worst)
        })
        .collect();
    GradCheckReport { blocks }
}

/// One block per layer weight and bias of `net`, prefixed by `name`.
pub fn layer_blocks(net: &Mlp, name: &str, offset: usize) -> Vec<GradBlock> {
    (0..net.n_layers())
        .flat_map(|l| {
            let (w, b) = net.layer_ranges(l);
            [
                GradBlock { name: format!("{name}.layer{l}.weight"), range: w.start + offset..w.end + offset },
                GradBlock { name: format!("{name}.layer{l}.bias"), range: b.start + offset..b.end + offset },
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        let (w, _) = net.layer_ranges(0);
        for i in 0..3 {
            net.params_mut()[w.start + i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let net = Mlp::init(&[5, 16, 16, 2], 1.0, &mut rng()).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1, -0.7];
        let a = net.forward(&x).unwrap();
        assert_eq!(a, net.forward(&x).unwrap());
        let xb = ArrayView2::from_shape((1, 5), &x[..]).unwrap();
        let b = net.predict_batch(xb).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn min_preactivation_of_known_layer() {
        let net = Mlp::from_params(&[2, 2, 1], vec![1.0, 0.0, 0.0, -1.0, 0.5, 0.25, 1.0, 1.0, 0.0]).unwrap();
        let x = ndarray::array![[0.2, 0.5], [-1.0, 0.0]];
        // z rows: [0.7, -0.25] and [-0.5, 0.25]
        assert!((net.min_abs_preactivation(x.view()).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[4, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(net.backward(&[1.0; 4], &[1.0]).is_err());
    }

    #[test]
    fn backward_zero_grad_out() {
        let net = Mlp::init(&[3, 8, 2], 1.0, &mut rng()).unwrap();
        let (g, gin) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gin.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_outer_product() {
        let net = Mlp::init(&[3, 2], 1.0, &mut rng()).unwrap();
        let x = [0.5, -1.0, 2.0];
        let go = [0.3, -0.7];
        let (g, _) = net.backward(&x, &go).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g[o * 3 + i] - go[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(g[6 + o], go[o]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng();
        let net = Mlp::init(&[4, 12, 10, 3], 1.0, &mut r).unwrap();
        let x = Array2::from_shape_fn((6, 4), |_| r.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((6, 3), |_| r.random_range(-1.0..1.0));
        let loss = |p: &[f64]| {
            let n = Mlp::from_params(net.sizes(), p.to_vec()).unwrap();
            let y = n.predict_batch(x.view()).unwrap();
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let cache = net.forward_batch(x.view()).unwrap();
        let grad_out = cache.output() - &target;
        let (g, _) = net.backward_batch(&cache, grad_out.view()).unwrap();
        let report = finite_diff_check(loss, net.params(), &g, &layer_blocks(&net, "net", 0), 1e-5);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng();
        let net = Mlp::init(&[3, 10, 2], 1.0, &mut r).unwrap();
        let x = [0.2, -0.4, 0.8];
        let go = [1.0, -0.5];
        let (_, gin) = net.backward(&x, &go).unwrap();
        for i in 0..3 {
            let f = |d: f64| {
                let mut xx = x;
                xx[i] += d;
                let y = net.forward(&xx).unwrap();
                y[0] * go[0] + y[1] * go[1]
            };
            let num = (f(1e-5) - f(-1e-5)) / 2e-5;
            assert!(relative_error(gin[i], num) < 1e-6);
        }
    }

    #[test]
    fn quadratic_check_is_tight() {
        let params = vec![0.3, -1.2, 2.5];
        let loss = |p: &[f64]| p.iter().map(|v| 0.5 * 3.0 * v * v).sum::<f64>();
        let grad: Vec<f64> = params.iter().map(|v| 3.0 * v).collect();
        let rep = finite_diff_check(loss, &params, &grad, &[GradBlock { name: "q".into(), range: 0..3 }], 1e-5);
        assert!(rep.max_rel_error() <= 1e-8, "{rep:?}");
    }

    #[test]
    fn relu_kink_perturbed_off_the_kink() {
        // Input chosen so the hidden pre-activation sits exactly on the kink,
        // then nudged far enough that +-h never crosses it.
        let net = Mlp::from_params(&[1, 1, 1], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let x0 = 1e-3;
        let loss = |p: &[f64]| Mlp::from_params(&[1, 1, 1], p.to_vec()).unwrap().forward(&[x0]).unwrap()[0];
        let (g, _) = net.backward(&[x0], &[1.0]).unwrap();
        let blocks = layer_blocks(&net, "k", 0);
        assert!(finite_diff_check(loss, net.params(), &g, &blocks, 1e-5).passes(1e-4));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, 3e-4);
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let lr = 1e-3;
        let mut p = vec![0.5, 0.5];
        let g = [0.2, -3.0];
        let mut st = AdamState::new(2, lr);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m_hat = g, v_hat = g², so the step is lr·g/(|g| + eps).
        for i in 0..2 {
            let expected = 0.5 - lr * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15);
            assert!(((p[i] - 0.5) + lr * g[i].signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2, 1e-3);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut st).is_err());
        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut st).is_err());
    }

    #[test]
    fn adam_runs_are_reproducible() {
        let run = || {
            let mut p = vec![1.0, 2.0, 3.0];
            let mut st = AdamState::new(3, 1e-2);
            for k in 0..20 {
                let g: Vec<f64> = p.iter().map(|v| v * (k as f64 + 1.0).sin()).collect();
                st.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softplus_form_matches_direct() {
        for u in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let t: f64 = f64::tanh(u);
            assert!((log_tanh_jacobian(u) - (1.0 - t * t).ln()).abs() < 1e-12);
        }
        assert!(log_tanh_jacobian(400.0).is_finite());
    }

    #[test]
    fn near_deterministic_head_gives_tanh_mean() {
        // Bias of the log-std output pinned at -20.
        let mut net = Mlp::zeros(&[2, 2]).unwrap();
        let (_, b) = net.layer_ranges(0);
        net.params_mut()[b.start] = 0.4;
        net.params_mut()[b.start + 1] = -25.0;
        let head = GaussianPolicyHead::new(net).unwrap();
        let (a, lp) = sample_squashed_gaussian(&head, &[0.1, 0.2], &mut rng(), true).unwrap();
        assert_eq!(a, vec![0.4f64.tanh()]);
        assert!(lp.is_finite());
        let (a2, _) = sample_squashed_gaussian(&head, &[0.1, 0.2], &mut rng(), false).unwrap();
        assert!((a2[0] - 0.4f64.tanh()).abs() < 1e-7);
    }

    #[test]
    fn actions_stay_open_interval() {
        let mut r = rng();
        let mut net = Mlp::init(&[2, 8, 4], 1.0, &mut r).unwrap();
        // Huge means push tanh into saturation.
        let (_, b) = net.layer_ranges(1);
        net.params_mut()[b.start] = 50.0;
        net.params_mut()[b.start + 1] = -50.0;
        let head = GaussianPolicyHead::new(net).unwrap();
        for _ in 0..200 {
            let (a, lp) = sample_squashed_gaussian(&head, &[0.3, -0.1], &mut r, false).unwrap();
            assert!(a.iter().all(|v| v.abs() < 1.0));
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables_density() {
        // 1-D head with constant mean/log-std: compare against the density of
        // tanh(N(mu, s²)) written out independently, and check it integrates to one.
        let (mu, ls) = (0.3f64, -0.4f64);
        let net = Mlp::from_params(&[1, 2], vec![0.0, 0.0, mu, ls]).unwrap();
        let head = GaussianPolicyHead::new(net).unwrap();
        let s = ls.exp();
        let density = |a: f64| {
            let u = a.atanh();
            let z = (u - mu) / s;
            (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()) / (1.0 - a * a)
        };
        let mut r = rng();
        for _ in 0..50 {
            let (a, lp) = sample_squashed_gaussian(&head, &[0.0], &mut r, false).unwrap();
            assert!((lp - density(a[0]).ln()).abs() < 1e-3, "{lp} vs {}", density(a[0]).ln());
        }
        // Integrate exp(log_prob) over (-1, 1) by the midpoint rule in u-space.
        let n = 200_000;
        let (lo, hi) = (mu - 12.0 * s, mu + 12.0 * s);
        let du = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let u: f64 = lo + (i as f64 + 0.5) * du;
            let eps = (u - mu) / s;
            let x = ArrayView2::from_shape((1, 1), &[0.0][..]).unwrap();
            let smp = head.sample_with_noise(x, Array2::from_elem((1, 1), eps)).unwrap();
            let a = u.tanh();
            total += smp.log_probs[0].exp() * (1.0 - a * a) * du;
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn policy_backward_matches_finite_differences() {
        let mut r = rng();
        let mut head = GaussianPolicyHead::init(3, &[10, 10], 2, &mut r).unwrap();
        // Give the output layer real scale so tanh is not in its linear regime.
        let n_layers = head.net.n_layers();
        let (w, _) = head.net.layer_ranges(n_layers - 1);
        for p in &mut head.net.params_mut()[w] {
            *p = r.random_range(-0.8..0.8);
        }
        let obs = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let noise = Array2::from_shape_fn((5, 2), |_| StandardNormal.sample(&mut r));
        let ca = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));
        let cl = Array1::from_shape_fn(5, |_| r.random_range(-1.0..1.0));
        let objective = |h: &GaussianPolicyHead| {
            let s = h.sample_with_noise(obs.view(), noise.clone()).unwrap();
            (&s.actions * &ca).sum() + (&s.log_probs * &cl).sum()
        };
        let smp = head.sample_with_noise(obs.view(), noise.clone()).unwrap();
        let g = head.backward_sample(&smp, ca.view(), cl.view()).unwrap();
        let sizes = head.net.sizes().to_vec();
        let loss = |p: &[f64]| objective(&GaussianPolicyHead::new(Mlp::from_params(&sizes, p.to_vec()).unwrap()).unwrap());
        let rep = finite_diff_check(loss, head.net.params(), &g, &layer_blocks(&head.net, "pi", 0), 1e-5);
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
