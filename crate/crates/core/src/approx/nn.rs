use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::tape::{Grads, Mat, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Mat) -> Self {
        let grad = Array2::zeros(value.dim());
        Self { name: name.into(), value, grad }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// `(mean, log-std)` per action dimension.
    GaussianPolicy,
    ScalarQ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub head: HeadKind,
}

impl MlpSpec {
    pub fn policy(input: usize, act_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            input,
            hidden,
            output: 2 * act_dim,
            activation: Activation::Relu,
            head: HeadKind::GaussianPolicy,
        }
    }

    pub fn q(input: usize, hidden: Vec<usize>) -> Self {
        Self { input, hidden, output: 1, activation: Activation::Relu, head: HeadKind::ScalarQ }
    }

    fn validate(&self) -> Result<()> {
        let widths_ok = self.input > 0 && self.output > 0 && self.hidden.iter().all(|&w| w > 0);
        let head_ok = self.head != HeadKind::GaussianPolicy || self.output % 2 == 0;
        if widths_ok && head_ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected: self.output, got: 0 })
        }
    }
}

/// Parameter handles of one network recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fully connected network; layer `i` holds `w{i}` `[in x out]` and `b{i}` `[1 x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Param>,
}

impl Mlp {
    /// Uniform fan-in initialization; the output layer of a policy head is
    /// shrunk by `1e-2` so fresh policies are close to `N(0, 1)`.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        let n_layers = widths.len() - 1;
        let mut params = Vec::with_capacity(2 * n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
            let mut b = Array2::from_shape_fn((1, fan_out), |_| dist.sample(rng));
            if i + 1 == n_layers && spec.head == HeadKind::GaussianPolicy {
                w *= 1e-2;
                b *= 1e-2;
            }
            params.push(Param::new(format!("w{i}"), w));
            params.push(Param::new(format!("b{i}"), b));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    /// Zero the output layer; the network then emits exactly zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        self.params[n - 2].value.fill(0.0);
        self.params[n - 1].value.fill(0.0);
    }

    pub fn copy_from(&mut self, other: &Mlp) {
        debug_assert_eq!(self.spec, other.spec);
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.assign(&src.value);
        }
    }

    /// `self <- (1 - tau) * self + tau * other`.
    pub fn polyak_from(&mut self, other: &Mlp, tau: f64) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.zip_mut_with(&src.value, |d, &s| *d = (1.0 - tau) * *d + tau * s);
        }
    }

    /// Record the parameters on `tape`; frozen networks pass gradients to
    /// their inputs only.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).ncols();
        if cols != self.spec.input {
            return Err(Error::ShapeMismatch { expected: self.spec.input, got: cols });
        }
        let n = self.n_layers();
        let mut h = x;
        for i in 0..n {
            let z = tape.matmul(h, bound.vars[2 * i]);
            h = tape.add_row(z, bound.vars[2 * i + 1]);
            if i + 1 < n {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Mat> {
        if x.ncols() != self.spec.input {
            return Err(Error::ShapeMismatch { expected: self.spec.input, got: x.ncols() });
        }
        let n = self.n_layers();
        let mut h = x.dot(&self.params[0].value) + &self.params[1].value;
        for i in 1..n {
            match self.spec.activation {
                Activation::Relu => h.mapv_inplace(|v| v.max(0.0)),
                Activation::Tanh => h.mapv_inplace(f64::tanh),
            }
            h = h.dot(&self.params[2 * i].value) + &self.params[2 * i + 1].value;
        }
        Ok(h)
    }

    /// Copy adjoints from `grads` into the parameter accumulators.
    pub fn store_grads(&mut self, grads: &Grads, bound: &Bound) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.get(*v) {
                Some(g) => {
                    if !g.iter().all(|x| x.is_finite()) {
                        return Err(Error::NonFiniteGradient(p.name.clone()));
                    }
                    p.grad.assign(g);
                }
                None => p.grad.fill(0.0),
            }
        }
        Ok(())
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Squashed diagonal Gaussian policy: `a = tanh(mean + std * eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    act_dim: usize,
    squash: bool,
}

/// Reparameterized sample recorded on a tape, one row per state.
#[derive(Debug, Clone, Copy)]
pub struct PolicySample {
    pub mean: Var,
    pub log_std: Var,
    /// Pre-squash draw `mean + std * eps`.
    pub pre: Var,
    pub action: Var,
    /// `[rows x 1]` log-density of `action`, squash Jacobian included.
    pub log_prob: Var,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: Vec<usize>, squash: bool, rng: &mut R) -> Result<Self> {
        let net = Mlp::new(MlpSpec::policy(obs_dim, act_dim, hidden), rng)?;
        Ok(Self { net, act_dim, squash })
    }

    pub fn from_net(net: Mlp, squash: bool) -> Result<Self> {
        if net.spec().head != HeadKind::GaussianPolicy {
            return Err(Error::ShapeMismatch { expected: 2, got: net.spec().output });
        }
        let act_dim = net.spec().output / 2;
        Ok(Self { net, act_dim, squash })
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec().input
    }

    pub fn squash(&self) -> bool {
        self.squash
    }

    /// Mean and clamped log-std, one row per observation.
    pub fn dist_infer(&self, obs: ArrayView2<f64>) -> Result<(Mat, Mat)> {
        let out = self.net.infer(obs)?;
        let a = self.act_dim;
        let mean = out.slice(ndarray::s![.., 0..a]).to_owned();
        let log_std = out.slice(ndarray::s![.., a..2 * a]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, log_std))
    }

    /// Mean and standard deviation.
    pub fn forward_policy(&self, obs: ArrayView2<f64>) -> Result<(Mat, Mat)> {
        let (mean, log_std) = self.dist_infer(obs)?;
        Ok((mean, log_std.mapv(f64::exp)))
    }

    /// Deterministic action `tanh(mean)` (or `mean` when unsquashed).
    pub fn mean_action(&self, obs: ArrayView2<f64>) -> Result<Mat> {
        let (mean, _) = self.dist_infer(obs)?;
        Ok(if self.squash { mean.mapv(f64::tanh) } else { mean })
    }

    /// Draw one action per row without recording gradients.
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, rng: &mut R) -> Result<(Mat, Array1<f64>)> {
        let (mean, log_std) = self.dist_infer(obs)?;
        let noise = Array2::from_shape_fn(mean.dim(), |_| StandardNormal.sample(rng));
        Ok(self.squash_sample(&mean, &log_std, &noise))
    }

    /// Action and log-prob for a given standard-normal `noise`.
    pub fn squash_sample(&self, mean: &Mat, log_std: &Mat, noise: &Mat) -> (Mat, Array1<f64>) {
        let pre = mean + &(log_std.mapv(f64::exp) * noise);
        let mut log_prob = Array1::zeros(mean.nrows());
        for (r, lp) in log_prob.iter_mut().enumerate() {
            for c in 0..self.act_dim {
                let e = noise[[r, c]];
                *lp += -0.5 * e * e - log_std[[r, c]] - HALF_LN_2PI;
                if self.squash {
                    *lp -= log1m_tanh_sq(pre[[r, c]]);
                }
            }
        }
        let action = if self.squash { pre.mapv(f64::tanh) } else { pre };
        (action, log_prob)
    }

    /// Mean and clamped log-std on the tape.
    pub fn dist(&self, tape: &mut Tape, bound: &Bound, obs: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, bound, obs)?;
        let a = self.act_dim;
        let mean = tape.columns(out, 0, a);
        let raw = tape.columns(out, a, 2 * a);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// Reparameterized draw; gradients reach the parameters through
    /// `mean` and `log_std`.
    pub fn rsample(&self, tape: &mut Tape, mean: Var, log_std: Var, noise: Mat) -> PolicySample {
        let std = tape.exp(log_std);
        let eps = tape.constant(noise);
        let spread = tape.mul(std, eps);
        let pre = tape.add(mean, spread);
        let eps_sq = tape.square(eps);
        let quad = tape.scale(eps_sq, -0.5);
        let t = tape.sub(quad, log_std);
        let per_dim = tape.add_scalar(t, -HALF_LN_2PI);
        let (action, per_dim) = if self.squash {
            let action = tape.tanh(pre);
            let jac = log1m_tanh_sq_node(tape, pre);
            (action, tape.sub(per_dim, jac))
        } else {
            (pre, per_dim)
        };
        let log_prob = tape.sum_cols(per_dim);
        PolicySample { mean, log_std, pre, action, log_prob }
    }

    pub fn copy_from(&mut self, other: &GaussianPolicy) {
        self.net.copy_from(&other.net);
    }
}

/// `ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))`.
pub fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - super::tape::softplus(-2.0 * u))
}

fn log1m_tanh_sq_node(tape: &mut Tape, u: Var) -> Var {
    let m2u = tape.scale(u, -2.0);
    let sp = tape.softplus(m2u);
    let s = tape.add(u, sp);
    let neg = tape.scale(s, -2.0);
    tape.add_scalar(neg, 2.0 * std::f64::consts::LN_2)
}

/// Per-row diagonal Gaussian log-density of pre-squash points `x`.
pub fn gaussian_log_density_node(tape: &mut Tape, x: Var, mean: Var, log_std: Var) -> Var {
    let diff = tape.sub(x, mean);
    let neg_ls = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg_ls);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let quad = tape.scale(z2, -0.5);
    let t = tape.sub(quad, log_std);
    let per_dim = tape.add_scalar(t, -HALF_LN_2PI);
    tape.sum_cols(per_dim)
}

/// Critic over `(history features, action, normalized domain parameters)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub net: Mlp,
}

impl QFunction {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, xi_dim: usize, hidden: Vec<usize>, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::new(MlpSpec::q(obs_dim + act_dim + xi_dim, hidden), rng)? })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, obs: Var, act: Var, xi: Var) -> Result<Var> {
        let x = tape.concat(&[obs, act, xi]);
        self.net.forward(tape, bound, x)
    }

    pub fn infer<'a>(&self, obs: ArrayView2<'a, f64>, act: ArrayView2<'a, f64>, xi: ArrayView2<'a, f64>) -> Result<Mat> {
        let x = ndarray::concatenate(Axis(1), &[obs, act, xi])
            .map_err(|_| Error::DimensionMismatch { expected: obs.nrows(), got: act.nrows() })?;
        self.net.infer(x.view())
    }

    pub fn copy_from(&mut self, other: &QFunction) {
        self.net.copy_from(&other.net);
    }
}

/// Closed-form `KL(p || q)` between diagonal Gaussians given means and
/// standard deviations, summed over dimensions.
pub fn gaussian_kl(p_mean: &[f64], p_std: &[f64], q_mean: &[f64], q_std: &[f64]) -> Result<f64> {
    let n = p_mean.len();
    for len in [p_std.len(), q_mean.len(), q_std.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (sp, sq) = (p_std[i], q_std[i]);
        for s in [sp, sq] {
            if !(s > 0.0) {
                return Err(Error::NonPositiveStd(s));
            }
        }
        let d = p_mean[i] - q_mean[i];
        kl += (sq / sp).ln() + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5;
    }
    Ok(kl)
}

/// Per-row `KL(p || q)` on the tape from means and log-stds.
pub fn gaussian_kl_node(tape: &mut Tape, p_mean: Var, p_log_std: Var, q_mean: Var, q_log_std: Var) -> Var {
    let log_ratio = tape.sub(q_log_std, p_log_std);
    let diff = tape.sub(p_mean, q_mean);
    let d2 = tape.square(diff);
    let two_lp = tape.scale(p_log_std, 2.0);
    let vp = tape.exp(two_lp);
    let num = tape.add(vp, d2);
    let m2lq = tape.scale(q_log_std, -2.0);
    let inv_vq = tape.exp(m2lq);
    let frac = tape.mul(num, inv_vq);
    let half = tape.scale(frac, 0.5);
    let t = tape.add(log_ratio, half);
    let per_dim = tape.add_scalar(t, -0.5);
    tape.sum_cols(per_dim)
}
