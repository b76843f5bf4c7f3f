//! Central finite differences against the reverse sweep.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::nn::{gaussian_kl_node, gaussian_log_density_node, Activation, Bound, GaussianPolicy, HeadKind, Mlp, MlpSpec};
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckSpec {
    pub configs: usize,
    pub seed: u64,
    pub step: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self { configs: 100, seed: 0, step: 1e-5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub configs: usize,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree (a ReLU kink lies
    /// within one step); these carry no derivative to compare against.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    fn merge(&mut self, other: &GradReport) {
        self.configs += other.configs;
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Builds a scalar loss from a bound network and an input node.
pub type LossBuilder<'a> = dyn Fn(&Mlp, &mut Tape, &Bound, Var) -> Result<Var> + 'a;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn eval(net: &Mlp, input: &Mat, build: &LossBuilder<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let b = net.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let l = build(net, &mut tape, &b, x)?;
    Ok(tape.scalar(l))
}

/// Compare reverse-mode gradients of every parameter and input coordinate
/// against central differences with step `h`.
pub fn check_network(net: &Mlp, input: &Mat, build: &LossBuilder<'_>, h: f64) -> Result<GradReport> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let x = tape.leaf(input.clone());
    let loss = build(net, &mut tape, &bound, x)?;
    let grads = tape.backward(loss)?;
    let f0 = tape.scalar(loss);

    let mut report = GradReport { configs: 1, ..Default::default() };
    let mut compare = |analytic: f64, fp: f64, fm: f64| {
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-6 {
            report.skipped += 1;
            return;
        }
        let numeric = (fp - fm) / (2.0 * h);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
    };

    for (pi, var) in bound.vars().iter().enumerate() {
        let zero = Array2::zeros(net.params()[pi].shape());
        let g = grads.get(*var).unwrap_or(&zero);
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut probe = net.clone();
            let orig = probe.params()[pi].value[[r, c]];
            probe.params_mut()[pi].value[[r, c]] = orig + h;
            let fp = eval(&probe, input, build)?;
            probe.params_mut()[pi].value[[r, c]] = orig - h;
            let fm = eval(&probe, input, build)?;
            compare(g[[r, c]], fp, fm);
        }
    }
    let zero = Array2::zeros(input.dim());
    let gx = grads.get(x).unwrap_or(&zero).clone();
    for ((r, c), a) in gx.indexed_iter() {
        let mut probe = input.clone();
        probe[[r, c]] += h;
        let fp = eval(net, &probe, build)?;
        probe[[r, c]] -= 2.0 * h;
        let fm = eval(net, &probe, build)?;
        compare(*a, fp, fm);
    }
    Ok(report)
}

fn random_spec(rng: &mut ChaCha8Rng) -> MlpSpec {
    let head = if rng.gen_bool(0.5) { HeadKind::GaussianPolicy } else { HeadKind::ScalarQ };
    let hidden = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(2..=8)).collect();
    MlpSpec {
        input: rng.gen_range(1..=6),
        hidden,
        output: if head == HeadKind::GaussianPolicy { 2 * rng.gen_range(1..=2) } else { 1 },
        activation: if rng.gen_bool(0.5) { Activation::Relu } else { Activation::Tanh },
        head,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Run the finite-difference oracle over `spec.configs` random networks
/// covering both heads, both activations, and every tape operation the
/// learners use.
pub fn check_gradients(spec: &GradCheckSpec, tolerance: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut total = GradReport::default();
    for _ in 0..spec.configs {
        let mspec = random_spec(&mut rng);
        let net = Mlp::new(mspec.clone(), &mut rng)?;
        let rows = rng.gen_range(1..=4);
        let input = gaussian(&mut rng, rows, mspec.input);
        let report = match mspec.head {
            HeadKind::ScalarQ => {
                let target = gaussian(&mut rng, rows, 1);
                let build = move |net: &Mlp, tape: &mut Tape, b: &Bound, x: Var| -> Result<Var> {
                    let q1 = net.forward(tape, b, x)?;
                    let xs = tape.scale(x, 0.5);
                    let q2 = net.forward(tape, b, xs)?;
                    let q = tape.min(q1, q2);
                    let t = tape.constant(target.clone());
                    let d = tape.sub(q, t);
                    let d2 = tape.square(d);
                    Ok(tape.mean(d2))
                };
                check_network(&net, &input, &build, spec.step)?
            }
            HeadKind::GaussianPolicy => {
                let act = mspec.output / 2;
                let squash = rng.gen_bool(0.5);
                let samples = rng.gen_range(1..=3);
                let noise = gaussian(&mut rng, rows * samples, act);
                let other_mean = gaussian(&mut rng, rows * samples, act);
                let other_ls = gaussian(&mut rng, rows * samples, act) * 0.3;
                let w: f64 = rng.gen_range(0.1..0.9);
                let policy = GaussianPolicy::from_net(net.clone(), squash)?;
                let build = move |net: &Mlp, tape: &mut Tape, b: &Bound, x: Var| -> Result<Var> {
                    let out = net.forward(tape, b, x)?;
                    let out = tape.tile_rows(out, samples);
                    let mean = tape.columns(out, 0, act);
                    let raw = tape.columns(out, act, 2 * act);
                    let ls = tape.clamp(raw, -5.0, 2.0);
                    let s = policy.rsample(tape, mean, ls, noise.clone());
                    let om = tape.constant(other_mean.clone());
                    let ol = tape.constant(other_ls.clone());
                    let lp_cur = gaussian_log_density_node(tape, s.pre, mean, ls);
                    let lp_other = gaussian_log_density_node(tape, s.pre, om, ol);
                    let a = tape.add_scalar(lp_cur, (1.0 - w).ln());
                    let c = tape.add_scalar(lp_other, w.ln());
                    let mix = tape.log_add_exp(a, c);
                    let ratio = tape.sub(lp_cur, mix);
                    let kl = gaussian_kl_node(tape, mean, ls, om, ol);
                    let a2 = tape.square(s.action);
                    let a2 = tape.sum_cols(a2);
                    let terms = tape.concat(&[s.log_prob, ratio, kl, a2]);
                    let weights = tape.constant(ndarray::array![[1.0], [0.7], [0.2], [0.3]]);
                    let per_row = tape.matmul(terms, weights);
                    let sp = tape.softplus(per_row);
                    let lg = tape.log(sp);
                    Ok(tape.mean(lg))
                };
                check_network(&net, &input, &build, spec.step)?
            }
        };
        total.merge(&report);
    }
    if total.max_rel_err > tolerance {
        return Err(Error::GradientCheck { max_rel_err: total.max_rel_err, tolerance });
    }
    Ok(total)
}
