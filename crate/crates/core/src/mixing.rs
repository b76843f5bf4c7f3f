//! Monotonic-improvement policy mixing: the mixture rate from critic
//! advantages and the KL pull toward the current/neighbor mixture.

use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::agent::{Batch, SacState};
use crate::approx::{gaussian_log_density_node, GaussianPolicy, Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureRate {
    /// Estimate before clamping.
    pub raw: f64,
    /// `raw` clamped to `[0, 1]`.
    pub effective: f64,
    pub m0: f64,
    /// Monte-Carlo standard error of `raw` over batch states.
    pub std_err: f64,
}

impl MixtureRate {
    pub fn from_raw(raw: f64, m0: f64, std_err: f64) -> Self {
        let effective = if raw.is_nan() { 0.0 } else { raw.clamp(0.0, 1.0) };
        Self { raw, effective, m0, std_err }
    }

    /// A fixed rate, as used by the constant-m ablations and no-distill visits.
    pub fn constant(m: f64) -> Self {
        Self { raw: m, effective: m.clamp(0.0, 1.0), m0: 1.0, std_err: 0.0 }
    }
}

/// How the rate is chosen each update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    /// Estimated from the critic.
    Opt,
    Zero,
    One,
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt" => Ok(MixMode::Opt),
            "zero" | "0" => Ok(MixMode::Zero),
            "one" | "1" => Ok(MixMode::One),
            _ => Err(Error::Config { line: 0, msg: format!("unknown m mode `{s}` (expected opt, zero or one)") }),
        }
    }
}

impl MixMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MixMode::Opt => "opt",
            MixMode::Zero => "zero",
            MixMode::One => "one",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConfig {
    pub mode: MixMode,
    pub m0: f64,
    /// Action draws per state for the KL loss.
    pub loss_samples: usize,
    /// Action draws per state and policy for the rate.
    pub rate_samples: usize,
    /// Leading batch rows used to estimate the rate.
    pub rate_states: usize,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self { mode: MixMode::Opt, m0: 1.0, loss_samples: 8, rate_samples: 4, rate_states: 64 }
    }
}

/// `m0 * E_s[E_{a'~nbr} Q(s,a') - E_{a~cur} Q(s,a)]`, clamped.
///
/// `q(obs, act, xi)` is evaluated on `samples` row-blocks of the stacked
/// batch; row `k * B + i` belongs to state `i`.
pub fn compute_mixture_rate<R, Q>(q: Q, pi_cur: &GaussianPolicy, pi_nbr: &GaussianPolicy, obs: &Mat, xi: &Mat, m0: f64, samples: usize, rng: &mut R) -> Result<MixtureRate>
where
    R: Rng + ?Sized,
    Q: Fn(&Mat, &Mat, &Mat) -> Result<Mat>,
{
    let b = obs.nrows();
    if b == 0 || samples == 0 {
        return Err(Error::EmptyBatch);
    }
    let obs_k = tile(obs, samples);
    let xi_k = tile(xi, samples);
    let mut per_policy = Vec::with_capacity(2);
    for pi in [pi_nbr, pi_cur] {
        let (mean, log_std) = pi.dist_infer(obs_k.view())?;
        let noise = Array2::from_shape_fn(mean.dim(), |_| StandardNormal.sample(rng));
        let (act, _) = pi.squash_sample(&mean, &log_std, &noise);
        let v = q(&obs_k, &act, &xi_k)?;
        if v.dim() != (b * samples, 1) {
            return Err(Error::ShapeMismatch { expected: b * samples, got: v.nrows() });
        }
        let per_state: Vec<f64> = (0..b).map(|i| (0..samples).map(|k| v[[k * b + i, 0]]).sum::<f64>() / samples as f64).collect();
        per_policy.push(per_state);
    }
    let diffs: Vec<f64> = per_policy[0].iter().zip(&per_policy[1]).map(|(n, c)| n - c).collect();
    let mean = diffs.iter().sum::<f64>() / b as f64;
    let var = if b > 1 { diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (b - 1) as f64 } else { 0.0 };
    let raw = m0 * mean;
    if !raw.is_finite() {
        return Err(Error::NonFiniteLoss("mixture rate"));
    }
    Ok(MixtureRate::from_raw(raw, m0, m0.abs() * (var / b as f64).sqrt()))
}

fn tile(m: &Mat, k: usize) -> Mat {
    let views = vec![m.view(); k];
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Monte-Carlo `KL(cur || (1-m) cur + m nbr)` with `samples` reparameterized
/// draws per state. Densities are compared in pre-squash space, where the
/// squash Jacobian is common to both components and cancels.
///
/// `mean`/`log_std` are the current policy's outputs on the tape; the
/// neighbor's are constants, so gradients reach only the current policy.
pub fn mixing_loss<R: Rng + ?Sized>(tape: &mut Tape, mean: Var, log_std: Var, nbr_mean: &Mat, nbr_log_std: &Mat, m: f64, samples: usize, rng: &mut R) -> Result<Var> {
    let (rows, cols) = tape.value(mean).dim();
    let noise = Array2::from_shape_fn((rows * samples, cols), |_| StandardNormal.sample(rng));
    mixing_loss_with_noise(tape, mean, log_std, nbr_mean, nbr_log_std, m, noise)
}

/// [`mixing_loss`] with explicit standard-normal draws stacked in row
/// blocks of the batch size.
pub fn mixing_loss_with_noise(tape: &mut Tape, mean: Var, log_std: Var, nbr_mean: &Mat, nbr_log_std: &Mat, m: f64, noise: Mat) -> Result<Var> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::MixtureRateOutOfRange(m));
    }
    let (rows, cols) = tape.value(mean).dim();
    if rows == 0 || noise.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if nbr_mean.dim() != (rows, cols) || nbr_log_std.dim() != (rows, cols) || noise.nrows() % rows != 0 || noise.ncols() != cols {
        return Err(Error::ShapeMismatch { expected: rows, got: nbr_mean.nrows() });
    }
    let samples = noise.nrows() / rows;
    let mean_k = tape.tile_rows(mean, samples);
    let ls_k = tape.tile_rows(log_std, samples);
    let std_k = tape.exp(ls_k);
    let eps = tape.constant(noise);
    let spread = tape.mul(std_k, eps);
    let pre = tape.add(mean_k, spread);
    let nm = tape.constant(tile(nbr_mean, samples));
    let nl = tape.constant(tile(nbr_log_std, samples));
    let lp_cur = gaussian_log_density_node(tape, pre, mean_k, ls_k);
    let lp_nbr = gaussian_log_density_node(tape, pre, nm, nl);
    let a = tape.add_scalar(lp_cur, (1.0 - m).ln());
    let b = tape.add_scalar(lp_nbr, m.ln());
    let mix = tape.log_add_exp(a, b);
    let ratio = tape.sub(lp_cur, mix);
    Ok(tape.mean(ratio))
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub m: MixtureRate,
    pub rl_loss: f64,
    pub mi_loss: f64,
    pub alpha: f64,
    /// Policy-to-policy terms in this update's loss.
    pub distill_terms: usize,
}

/// One policy step on `L^RL + L^MI`, then the temperature step.
///
/// `nbr = None` is a no-distill update: `m` is forced to 0 and no mixing
/// randomness is consumed. The rate uses the critic as it stands, so call
/// this after the step's critic update.
pub fn combined_policy_update<R1, R2>(sac: &mut SacState, nbr: Option<&GaussianPolicy>, batch: &Batch, cfg: &MixingConfig, rng: &mut R1, mix_rng: &mut R2) -> Result<UpdateStats>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let pass = sac.actor_rl_loss(&mut tape, batch, rng)?;
    let rl_loss = tape.scalar(pass.loss);
    let m = match (nbr, cfg.mode) {
        (None, _) | (_, MixMode::Zero) => MixtureRate::constant(0.0),
        (Some(_), MixMode::One) => MixtureRate::constant(1.0),
        (Some(nbr), MixMode::Opt) => {
            let sub = batch.head(cfg.rate_states.max(1));
            compute_mixture_rate(|o, a, x| sac.q_min(o, a, x), &sac.policy, nbr, &sub.obs, &sub.xi, cfg.m0, cfg.rate_samples, mix_rng)?
        }
    };
    let (loss, mi_loss) = match nbr {
        Some(nbr) if m.effective > 0.0 => {
            let (nm, nl) = nbr.dist_infer(batch.obs.view())?;
            let mi = mixing_loss(&mut tape, pass.sample.mean, pass.sample.log_std, &nm, &nl, m.effective, cfg.loss_samples, mix_rng)?;
            let v = tape.scalar(mi);
            (tape.add(pass.loss, mi), v)
        }
        _ => (pass.loss, 0.0),
    };
    sac.policy_step(&tape, loss, &pass.bound)?;
    let alpha = sac.temperature_update(pass.log_prob_mean)?;
    let distill_terms = usize::from(nbr.is_some() && cfg.mode != MixMode::Zero);
    Ok(UpdateStats { m, rl_loss, mi_loss, alpha, distill_terms })
}

/// Policy and temperature step on `L^RL` alone.
pub fn rl_policy_update<R: Rng + ?Sized>(sac: &mut SacState, batch: &Batch, rng: &mut R) -> Result<UpdateStats> {
    let mut tape = Tape::new();
    let pass = sac.actor_rl_loss(&mut tape, batch, rng)?;
    let rl_loss = sac.policy_step(&tape, pass.loss, &pass.bound)?;
    let alpha = sac.temperature_update(pass.log_prob_mean)?;
    Ok(UpdateStats { m: MixtureRate::constant(0.0), rl_loss, mi_loss: 0.0, alpha, distill_terms: 0 })
}
