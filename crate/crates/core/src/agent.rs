//! Off-policy soft actor-critic learner with per-sub-domain replay.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::approx::{backprop_and_step, Adam, Bound, Checkpoint, GaussianPolicy, Mat, Param, PolicySample, QFunction, Tape, Trainee, Var};
use crate::domain::DomainSpace;
use crate::envsim::{feature_dim, Transition, ACT_DIM};
use crate::error::{Error, Result};

/// FIFO store of transitions, optionally tagged with its sub-domain.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: VecDeque<Transition>,
    capacity: usize,
    tag: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, tag: Option<usize>) -> Self {
        Self { data: VecDeque::with_capacity(capacity.min(1 << 16)), capacity: capacity.max(1), tag }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tag(&self) -> Option<usize> {
        self.tag
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    /// Accept transitions from any sub-domain.
    pub fn untag(&mut self) {
        self.tag = None;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(self.tag.map_or(true, |n| n == t.xi.subdomain), "transition from the wrong sub-domain");
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    /// Uniform draw without replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.data.len() < batch_size {
            return Err(Error::UnderfullBuffer { len: self.data.len(), batch: batch_size });
        }
        let idx = rand::seq::index::sample(rng, self.data.len(), batch_size);
        Ok(idx.iter().map(|i| &self.data[i]).collect())
    }
}

/// Dense minibatch, one row per transition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Mat,
    pub act: Mat,
    pub rew: Mat,
    pub next_obs: Mat,
    pub xi: Mat,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition], space: &DomainSpace) -> Result<Self> {
        let n = ts.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let f = feature_dim(ts[0].history.len());
        let d = space.len();
        let mut obs = Vec::with_capacity(n * f);
        let mut next = Vec::with_capacity(n * f);
        let mut xi = Vec::with_capacity(n * d);
        for t in ts {
            t.features_into(&mut obs);
            t.next_features_into(&mut next);
            xi.extend(space.normalize(&t.xi));
        }
        let shape = |v: Vec<f64>, c: usize| Array2::from_shape_vec((n, c), v).map_err(|_| Error::DimensionMismatch { expected: c, got: 0 });
        Ok(Self {
            obs: shape(obs, f)?,
            act: Array2::from_shape_fn((n, ACT_DIM), |(r, c)| ts[r].a[c]),
            rew: Array2::from_shape_fn((n, 1), |(r, _)| ts[r].r),
            next_obs: shape(next, f)?,
            xi: shape(xi, d)?,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Batch {
        let n = n.min(self.len());
        let rows = |m: &Mat| m.slice(ndarray::s![0..n, ..]).to_owned();
        Batch { obs: rows(&self.obs), act: rows(&self.act), rew: rows(&self.rew), next_obs: rows(&self.next_obs), xi: rows(&self.xi) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub warmup: usize,
    pub init_log_alpha: f64,
    pub history_len: usize,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            hidden: vec![64, 64],
            batch_size: 64,
            warmup: 120,
            init_log_alpha: 0.0,
            history_len: 4,
            buffer_capacity: 100_000,
        }
    }
}

/// Networks, targets and optimizers of one local learner.
#[derive(Debug, Clone)]
pub struct SacState {
    pub cfg: SacConfig,
    pub policy: GaussianPolicy,
    pub q1: QFunction,
    pub q2: QFunction,
    pub q1_target: QFunction,
    pub q2_target: QFunction,
    pub policy_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
    log_alpha: Param,
    alpha_opt: Adam,
    pub target_entropy: f64,
    pub updates: u64,
}

/// Reparameterized actor pass shared by the RL and mixing losses.
#[derive(Debug)]
pub struct ActorPass {
    pub bound: Bound,
    pub obs: Var,
    pub sample: PolicySample,
    pub loss: Var,
    pub log_prob_mean: f64,
}

impl SacState {
    pub fn new<R: Rng + ?Sized>(cfg: SacConfig, xi_dim: usize, rng: &mut R) -> Result<Self> {
        let obs = feature_dim(cfg.history_len);
        let policy = GaussianPolicy::new(obs, ACT_DIM, cfg.hidden.clone(), true, rng)?;
        let q1 = QFunction::new(obs, ACT_DIM, xi_dim, cfg.hidden.clone(), rng)?;
        let q2 = QFunction::new(obs, ACT_DIM, xi_dim, cfg.hidden.clone(), rng)?;
        let lr = cfg.lr;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            policy_opt: Adam::new(lr),
            q1_opt: Adam::new(lr),
            q2_opt: Adam::new(lr),
            log_alpha: Param::new("log_alpha", Array2::from_elem((1, 1), cfg.init_log_alpha)),
            alpha_opt: Adam::new(lr),
            target_entropy: -(ACT_DIM as f64),
            updates: 0,
            cfg,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value[[0, 0]].exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha.value[[0, 0]]
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.log_alpha.value[[0, 0]] = v;
    }

    /// Twin-minimum critic value, no gradients.
    pub fn q_min(&self, obs: &Mat, act: &Mat, xi: &Mat) -> Result<Mat> {
        let a = self.q1.infer(obs.view(), act.view(), xi.view())?;
        let b = self.q2.infer(obs.view(), act.view(), xi.view())?;
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|x, y| x.min(*y)))
    }

    /// Overwrite both critics and both targets with `src`'s and restart the
    /// critic optimizers.
    pub fn copy_critics_from(&mut self, src: &SacState) {
        self.q1.copy_from(&src.q1);
        self.q2.copy_from(&src.q2);
        self.q1_target.copy_from(&src.q1_target);
        self.q2_target.copy_from(&src.q2_target);
        self.q1_opt.reset();
        self.q2_opt.reset();
    }

    /// Twin-Q temporal-difference step followed by the Polyak target update.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        // Episodes end only by the time limit, so every transition bootstraps.
        let (next_act, next_logp) = self.policy.sample_action(batch.next_obs.view(), rng)?;
        let qt1 = self.q1_target.infer(batch.next_obs.view(), next_act.view(), batch.xi.view())?;
        let qt2 = self.q2_target.infer(batch.next_obs.view(), next_act.view(), batch.xi.view())?;
        let alpha = self.alpha();
        let gamma = self.cfg.gamma;
        let mut y = batch.rew.clone();
        for r in 0..y.nrows() {
            let soft = qt1[[r, 0]].min(qt2[[r, 0]]) - alpha * next_logp[r];
            y[[r, 0]] += gamma * soft;
        }

        let mut tape = Tape::new();
        let b1 = self.q1.net.bind(&mut tape, true);
        let b2 = self.q2.net.bind(&mut tape, true);
        let obs = tape.constant(batch.obs.clone());
        let act = tape.constant(batch.act.clone());
        let xi = tape.constant(batch.xi.clone());
        let target = tape.constant(y);
        let mut parts = Vec::with_capacity(2);
        for (q, b) in [(&self.q1, &b1), (&self.q2, &b2)] {
            let v = q.forward(&mut tape, b, obs, act, xi)?;
            let d = tape.sub(v, target);
            let d2 = tape.square(d);
            parts.push(tape.mean(d2));
        }
        let loss = tape.add(parts[0], parts[1]);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFiniteLoss("critic update"));
        }
        let value = backprop_and_step(
            &tape,
            loss,
            &mut [
                Trainee { net: &mut self.q1.net, bound: &b1, opt: &mut self.q1_opt },
                Trainee { net: &mut self.q2.net, bound: &b2, opt: &mut self.q2_opt },
            ],
        )?;
        self.q1_target.net.polyak_from(&self.q1.net, self.cfg.tau);
        self.q2_target.net.polyak_from(&self.q2.net, self.cfg.tau);
        Ok(value)
    }

    /// Record `E[alpha * log pi(a|s) - min Q(s, a)]` on `tape` with the
    /// critics frozen.
    pub fn actor_rl_loss<R: Rng + ?Sized>(&self, tape: &mut Tape, batch: &Batch, rng: &mut R) -> Result<ActorPass> {
        let q1b = self.q1.net.bind(tape, false);
        let q2b = self.q2.net.bind(tape, false);
        let xi = tape.constant(batch.xi.clone());
        self.actor_loss_with(tape, batch, rng, |tape, obs, act| {
            let v1 = self.q1.forward(tape, &q1b, obs, act, xi)?;
            let v2 = self.q2.forward(tape, &q2b, obs, act, xi)?;
            Ok(tape.min(v1, v2))
        })
    }

    /// Actor loss against an arbitrary differentiable critic `q(obs, act)`.
    pub fn actor_loss_with<R, F>(&self, tape: &mut Tape, batch: &Batch, rng: &mut R, q: F) -> Result<ActorPass>
    where
        R: Rng + ?Sized,
        F: FnOnce(&mut Tape, Var, Var) -> Result<Var>,
    {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let bound = self.policy.net.bind(tape, true);
        let obs = tape.constant(batch.obs.clone());
        let (mean, log_std) = self.policy.dist(tape, &bound, obs)?;
        let noise = Array2::from_shape_fn((batch.len(), ACT_DIM), |_| StandardNormal.sample(rng));
        let sample = self.policy.rsample(tape, mean, log_std, noise);
        let value = q(tape, obs, sample.action)?;
        let ent = tape.scale(sample.log_prob, self.alpha());
        let per_row = tape.sub(ent, value);
        let loss = tape.mean(per_row);
        let log_prob_mean = tape.value(sample.log_prob).mean().unwrap_or(0.0);
        Ok(ActorPass { bound, obs, sample, loss, log_prob_mean })
    }

    /// One optimizer step on the policy from a loss recorded on `tape`.
    pub fn policy_step(&mut self, tape: &Tape, loss: Var, bound: &Bound) -> Result<f64> {
        let v = backprop_and_step(tape, loss, &mut [Trainee { net: &mut self.policy.net, bound, opt: &mut self.policy_opt }])?;
        self.updates += 1;
        Ok(v)
    }

    /// Move the temperature toward the target entropy `-|A|` given the
    /// batch-mean log-probability of fresh policy samples.
    pub fn temperature_update(&mut self, log_prob_mean: f64) -> Result<f64> {
        let grad = -(log_prob_mean + self.target_entropy);
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient("log_alpha".into()));
        }
        self.log_alpha.grad[[0, 0]] = grad;
        self.alpha_opt.step(std::slice::from_mut(&mut self.log_alpha));
        Ok(self.alpha())
    }

    pub fn to_checkpoint(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.push_mlp(&format!("{prefix}.policy"), &self.policy.net);
        ck.push_mlp(&format!("{prefix}.q1"), &self.q1.net);
        ck.push_mlp(&format!("{prefix}.q2"), &self.q2.net);
        ck.push_mlp(&format!("{prefix}.q1_target"), &self.q1_target.net);
        ck.push_mlp(&format!("{prefix}.q2_target"), &self.q2_target.net);
        ck.push_scalar(format!("{prefix}.log_alpha"), self.log_alpha());
    }

    pub fn load_checkpoint(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        ck.load_mlp(&format!("{prefix}.policy"), &mut self.policy.net)?;
        ck.load_mlp(&format!("{prefix}.q1"), &mut self.q1.net)?;
        ck.load_mlp(&format!("{prefix}.q2"), &mut self.q2.net)?;
        ck.load_mlp(&format!("{prefix}.q1_target"), &mut self.q1_target.net)?;
        ck.load_mlp(&format!("{prefix}.q2_target"), &mut self.q2_target.net)?;
        self.set_log_alpha(ck.scalar(&format!("{prefix}.log_alpha"))?);
        Ok(())
    }
}

/// Log-probabilities as a column.
pub fn column(v: &Array1<f64>) -> Mat {
    v.clone().insert_axis(ndarray::Axis(1))
}
