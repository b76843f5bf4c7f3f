//! Cyclic sub-domain schedule, per-sub-domain learners, critic hand-off
//! between neighbors and final global distillation.

use std::collections::VecDeque;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Batch, ReplayBuffer, SacConfig, SacState};
use crate::approx::{backprop_and_step, gaussian_kl_node, Adam, Checkpoint, GaussianPolicy, Mat, Tape, Trainee};
use crate::domain::{sample_params, DomainParamVector, DomainSpace, SubDomain};
use crate::envsim::{feature_dim, EnvState, HistoryWindow, Pendulum, Transition, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::mixing::{combined_policy_update, MixingConfig, UpdateStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderMode {
    Cyclic,
    Random,
}

impl FromStr for OrderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(OrderMode::Cyclic),
            "random" => Ok(OrderMode::Random),
            _ => Err(Error::Config { line: 0, msg: format!("unknown order `{s}` (expected cyclic or random)") }),
        }
    }
}

impl OrderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderMode::Cyclic => "cyclic",
            OrderMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    /// Sub-domain index, from 1.
    pub subdomain: usize,
    /// The previous visit's sub-domain, which supplies the mixing policy
    /// and the critic copy.
    pub source: Option<usize>,
    pub no_distill: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub visits: Vec<Visit>,
    pub episodes_per_visit: usize,
}

impl Schedule {
    pub fn order(&self) -> Vec<usize> {
        self.visits.iter().map(|v| v.subdomain).collect()
    }
}

/// One cycle: `[1..N, N..1]`, or a shuffle of the same multiset.
pub fn build_cycle<R: Rng + ?Sized>(n_domains: usize, mode: OrderMode, episodes_per_visit: usize, rng: &mut R) -> Result<Schedule> {
    build_schedule(n_domains, mode, 1, episodes_per_visit, rng)
}

/// `cycles` consecutive cycles. A visit does not mix when it has no
/// predecessor or when its predecessor is the same sub-domain.
pub fn build_schedule<R: Rng + ?Sized>(n_domains: usize, mode: OrderMode, cycles: usize, episodes_per_visit: usize, rng: &mut R) -> Result<Schedule> {
    if n_domains == 0 {
        return Err(Error::NoSubDomains);
    }
    let mut order = Vec::with_capacity(2 * n_domains * cycles);
    for _ in 0..cycles {
        let mut cycle: Vec<usize> = (1..=n_domains).chain((1..=n_domains).rev()).collect();
        if mode == OrderMode::Random {
            cycle.shuffle(rng);
        }
        order.extend(cycle);
    }
    let visits = order
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let source = i.checked_sub(1).map(|j| order[j]);
            Visit { subdomain: n, source, no_distill: source.map_or(true, |s| s == n) }
        })
        .collect();
    Ok(Schedule { visits, episodes_per_visit })
}

/// Deterministic generator for one purpose of one run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_ACT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_MIX: u64 = 3;
/// Streams at or above this are reserved for run-level purposes.
pub const STREAM_RUN: u64 = 1 << 32;
pub const STREAM_GLOBAL_INIT: u64 = STREAM_RUN;
pub const STREAM_DISTILL: u64 = STREAM_RUN + 1;
pub const STREAM_EVAL: u64 = STREAM_RUN + 2;
pub const STREAM_SHUFFLE: u64 = STREAM_RUN + 3;

fn agent_stream(agent: usize, purpose: u64) -> u64 {
    ((agent as u64) << 8) | purpose
}

/// Per-update diagnostics forwarded to observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub samples: u64,
    pub visit: usize,
    pub subdomain: usize,
    pub critic_loss: f64,
    pub stats: UpdateStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    /// Run-wide environment steps after this episode.
    pub samples: u64,
    /// Run-wide episode number, from 1.
    pub episode: u64,
    /// Schedule position from 1; 0 for methods without visits.
    pub visit: usize,
    pub subdomain: usize,
    pub agent: usize,
    pub ret: f64,
    pub updates: usize,
    /// Means over the episode's updates; NaN when there were none.
    pub m_raw: f64,
    pub m_eff: f64,
    pub rl_loss: f64,
    pub mi_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
}

/// Receives training progress.
pub trait Observer {
    fn on_update(&mut self, _rec: &UpdateRecord) -> Result<()> {
        Ok(())
    }

    /// `locals[n - 1]` is the policy currently responsible for sub-domain `n`.
    fn on_episode(&mut self, ev: &EpisodeStats, locals: &[&GaussianPolicy]) -> Result<()>;
}

pub struct NullObserver;

impl Observer for NullObserver {
    fn on_episode(&mut self, _: &EpisodeStats, _: &[&GaussianPolicy]) -> Result<()> {
        Ok(())
    }
}

/// An episode in progress.
#[derive(Debug, Clone)]
pub struct Episode {
    pub xi: DomainParamVector,
    pub state: EnvState,
    window: HistoryWindow,
    pub ret: f64,
    pub done: bool,
    acc: [f64; 7],
    updates: usize,
}

impl Episode {
    fn record(&mut self, critic: f64, s: &UpdateStats) {
        let v = [s.m.raw, s.m.effective, s.rl_loss, s.mi_loss, critic, s.alpha, 0.0];
        for (a, x) in self.acc.iter_mut().zip(v) {
            *a += x;
        }
        self.updates += 1;
    }

    fn means(&self) -> [f64; 6] {
        let k = self.updates as f64;
        std::array::from_fn(|i| if self.updates == 0 { f64::NAN } else { self.acc[i] / k })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepUpdate {
    pub critic_loss: f64,
    pub stats: UpdateStats,
}

/// Learner bound to one sub-domain, with its own replay buffer and
/// random streams.
#[derive(Debug, Clone)]
pub struct LocalAgent {
    /// From 1.
    pub index: usize,
    pub sub: SubDomain,
    pub sac: SacState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    pub samples: u64,
}

impl LocalAgent {
    pub fn new(index: usize, sub: SubDomain, cfg: &SacConfig, xi_dim: usize, seed: u64) -> Result<Self> {
        let sac = SacState::new(cfg.clone(), xi_dim, &mut stream_rng(seed, agent_stream(index, STREAM_INIT)))?;
        Ok(Self {
            index,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, Some(sub.index)),
            sub,
            sac,
            rng: stream_rng(seed, agent_stream(index, STREAM_ACT)),
            env_rng: stream_rng(seed, agent_stream(index, STREAM_ENV)),
            mix_rng: stream_rng(seed, agent_stream(index, STREAM_MIX)),
            samples: 0,
        })
    }

    /// Rebind to another sub-domain, as when assignments are reshuffled.
    /// The replay buffer is kept and from then on holds mixed sub-domains.
    pub fn reassign(&mut self, sub: SubDomain) {
        self.buffer.untag();
        self.sub = sub;
    }

    pub fn warmed_up(&self) -> bool {
        self.buffer.len() >= self.sac.cfg.warmup.max(self.sac.cfg.batch_size)
    }

    pub fn begin_episode(&mut self, env: &Pendulum) -> Result<Episode> {
        let xi = sample_params(&self.sub, &mut self.env_rng);
        let state = env.reset(&xi, &mut self.env_rng)?;
        Ok(Episode { xi, state, window: HistoryWindow::new(self.sac.cfg.history_len), ret: 0.0, done: false, acc: [0.0; 7], updates: 0 })
    }

    /// Act, store the transition and, once warmed up, run the critic update
    /// followed by `policy_update`.
    pub fn step<F>(&mut self, env: &Pendulum, ep: &mut Episode, policy_update: F) -> Result<Option<StepUpdate>>
    where
        F: FnOnce(&mut SacState, &Batch, &mut ChaCha8Rng, &mut ChaCha8Rng) -> Result<UpdateStats>,
    {
        if ep.done {
            return Err(Error::StepAfterDone);
        }
        let s = ep.state.observation();
        let feats = ep.window.features(&s);
        let obs = Array2::from_shape_vec((1, feats.len()), feats).expect("feature row");
        let (act, _) = self.sac.policy.sample_action(obs.view(), &mut self.rng)?;
        let a = [act[[0, 0]]];
        let (next, r, done) = env.step(&ep.state, &a, &ep.xi)?;
        let t = Transition { s, a, r, s_next: next.observation(), done, xi: ep.xi.clone(), history: ep.window.pairs() };
        ep.window.push(s, a);
        ep.state = next;
        ep.ret += r;
        ep.done = done;
        self.buffer.push(t);
        self.samples += 1;
        if !self.warmed_up() {
            return Ok(None);
        }
        let space = env.space();
        let batch = {
            let ts = self.buffer.sample_batch(self.sac.cfg.batch_size, &mut self.rng)?;
            Batch::from_transitions(&ts, space)?
        };
        let critic_loss = self.sac.critic_update(&batch, &mut self.rng)?;
        let stats = policy_update(&mut self.sac, &batch, &mut self.rng, &mut self.mix_rng)?;
        ep.record(critic_loss, &stats);
        Ok(Some(StepUpdate { critic_loss, stats }))
    }
}

/// Summary fields of a finished episode.
pub fn episode_stats(ep: &Episode, samples: u64, episode: u64, visit: usize, agent: &LocalAgent) -> EpisodeStats {
    let [m_raw, m_eff, rl_loss, mi_loss, critic_loss, alpha] = ep.means();
    EpisodeStats { samples, episode, visit, subdomain: agent.sub.index, agent: agent.index, ret: ep.ret, updates: ep.updates, m_raw, m_eff, rl_loss, mi_loss, critic_loss, alpha }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub max_iters: usize,
    pub window: usize,
    pub tol: f64,
    pub steps_per_iter: usize,
    pub batch: usize,
    pub capacity: usize,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { max_iters: 200, window: 10, tol: 1e-3, steps_per_iter: 50, batch: 1024, capacity: 50_000, lr: 3e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sac: SacConfig,
    pub mix: MixingConfig,
    pub episodes_per_visit: usize,
    pub horizon: usize,
    pub order: OrderMode,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { sac: SacConfig::default(), mix: MixingConfig::default(), episodes_per_visit: 15, horizon: 150, order: OrderMode::Cyclic, distill: DistillConfig::default() }
    }
}

/// States gathered by global-policy rollouts, tagged by sub-domain.
#[derive(Debug, Clone)]
pub struct GlobalBuffer {
    rows: VecDeque<(Vec<f64>, usize)>,
    capacity: usize,
}

impl GlobalBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { rows: VecDeque::new(), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, features: Vec<f64>, subdomain: usize) {
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back((features, subdomain));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.rows.iter().map(|(f, n)| (f.as_slice(), *n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    /// Mean loss of each iteration's steps, measured before each step.
    pub losses: Vec<f64>,
    pub converged: bool,
}

impl DistillReport {
    pub fn iterations(&self) -> usize {
        self.losses.len()
    }
}

/// How a rollout picks actions.
pub enum Actions<'a> {
    Mean,
    Sample(&'a mut dyn RngCore),
}

/// One episode with `policy` in `sub`; `visit` sees each step's features.
pub fn rollout<R, F>(policy: &GaussianPolicy, env: &Pendulum, sub: &SubDomain, mut actions: Actions<'_>, env_rng: &mut R, mut visit: F) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]),
{
    let h = history_len_of(policy)?;
    let xi = sample_params(sub, env_rng);
    let mut state = env.reset(&xi, env_rng)?;
    let mut window = HistoryWindow::new(h);
    let mut ret = 0.0;
    loop {
        let s = state.observation();
        let feats = window.features(&s);
        visit(&feats);
        let obs = Array2::from_shape_vec((1, feats.len()), feats).expect("feature row");
        let act = match &mut actions {
            Actions::Mean => policy.mean_action(obs.view())?,
            Actions::Sample(rng) => policy.sample_action(obs.view(), rng)?.0,
        };
        let a = [act[[0, 0]]];
        let (next, r, done) = env.step(&state, &a, &xi)?;
        window.push(s, a);
        state = next;
        ret += r;
        if done {
            return Ok(ret);
        }
    }
}

fn history_len_of(policy: &GaussianPolicy) -> Result<usize> {
    let extra = policy.obs_dim().checked_sub(OBS_DIM).ok_or(Error::DimensionMismatch { expected: OBS_DIM, got: policy.obs_dim() })?;
    if extra % (OBS_DIM + ACT_DIM) != 0 {
        return Err(Error::DimensionMismatch { expected: feature_dim(extra / (OBS_DIM + ACT_DIM)), got: policy.obs_dim() });
    }
    Ok(extra / (OBS_DIM + ACT_DIM))
}

/// Mean deterministic-action return per sub-domain.
pub fn evaluate_policy<R: Rng + ?Sized>(policy: &GaussianPolicy, env: &Pendulum, subs: &[SubDomain], episodes: usize, rng: &mut R) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::IncompleteEpisode { got: 0, expected: 1 });
    }
    subs.iter()
        .map(|sub| {
            let mut total = 0.0;
            for _ in 0..episodes {
                total += rollout(policy, env, sub, Actions::Mean, rng, |_| {})?;
            }
            Ok(total / episodes as f64)
        })
        .collect()
}

/// Minimize `sum_n E_{s tagged n} KL(global(s) || local_n(s))` over states
/// from global-policy rollouts; `locals[n - 1]` serves sub-domain `n`.
#[allow(clippy::too_many_arguments)]
pub fn distill<R: Rng + ?Sized>(global: &mut GaussianPolicy, opt: &mut Adam, locals: &[&GaussianPolicy], subs: &[SubDomain], env: &Pendulum, buffer: &mut GlobalBuffer, cfg: &DistillConfig, rng: &mut R) -> Result<DistillReport> {
    if locals.len() != subs.len() || locals.is_empty() {
        return Err(Error::DimensionMismatch { expected: subs.len(), got: locals.len() });
    }
    let mut act_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut losses = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        for sub in subs {
            let mut rows = Vec::new();
            rollout(global, env, sub, Actions::Sample(&mut act_rng), rng, |f| rows.push(f.to_vec()))?;
            for r in rows {
                buffer.push(r, sub.index);
            }
        }
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_iter {
            total += distill_step(global, opt, locals, buffer, cfg.batch, rng)?;
        }
        losses.push(total / cfg.steps_per_iter.max(1) as f64);
        let i = losses.len() - 1;
        if i >= cfg.window && (losses[i] - losses[i - cfg.window]).abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(DistillReport { losses, converged })
}

/// One optimizer step on a minibatch of `buffer`; returns the loss before
/// the step.
pub fn distill_step<R: Rng + ?Sized>(global: &mut GaussianPolicy, opt: &mut Adam, locals: &[&GaussianPolicy], buffer: &GlobalBuffer, batch: usize, rng: &mut R) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let picks: Vec<usize> = if buffer.len() <= batch { (0..buffer.len()).collect() } else { rand::seq::index::sample(rng, buffer.len(), batch).into_vec() };
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); locals.len()];
    for i in picks {
        let tag = buffer.rows[i].1;
        groups.get_mut(tag.wrapping_sub(1)).ok_or(Error::CursorOverrun(tag))?.push(i);
    }
    let width = global.obs_dim();
    let mut feats = Vec::new();
    let mut tmean = Vec::new();
    let mut tls = Vec::new();
    let mut weights = Vec::new();
    for (n, g) in groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
        let x = Array2::from_shape_fn((g.len(), width), |(r, c)| buffer.rows[g[r]].0[c]);
        let (m, ls) = locals[n].dist_infer(x.view())?;
        feats.extend(x.iter().copied());
        tmean.extend(m.iter().copied());
        tls.extend(ls.iter().copied());
        weights.extend(std::iter::repeat(1.0 / g.len() as f64).take(g.len()));
    }
    let rows = weights.len();
    let a = global.act_dim();
    let shape = |v: Vec<f64>, c: usize| -> Mat { Array2::from_shape_vec((rows, c), v).expect("grouped rows") };
    let mut tape = Tape::new();
    let bound = global.net.bind(&mut tape, true);
    let x = tape.constant(shape(feats, width));
    let (mean, log_std) = global.dist(&mut tape, &bound, x)?;
    let tm = tape.constant(shape(tmean, a));
    let tl = tape.constant(shape(tls, a));
    let kl = gaussian_kl_node(&mut tape, mean, log_std, tm, tl);
    let w = tape.constant(shape(weights, 1));
    let weighted = tape.mul(kl, w);
    let loss = tape.sum(weighted);
    backprop_and_step(&tape, loss, &mut [Trainee { net: &mut global.net, bound: &bound, opt }])
}

/// A complete CPD run over a fixed schedule.
#[derive(Debug, Clone)]
pub struct CpdRun {
    pub cfg: TrainConfig,
    pub env: Pendulum,
    pub agents: Vec<LocalAgent>,
    pub schedule: Schedule,
    cursor: usize,
    pub samples: u64,
    pub episodes: u64,
    pub global: GaussianPolicy,
    global_opt: Adam,
    pub global_buffer: GlobalBuffer,
    seed: u64,
}

impl CpdRun {
    pub fn new(cfg: TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, cycles: usize, seed: u64) -> Result<Self> {
        let xi_dim = space.len();
        let env = Pendulum::new(space, cfg.horizon);
        let schedule = build_schedule(subs.len(), cfg.order, cycles, cfg.episodes_per_visit, &mut stream_rng(seed, STREAM_SHUFFLE))?;
        let agents = subs.into_iter().enumerate().map(|(i, sub)| LocalAgent::new(i + 1, sub, &cfg.sac, xi_dim, seed)).collect::<Result<Vec<_>>>()?;
        let global = GaussianPolicy::new(feature_dim(cfg.sac.history_len), ACT_DIM, cfg.sac.hidden.clone(), true, &mut stream_rng(seed, STREAM_GLOBAL_INIT))?;
        Ok(Self { global_opt: Adam::new(cfg.distill.lr), global_buffer: GlobalBuffer::new(cfg.distill.capacity), cfg, env, agents, schedule, cursor: 0, samples: 0, episodes: 0, global, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn current_visit(&self) -> Visit {
        self.schedule.visits[self.cursor]
    }

    pub fn subdomains(&self) -> Vec<SubDomain> {
        self.agents.iter().map(|a| a.sub.clone()).collect()
    }

    pub fn local_policies(&self) -> Vec<&GaussianPolicy> {
        self.agents.iter().map(|a| &a.sac.policy).collect()
    }

    /// Hand the finished sub-domain's critics to the next one and advance.
    pub fn transition_subdomain(&mut self) -> Result<()> {
        if self.cursor + 1 >= self.schedule.visits.len() {
            return Err(Error::CursorOverrun(self.cursor + 1));
        }
        let from = self.schedule.visits[self.cursor].subdomain - 1;
        let to = self.schedule.visits[self.cursor + 1].subdomain - 1;
        if from != to {
            let src = self.agents[from].sac.clone();
            self.agents[to].sac.copy_critics_from(&src);
        }
        self.cursor += 1;
        Ok(())
    }

    /// Train the current visit's agent for up to `E` episodes, stopping
    /// early once `budget` samples are reached.
    pub fn run_visit(&mut self, budget: u64, obs: &mut dyn Observer) -> Result<Vec<EpisodeStats>> {
        let visit = self.current_visit();
        let cur = visit.subdomain - 1;
        let nbr = match (visit.no_distill, visit.source) {
            (false, Some(s)) => Some(self.agents[s - 1].sac.policy.clone()),
            _ => None,
        };
        let mix = self.cfg.mix;
        let mut out = Vec::with_capacity(self.schedule.episodes_per_visit);
        for _ in 0..self.schedule.episodes_per_visit {
            if self.samples >= budget {
                break;
            }
            let agent = &mut self.agents[cur];
            let mut ep = agent.begin_episode(&self.env)?;
            while !ep.done {
                let upd = agent.step(&self.env, &mut ep, |sac, batch, rng, mix_rng| combined_policy_update(sac, nbr.as_ref(), batch, &mix, rng, mix_rng))?;
                self.samples += 1;
                if let Some(u) = upd {
                    obs.on_update(&UpdateRecord { samples: self.samples, visit: self.cursor + 1, subdomain: visit.subdomain, critic_loss: u.critic_loss, stats: u.stats })?;
                }
            }
            self.episodes += 1;
            let stats = episode_stats(&ep, self.samples, self.episodes, self.cursor + 1, &self.agents[cur]);
            obs.on_episode(&stats, &self.local_policies())?;
            out.push(stats);
        }
        Ok(out)
    }

    /// Visits in schedule order until the budget or the schedule runs out.
    pub fn train(&mut self, budget: u64, obs: &mut dyn Observer) -> Result<()> {
        loop {
            self.run_visit(budget, obs)?;
            if self.samples >= budget || self.cursor + 1 >= self.schedule.visits.len() {
                return Ok(());
            }
            self.transition_subdomain()?;
        }
    }

    /// Distill all locals into the global policy.
    pub fn global_distill(&mut self) -> Result<DistillReport> {
        if let Some(a) = self.agents.iter().find(|a| a.sac.updates == 0) {
            return Err(Error::UntrainedLocal(a.index));
        }
        self.global_buffer.clear();
        let subs = self.subdomains();
        let locals: Vec<GaussianPolicy> = self.agents.iter().map(|a| a.sac.policy.clone()).collect();
        let refs: Vec<&GaussianPolicy> = locals.iter().collect();
        distill(&mut self.global, &mut self.global_opt, &refs, &subs, &self.env, &mut self.global_buffer, &self.cfg.distill, &mut stream_rng(self.seed, STREAM_DISTILL))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for a in &self.agents {
            a.sac.to_checkpoint(&format!("agent{}", a.index), &mut ck);
        }
        ck.push_mlp("global.policy", &self.global.net);
        ck
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{partition, PartitionMethod};
    use proptest::prelude::{prop_assert_eq, proptest};

    fn order(n: usize) -> Vec<usize> {
        build_cycle(n, OrderMode::Cyclic, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().order()
    }

    #[test]
    fn four_domain_cycle() {
        let s = build_cycle(4, OrderMode::Cyclic, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.order(), vec![1, 2, 3, 4, 4, 3, 2, 1]);
        let nd: Vec<usize> = s.visits.iter().enumerate().filter(|(_, v)| v.no_distill).map(|(i, _)| i + 1).collect();
        assert_eq!(nd, vec![1, 5]);
        assert_eq!(s.visits[1].source, Some(1));
        assert_eq!(s.visits[5].source, Some(4));
    }

    #[test]
    fn single_domain_never_mixes() {
        let s = build_cycle(1, OrderMode::Cyclic, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.order(), vec![1, 1]);
        assert!(s.visits.iter().all(|v| v.no_distill));
        assert!(matches!(build_cycle(0, OrderMode::Cyclic, 15, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::NoSubDomains)));
    }

    #[test]
    fn random_order_keeps_visit_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = build_schedule(5, OrderMode::Random, 3, 15, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_schedule(5, OrderMode::Random, 3, 15, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for _ in 0..1000 {
            let s = build_cycle(5, OrderMode::Random, 15, &mut rng).unwrap();
            let mut counts = [0; 5];
            for n in s.order() {
                counts[n - 1] += 1;
            }
            assert_eq!(counts, [2; 5]);
            assert!(s.visits[0].no_distill);
            for w in s.visits.windows(2) {
                assert_eq!(w[1].source, Some(w[0].subdomain));
                assert_eq!(w[1].no_distill, w[0].subdomain == w[1].subdomain);
            }
        }
    }

    proptest! {
        #[test]
        fn cyclic_schedule_repeats_exactly(n in 1usize..=8, k in 1usize..=4) {
            let s = build_schedule(n, OrderMode::Cyclic, k, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let one = order(n);
            prop_assert_eq!(one.len(), 2 * n);
            prop_assert_eq!(s.order(), one.repeat(k));
            for (i, v) in s.visits.iter().enumerate() {
                let pos = i % (2 * n) + 1;
                prop_assert_eq!(v.no_distill, pos == 1 || pos == n + 1);
                prop_assert_eq!(v.source, i.checked_sub(1).map(|j| s.visits[j].subdomain));
            }
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            sac: SacConfig { hidden: vec![16, 16], batch_size: 16, warmup: 32, ..Default::default() },
            episodes_per_visit: 2,
            horizon: 20,
            distill: DistillConfig { max_iters: 5, steps_per_iter: 5, batch: 64, ..Default::default() },
            ..Default::default()
        }
    }

    fn small_run(n: usize, seed: u64) -> CpdRun {
        let space = DomainSpace::pendulum();
        let subs = partition(&space, n, PartitionMethod::Plane, &["gravity".into()]).unwrap();
        CpdRun::new(small_cfg(), space, subs, 2, seed).unwrap()
    }

    fn probes(run: &CpdRun) -> (Mat, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let f = feature_dim(run.cfg.sac.history_len);
        (Array2::from_shape_fn((100, f), |_| rng.gen_range(-1.0..1.0)), Array2::from_shape_fn((100, 1), |_| rng.gen_range(-1.0..1.0)), Array2::from_shape_fn((100, 6), |_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn transition_copies_critics_only() {
        let mut run = small_run(3, 1);
        run.run_visit(u64::MAX, &mut NullObserver).unwrap();
        let policy_before = run.agents[1].sac.policy.clone();
        let mut moved = run.agents[1].sac.clone();
        moved.q1_opt = Adam::new(1.0);
        run.transition_subdomain().unwrap();
        let (o, a, x) = probes(&run);
        let (src, dst) = (&run.agents[0].sac, &run.agents[1].sac);
        for (s, d) in [(&src.q1, &dst.q1), (&src.q2, &dst.q2), (&src.q1_target, &dst.q1_target), (&src.q2_target, &dst.q2_target)] {
            assert_eq!(s.infer(o.view(), a.view(), x.view()).unwrap(), d.infer(o.view(), a.view(), x.view()).unwrap());
        }
        assert_eq!(dst.policy, policy_before);
        assert!(dst.q1_opt.is_fresh() && dst.q2_opt.is_fresh());
        assert_eq!(run.cursor(), 1);
    }

    #[test]
    fn critic_information_follows_the_visit_order() {
        let mut run = small_run(3, 2);
        let (o, a, x) = probes(&run);
        let q3 = run.agents[2].sac.q1.infer(o.view(), a.view(), x.view()).unwrap();
        run.agents[0].sac.q1.net.params_mut()[0].value[[0, 0]] += 10.0;
        let planted = run.agents[0].sac.q1.infer(o.view(), a.view(), x.view()).unwrap();
        run.transition_subdomain().unwrap();
        assert_eq!(run.agents[1].sac.q1.infer(o.view(), a.view(), x.view()).unwrap(), planted);
        assert_eq!(run.agents[2].sac.q1.infer(o.view(), a.view(), x.view()).unwrap(), q3);
    }

    #[test]
    fn self_transition_is_a_no_op() {
        let mut run = small_run(2, 3);
        run.transition_subdomain().unwrap();
        run.run_visit(u64::MAX, &mut NullObserver).unwrap();
        let before = run.agents[1].sac.clone();
        run.transition_subdomain().unwrap();
        assert_eq!(run.current_visit().subdomain, 2);
        assert_eq!(run.agents[1].sac.q1, before.q1);
        assert!(!run.agents[1].sac.q1_opt.is_fresh());
    }

    #[test]
    fn cursor_overrun() {
        let mut run = small_run(1, 0);
        for _ in 0..3 {
            run.transition_subdomain().unwrap();
        }
        assert!(matches!(run.transition_subdomain(), Err(Error::CursorOverrun(4))));
    }

    #[test]
    fn visit_bookkeeping() {
        let mut run = small_run(2, 4);
        let eps = run.run_visit(u64::MAX, &mut NullObserver).unwrap();
        assert_eq!(eps.len(), 2);
        assert_eq!(run.samples, 2 * 20);
        assert_eq!(run.agents[0].buffer.len(), 40);
        assert_eq!(eps[1].samples, 40);
        assert!(eps[0].updates == 0 && eps[1].updates == 40 - 32 + 1);
        assert!(eps.iter().all(|e| e.subdomain == 1 && e.visit == 1));
    }

    #[test]
    fn default_visit_length() {
        let mut cfg = small_cfg();
        cfg.episodes_per_visit = 15;
        cfg.horizon = 150;
        cfg.sac.warmup = usize::MAX;
        let space = DomainSpace::pendulum();
        let subs = partition(&space, 4, PartitionMethod::Plane, &["gravity".into()]).unwrap();
        let mut run = CpdRun::new(cfg, space, subs, 1, 0).unwrap();
        run.run_visit(u64::MAX, &mut NullObserver).unwrap();
        assert_eq!(run.samples, 2250);
    }

    #[test]
    fn no_distill_visit_forces_zero_rate() {
        struct Rates(Vec<f64>);
        impl Observer for Rates {
            fn on_update(&mut self, r: &UpdateRecord) -> Result<()> {
                self.0.push(r.stats.m.effective);
                Ok(())
            }
            fn on_episode(&mut self, _: &EpisodeStats, _: &[&GaussianPolicy]) -> Result<()> {
                Ok(())
            }
        }
        let mut run = small_run(2, 5);
        let mut obs = Rates(Vec::new());
        run.train(u64::MAX, &mut obs).unwrap();
        assert!(!obs.0.is_empty());
        let mut run = small_run(2, 5);
        let mut first = Rates(Vec::new());
        run.run_visit(u64::MAX, &mut first).unwrap();
        assert!(first.0.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn no_distill_matches_pure_rl_bitwise() {
        let mut a = small_run(2, 6);
        assert!(a.current_visit().no_distill);
        a.run_visit(u64::MAX, &mut NullObserver).unwrap();

        let b = small_run(2, 6);
        let mut agent = b.agents[0].clone();
        for _ in 0..b.cfg.episodes_per_visit {
            let mut ep = agent.begin_episode(&b.env).unwrap();
            while !ep.done {
                agent
                    .step(&b.env, &mut ep, |sac, batch, rng, _| crate::mixing::rl_policy_update(sac, batch, rng))
                    .unwrap();
            }
        }
        assert_eq!(a.agents[0].sac.policy, agent.sac.policy);
        assert_eq!(a.agents[0].sac.q2, agent.sac.q2);
        assert_eq!(a.agents[0].sac.log_alpha(), agent.sac.log_alpha());
    }

    #[test]
    fn budget_stops_mid_visit() {
        let mut run = small_run(2, 7);
        run.train(50, &mut NullObserver).unwrap();
        assert_eq!(run.samples, 60);
        assert_eq!(run.cursor(), 1);
    }

    #[test]
    fn distill_identity_has_zero_loss() {
        let mut run = small_run(1, 8);
        run.train(u64::MAX, &mut NullObserver).unwrap();
        let local = run.agents[0].sac.policy.clone();
        run.global = local.clone();
        let mut buf = GlobalBuffer::new(1000);
        let subs = run.subdomains();
        let cfg = DistillConfig { max_iters: 1, steps_per_iter: 1, ..run.cfg.distill };
        let report = distill(&mut run.global, &mut Adam::new(1e-3), &[&local], &subs, &run.env, &mut buf, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(report.losses[0].abs() < 1e-12, "{:?}", report.losses);
    }

    #[test]
    fn identical_locals_are_recovered() {
        let run = small_run(2, 9);
        let target = GaussianPolicy::new(feature_dim(4), 1, vec![16, 16], true, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let mut target = target;
        // A non-trivial target: bias the mean output.
        let last = target.net.n_layers() - 1;
        target.net.params_mut()[2 * last + 1].value[[0, 0]] = 0.6;
        let mut global = run.global.clone();
        let cfg = DistillConfig { max_iters: 150, steps_per_iter: 20, batch: 128, lr: 3e-3, tol: 1e-9, ..Default::default() };
        let mut buf = GlobalBuffer::new(cfg.capacity);
        distill(&mut global, &mut Adam::new(cfg.lr), &[&target, &target], &run.subdomains(), &run.env, &mut buf, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let visited: Vec<f64> = buf.iter().step_by(buf.len() / 100).take(100).flat_map(|(f, _)| f.to_vec()).collect();
        let o = Array2::from_shape_vec((100, feature_dim(4)), visited).unwrap();
        let g = global.mean_action(o.view()).unwrap();
        let t = target.mean_action(o.view()).unwrap();
        let gap = (&g - &t).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(gap < 0.05, "gap {gap}");
    }

    #[test]
    fn distill_step_uses_matching_local_only() {
        let run = small_run(2, 10);
        let a = run.agents[0].sac.policy.clone();
        let mut b = a.clone();
        let last = b.net.n_layers() - 1;
        b.net.params_mut()[2 * last + 1].value[[0, 0]] += 1.0;
        let mut buf = GlobalBuffer::new(100);
        let f = feature_dim(4);
        for i in 0..20 {
            buf.push(vec![0.1 * i as f64; f], 2);
        }
        // Global equals local 1 but every state is tagged 2.
        let mut g = a.clone();
        let loss = distill_step(&mut g, &mut Adam::new(1e-3), &[&a, &b], &buf, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(loss > 0.1);
        let mut g = b.clone();
        let loss = distill_step(&mut g, &mut Adam::new(1e-3), &[&a, &b], &buf, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn distillation_leaves_locals_alone() {
        let mut run = small_run(2, 11);
        run.train(u64::MAX, &mut NullObserver).unwrap();
        let before: Vec<u64> = run.agents.iter().map(|a| a.sac.policy.net.checksum()).collect();
        run.global_distill().unwrap();
        let after: Vec<u64> = run.agents.iter().map(|a| a.sac.policy.net.checksum()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn untrained_locals_refuse_distillation() {
        let mut run = small_run(2, 12);
        assert!(matches!(run.global_distill(), Err(Error::UntrainedLocal(1))));
    }

    #[test]
    fn evaluation_is_reproducible() {
        let run = small_run(3, 13);
        let subs = run.subdomains();
        let a = evaluate_policy(&run.agents[0].sac.policy, &run.env, &subs, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = evaluate_policy(&run.agents[0].sac.policy, &run.env, &subs, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut a = small_run(2, 14);
        let mut b = small_run(2, 14);
        a.train(u64::MAX, &mut NullObserver).unwrap();
        b.train(u64::MAX, &mut NullObserver).unwrap();
        assert_eq!(a.checkpoint(), b.checkpoint());
    }
}
