//! Comparison methods sharing the learner, mixing and distillation code:
//! CPD and its ablations, SAC-DR, P2PDRL, DnC and DiDoR.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::approx::{gaussian_kl_node, Adam, Checkpoint, GaussianPolicy, Tape};
use crate::cpd::{distill, episode_stats, evaluate_policy, stream_rng, CpdRun, DistillReport, EpisodeStats, GlobalBuffer, LocalAgent, Observer, OrderMode, TrainConfig, UpdateRecord, STREAM_DISTILL, STREAM_EVAL, STREAM_GLOBAL_INIT, STREAM_SHUFFLE};
use crate::domain::{DomainSpace, SubDomain};
use crate::envsim::{feature_dim, Pendulum, ACT_DIM};
use crate::error::{Error, Result};
use crate::mixing::{rl_policy_update, MixMode, MixtureRate, UpdateStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Cpd,
    CpdM0,
    CpdM1,
    CpdRand,
    SacDr,
    P2pdrl,
    Dnc,
    Didor,
}

impl Method {
    pub const ALL: [Method; 8] = [Method::Cpd, Method::CpdM0, Method::CpdM1, Method::CpdRand, Method::SacDr, Method::P2pdrl, Method::Dnc, Method::Didor];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cpd => "CPD",
            Method::CpdM0 => "CPD_m0",
            Method::CpdM1 => "CPD_m1",
            Method::CpdRand => "CPD_rand",
            Method::SacDr => "SAC_DR",
            Method::P2pdrl => "P2PDRL",
            Method::Dnc => "DnC",
            Method::Didor => "DiDoR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config { line: 0, msg: format!("unknown method `{s}`") })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    /// Weight of each pairwise KL term (P2PDRL).
    pub p2p_weight: f64,
    /// Episodes per agent between sub-domain reshuffles (P2PDRL); 0 means `E`.
    pub reshuffle_episodes: usize,
    /// Episodes, summed over agents, between distillations (DnC); 0 means `2 N E`.
    pub dnc_period: usize,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self { method, p2p_weight: 0.01, reshuffle_episodes: 0, dnc_period: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p2p_weight >= 0.0 && self.p2p_weight.is_finite()) {
            return Err(Error::Config { line: 0, msg: format!("p2p_weight must be a non-negative number, got {}", self.p2p_weight) });
        }
        Ok(())
    }
}

/// Structural update counts gathered while a method runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostTally {
    /// Steps with at least one gradient update; lockstep rounds count once.
    pub update_steps: u64,
    pub distill_terms: u64,
    pub max_terms_per_step: usize,
    pub mixes_during: u64,
    pub mix_at_end: bool,
}

/// Table-style summary of [`CostTally`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub dist_per_step: usize,
    pub mix_per_iteration: bool,
    pub mix_at_end: bool,
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yn = |b: bool| if b { "yes" } else { "no" };
        write!(f, "dist/step={} mix/iteration={} mix/end={}", self.dist_per_step, yn(self.mix_per_iteration), yn(self.mix_at_end))
    }
}

pub fn count_update_costs(t: &CostTally) -> CostReport {
    CostReport { dist_per_step: t.max_terms_per_step, mix_per_iteration: t.mixes_during > 0, mix_at_end: t.mix_at_end }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    /// The single deployable policy.
    pub final_policy: GaussianPolicy,
    /// Local policies at the end of training, ordered by the sub-domain they serve.
    pub locals: Vec<GaussianPolicy>,
    pub subs: Vec<SubDomain>,
    pub costs: CostTally,
    pub distill: Option<DistillReport>,
    pub samples: u64,
    pub checkpoint: Checkpoint,
}

struct Counting<'a> {
    inner: &'a mut dyn Observer,
    tally: CostTally,
}

impl Observer for Counting<'_> {
    fn on_update(&mut self, rec: &UpdateRecord) -> Result<()> {
        self.tally.update_steps += 1;
        self.tally.distill_terms += rec.stats.distill_terms as u64;
        self.tally.max_terms_per_step = self.tally.max_terms_per_step.max(rec.stats.distill_terms);
        self.inner.on_update(rec)
    }

    fn on_episode(&mut self, ev: &EpisodeStats, locals: &[&GaussianPolicy]) -> Result<()> {
        self.inner.on_episode(ev, locals)
    }
}

fn cycles_for(budget: u64, n: usize, cfg: &TrainConfig) -> usize {
    let per_cycle = (2 * n * cfg.episodes_per_visit * cfg.horizon) as u64;
    (budget.div_ceil(per_cycle.max(1)) as usize).max(1)
}

/// Run `spec` to `budget` environment steps.
pub fn run_method(spec: &MethodSpec, cfg: &TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, budget: u64, seed: u64, obs: &mut dyn Observer) -> Result<RunOutput> {
    spec.validate()?;
    if subs.is_empty() {
        return Err(Error::NoSubDomains);
    }
    match spec.method {
        Method::Cpd => run_cpd_variant(cfg, space, subs, MixMode::Opt, OrderMode::Cyclic, budget, seed, obs),
        Method::CpdM0 => run_cpd_variant(cfg, space, subs, MixMode::Zero, OrderMode::Cyclic, budget, seed, obs),
        Method::CpdM1 => run_cpd_variant(cfg, space, subs, MixMode::One, OrderMode::Cyclic, budget, seed, obs),
        Method::CpdRand => run_cpd_variant(cfg, space, subs, MixMode::Opt, OrderMode::Random, budget, seed, obs),
        Method::SacDr => run_sac_dr(cfg, space, budget, seed, obs),
        Method::P2pdrl => run_p2pdrl(spec, cfg, space, subs, budget, seed, obs),
        Method::Dnc => run_dnc(spec, cfg, space, subs, budget, seed, obs),
        Method::Didor => run_didor(cfg, space, subs, budget, seed, obs),
    }
}

/// CPD with the rate and visit order overridden; update counts match CPD.
#[allow(clippy::too_many_arguments)]
pub fn run_cpd_variant(cfg: &TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, m_mode: MixMode, order: OrderMode, budget: u64, seed: u64, obs: &mut dyn Observer) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.mix.mode = m_mode;
    cfg.order = order;
    let cycles = cycles_for(budget, subs.len(), &cfg);
    let method = match (m_mode, order) {
        (MixMode::Opt, OrderMode::Cyclic) => Method::Cpd,
        (MixMode::Zero, _) => Method::CpdM0,
        (MixMode::One, _) => Method::CpdM1,
        (MixMode::Opt, OrderMode::Random) => Method::CpdRand,
    };
    let mut run = CpdRun::new(cfg, space, subs, cycles, seed)?;
    let mut counting = Counting { inner: obs, tally: CostTally::default() };
    run.train(budget, &mut counting)?;
    let report = run.global_distill()?;
    let mut tally = counting.tally;
    tally.mix_at_end = true;
    Ok(RunOutput { method, final_policy: run.global.clone(), locals: run.local_policies().into_iter().cloned().collect(), subs: run.subdomains(), costs: tally, distill: Some(report), samples: run.samples, checkpoint: run.checkpoint() })
}

/// One learner on the full range; never mixes or distills.
pub fn run_sac_dr(cfg: &TrainConfig, space: DomainSpace, budget: u64, seed: u64, obs: &mut dyn Observer) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.mix.mode = MixMode::Zero;
    cfg.order = OrderMode::Cyclic;
    let full = space.full();
    let cycles = cycles_for(budget, 1, &cfg);
    let mut run = CpdRun::new(cfg, space, vec![full], cycles, seed)?;
    let mut counting = Counting { inner: obs, tally: CostTally::default() };
    run.train(budget, &mut counting)?;
    let policy = run.agents[0].sac.policy.clone();
    let mut ck = run.checkpoint();
    ck.tensors.retain(|t| !t.name.starts_with("global."));
    ck.push_mlp("global.policy", &policy.net);
    Ok(RunOutput { method: Method::SacDr, locals: vec![policy.clone()], final_policy: policy, subs: run.subdomains(), costs: counting.tally, distill: None, samples: run.samples, checkpoint: ck })
}

/// Agents acting side by side, one environment step each per round.
#[derive(Debug, Clone)]
pub struct ParallelRun {
    pub cfg: TrainConfig,
    pub env: Pendulum,
    pub agents: Vec<LocalAgent>,
    /// Sub-domains in index order.
    pub subs: Vec<SubDomain>,
    pub samples: u64,
    pub episodes: u64,
    pub tally: CostTally,
}

/// How agents in a [`ParallelRun`] update their policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coupling {
    Independent,
    /// `weight * sum_{j != i} KL(pi_i || pi_j)` added to each agent's loss.
    Pairwise(f64),
}

impl ParallelRun {
    /// `agent_seeds[i]` drives agent `i + 1`.
    pub fn new(cfg: TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, agent_seeds: &[u64]) -> Result<Self> {
        if subs.is_empty() {
            return Err(Error::NoSubDomains);
        }
        if agent_seeds.len() != subs.len() {
            return Err(Error::DimensionMismatch { expected: subs.len(), got: agent_seeds.len() });
        }
        let xi_dim = space.len();
        let agents = subs.iter().zip(agent_seeds).enumerate().map(|(i, (sub, &seed))| LocalAgent::new(i + 1, sub.clone(), &cfg.sac, xi_dim, seed)).collect::<Result<Vec<_>>>()?;
        Ok(Self { env: Pendulum::new(space, cfg.horizon), cfg, agents, subs, samples: 0, episodes: 0, tally: CostTally::default() })
    }

    /// Policies ordered by the sub-domain they currently serve.
    pub fn policies_by_subdomain(&self) -> Vec<&GaussianPolicy> {
        let mut out: Vec<&GaussianPolicy> = self.agents.iter().map(|a| &a.sac.policy).collect();
        for a in &self.agents {
            out[a.sub.index - 1] = &a.sac.policy;
        }
        out
    }

    /// One episode per agent, stepped in lockstep.
    pub fn round(&mut self, coupling: Coupling, obs: &mut dyn Observer) -> Result<()> {
        let n = self.agents.len();
        let mut eps = self.agents.iter_mut().map(|a| a.begin_episode(&self.env)).collect::<Result<Vec<_>>>()?;
        for _ in 0..self.cfg.horizon {
            let peers: Vec<GaussianPolicy> = match coupling {
                Coupling::Pairwise(_) if n > 1 => self.agents.iter().map(|a| a.sac.policy.clone()).collect(),
                _ => Vec::new(),
            };
            let mut step_terms = 0;
            let mut updated = false;
            for (i, (agent, ep)) in self.agents.iter_mut().zip(eps.iter_mut()).enumerate() {
                let upd = agent.step(&self.env, ep, |sac, batch, rng, _| match coupling {
                    Coupling::Pairwise(w) if n > 1 => pairwise_update(sac, batch, &peers, i, w, rng),
                    _ => rl_policy_update(sac, batch, rng),
                })?;
                self.samples += 1;
                if let Some(u) = upd {
                    step_terms += u.stats.distill_terms;
                    updated = true;
                    obs.on_update(&UpdateRecord { samples: self.samples, visit: 0, subdomain: agent.sub.index, critic_loss: u.critic_loss, stats: u.stats })?;
                }
            }
            self.tally.update_steps += u64::from(updated);
            self.tally.distill_terms += step_terms as u64;
            self.tally.max_terms_per_step = self.tally.max_terms_per_step.max(step_terms);
        }
        for (i, ep) in eps.iter().enumerate() {
            self.episodes += 1;
            let stats = episode_stats(ep, self.samples, self.episodes, 0, &self.agents[i]);
            obs.on_episode(&stats, &self.policies_by_subdomain())?;
        }
        Ok(())
    }

    /// Rounds until the budget is reached or `rounds` have run.
    pub fn rounds(&mut self, rounds: usize, budget: u64, coupling: Coupling, obs: &mut dyn Observer) -> Result<usize> {
        let mut done = 0;
        while done < rounds && self.samples < budget {
            self.round(coupling, obs)?;
            done += 1;
        }
        Ok(done)
    }

    fn checkpoint(&self, global: &GaussianPolicy) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for a in &self.agents {
            a.sac.to_checkpoint(&format!("agent{}", a.index), &mut ck);
        }
        ck.push_mlp("global.policy", &global.net);
        ck
    }
}

/// RL loss plus weighted closed-form KL to every other agent's policy on
/// the batch states.
pub fn pairwise_update<R: rand::Rng + ?Sized>(sac: &mut crate::agent::SacState, batch: &crate::agent::Batch, peers: &[GaussianPolicy], me: usize, weight: f64, rng: &mut R) -> Result<UpdateStats> {
    let mut tape = Tape::new();
    let pass = sac.actor_rl_loss(&mut tape, batch, rng)?;
    let rl_loss = tape.scalar(pass.loss);
    let mut loss = pass.loss;
    let mut kl_total = 0.0;
    let mut terms = 0;
    for (_, peer) in peers.iter().enumerate().filter(|(j, _)| *j != me) {
        let (pm, pl) = peer.dist_infer(batch.obs.view())?;
        let pm = tape.constant(pm);
        let pl = tape.constant(pl);
        let kl = gaussian_kl_node(&mut tape, pass.sample.mean, pass.sample.log_std, pm, pl);
        let kl = tape.mean(kl);
        let term = tape.scale(kl, weight);
        kl_total += tape.scalar(term);
        loss = tape.add(loss, term);
        terms += 1;
    }
    sac.policy_step(&tape, loss, &pass.bound)?;
    let alpha = sac.temperature_update(pass.log_prob_mean)?;
    Ok(UpdateStats { m: MixtureRate::constant(0.0), rl_loss, mi_loss: kl_total, alpha, distill_terms: terms })
}

fn parallel(cfg: &TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, seed: u64) -> Result<ParallelRun> {
    let seeds = vec![seed; subs.len()];
    ParallelRun::new(cfg.clone(), space, subs, &seeds)
}

fn fresh_global(cfg: &TrainConfig, seed: u64) -> Result<GaussianPolicy> {
    GaussianPolicy::new(feature_dim(cfg.sac.history_len), ACT_DIM, cfg.sac.hidden.clone(), true, &mut stream_rng(seed, STREAM_GLOBAL_INIT))
}

/// Mutual pairwise distillation with periodic sub-domain reshuffles; the
/// best local policy on the full set of sub-domains is kept.
pub fn run_p2pdrl(spec: &MethodSpec, cfg: &TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, budget: u64, seed: u64, obs: &mut dyn Observer) -> Result<RunOutput> {
    let mut run = parallel(cfg, space, subs, seed)?;
    let period = if spec.reshuffle_episodes == 0 { cfg.episodes_per_visit } else { spec.reshuffle_episodes };
    let mut shuffle_rng = stream_rng(seed, STREAM_SHUFFLE);
    while run.samples < budget {
        run.rounds(period, budget, Coupling::Pairwise(spec.p2p_weight), obs)?;
        if run.samples < budget {
            reshuffle(&mut run, &mut shuffle_rng);
        }
    }
    let mut eval_rng = stream_rng(seed, STREAM_EVAL + 1);
    let mut best: Option<(f64, usize)> = None;
    for (i, a) in run.agents.iter().enumerate() {
        let r = evaluate_policy(&a.sac.policy, &run.env, &run.subs, 3, &mut eval_rng)?;
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        if best.map_or(true, |(b, _)| mean > b) {
            best = Some((mean, i));
        }
    }
    let policy = run.agents[best.map_or(0, |b| b.1)].sac.policy.clone();
    Ok(RunOutput { method: Method::P2pdrl, checkpoint: run.checkpoint(&policy), locals: run.policies_by_subdomain().into_iter().cloned().collect(), final_policy: policy, subs: run.subs.clone(), costs: run.tally, distill: None, samples: run.samples })
}

/// Random permutation of sub-domain assignments.
pub fn reshuffle<R: rand::Rng + ?Sized>(run: &mut ParallelRun, rng: &mut R) {
    let mut perm: Vec<usize> = (0..run.subs.len()).collect();
    perm.shuffle(rng);
    for (agent, &p) in run.agents.iter_mut().zip(&perm) {
        agent.reassign(run.subs[p].clone());
    }
}

fn distill_parallel(run: &ParallelRun, global: &mut GaussianPolicy, opt: &mut Adam, buffer: &mut GlobalBuffer, rng: &mut rand_chacha::ChaCha8Rng) -> Result<DistillReport> {
    if let Some(a) = run.agents.iter().find(|a| a.sac.updates == 0) {
        return Err(Error::UntrainedLocal(a.index));
    }
    buffer.clear();
    let locals = run.policies_by_subdomain().into_iter().cloned().collect::<Vec<_>>();
    let refs: Vec<&GaussianPolicy> = locals.iter().collect();
    distill(global, opt, &refs, &run.subs, &run.env, buffer, &run.cfg.distill, rng)
}

/// Independent RL learners, periodically distilled into a global policy
/// which then re-initializes every local policy.
pub fn run_dnc(spec: &MethodSpec, cfg: &TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, budget: u64, seed: u64, obs: &mut dyn Observer) -> Result<RunOutput> {
    let n = subs.len();
    let mut run = parallel(cfg, space, subs, seed)?;
    let period = if spec.dnc_period == 0 { 2 * n * cfg.episodes_per_visit } else { spec.dnc_period };
    let rounds_per_iter = period.div_ceil(n).max(1);
    let mut global = fresh_global(cfg, seed)?;
    let mut opt = Adam::new(cfg.distill.lr);
    let mut buffer = GlobalBuffer::new(cfg.distill.capacity);
    let mut rng = stream_rng(seed, STREAM_DISTILL);
    let mut report;
    loop {
        run.rounds(rounds_per_iter, budget, Coupling::Independent, obs)?;
        report = distill_parallel(&run, &mut global, &mut opt, &mut buffer, &mut rng)?;
        if run.samples >= budget {
            break;
        }
        run.tally.mixes_during += 1;
        for a in &mut run.agents {
            a.sac.policy.copy_from(&global);
            a.sac.policy_opt.reset();
        }
    }
    run.tally.mix_at_end = true;
    Ok(RunOutput { method: Method::Dnc, checkpoint: run.checkpoint(&global), locals: run.policies_by_subdomain().into_iter().cloned().collect(), final_policy: global, subs: run.subs.clone(), costs: run.tally, distill: Some(report), samples: run.samples })
}

/// Fully independent learners and one final distillation.
pub fn run_didor(cfg: &TrainConfig, space: DomainSpace, subs: Vec<SubDomain>, budget: u64, seed: u64, obs: &mut dyn Observer) -> Result<RunOutput> {
    let mut run = parallel(cfg, space, subs, seed)?;
    run.rounds(usize::MAX, budget, Coupling::Independent, obs)?;
    let mut global = fresh_global(cfg, seed)?;
    let report = distill_parallel(&run, &mut global, &mut Adam::new(cfg.distill.lr), &mut GlobalBuffer::new(cfg.distill.capacity), &mut stream_rng(seed, STREAM_DISTILL))?;
    run.tally.mix_at_end = true;
    Ok(RunOutput { method: Method::Didor, checkpoint: run.checkpoint(&global), locals: run.policies_by_subdomain().into_iter().cloned().collect(), final_policy: global, subs: run.subs.clone(), costs: run.tally, distill: Some(report), samples: run.samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::SacConfig;
    use crate::cpd::{DistillConfig, NullObserver};
    use crate::domain::{partition, PartitionMethod};

    fn cfg() -> TrainConfig {
        TrainConfig {
            sac: SacConfig { hidden: vec![8, 8], batch_size: 8, warmup: 16, ..Default::default() },
            episodes_per_visit: 2,
            horizon: 10,
            distill: DistillConfig { max_iters: 3, steps_per_iter: 2, batch: 32, ..Default::default() },
            ..Default::default()
        }
    }

    fn subs(n: usize) -> (DomainSpace, Vec<SubDomain>) {
        let space = DomainSpace::pendulum();
        let subs = partition(&space, n, PartitionMethod::Plane, &["gravity".into()]).unwrap();
        (space, subs)
    }

    fn run(m: Method, n: usize, budget: u64, seed: u64) -> RunOutput {
        let (space, subs) = subs(n);
        run_method(&MethodSpec::new(m), &cfg(), space, subs, budget, seed, &mut NullObserver).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("PPO".parse::<Method>().is_err());
    }

    #[test]
    fn structural_costs() {
        let expect = |m: Method, d: usize, it: bool, end: bool| {
            let r = count_update_costs(&run(m, 4, 400, 1).costs);
            assert_eq!(r, CostReport { dist_per_step: d, mix_per_iteration: it, mix_at_end: end }, "{m}");
        };
        expect(Method::Cpd, 1, false, true);
        expect(Method::SacDr, 0, false, false);
        expect(Method::P2pdrl, 12, false, false);
        expect(Method::Didor, 0, false, true);
        let (space, s) = subs(4);
        let spec = MethodSpec { dnc_period: 8, ..MethodSpec::new(Method::Dnc) };
        let out = run_method(&spec, &cfg(), space, s, 400, 1, &mut NullObserver).unwrap();
        assert_eq!(count_update_costs(&out.costs), CostReport { dist_per_step: 0, mix_per_iteration: true, mix_at_end: true });
    }

    #[test]
    fn sac_dr_is_cpd_with_one_unmixed_domain() {
        let a = run(Method::SacDr, 4, 200, 3);
        let (space, _) = subs(1);
        let full = space.full();
        let b = run_cpd_variant(&cfg(), space, vec![full], MixMode::Zero, OrderMode::Cyclic, 200, 3, &mut NullObserver).unwrap();
        let pick = |o: &RunOutput| o.checkpoint.tensors.iter().filter(|t| t.name.starts_with("agent1.")).cloned().collect::<Vec<_>>();
        assert_eq!(pick(&a), pick(&b));
        assert_eq!(a.costs.update_steps, 200 - 15);
    }

    #[test]
    fn budgets_match_across_methods() {
        for m in Method::ALL {
            assert_eq!(run(m, 2, 200, 0).samples, 200, "{m}");
        }
    }

    #[test]
    fn p2pdrl_single_agent_has_no_pairs() {
        let out = run(Method::P2pdrl, 1, 100, 0);
        assert_eq!(out.costs.max_terms_per_step, 0);
    }

    #[test]
    fn reshuffle_is_reproducible_and_a_permutation() {
        let (space, s) = subs(4);
        let mut a = parallel(&cfg(), space.clone(), s.clone(), 0).unwrap();
        let mut b = parallel(&cfg(), space, s, 0).unwrap();
        reshuffle(&mut a, &mut stream_rng(5, 0));
        reshuffle(&mut b, &mut stream_rng(5, 0));
        let idx = |r: &ParallelRun| r.agents.iter().map(|a| a.sub.index).collect::<Vec<_>>();
        assert_eq!(idx(&a), idx(&b));
        let mut sorted = idx(&a);
        sorted.sort();
        assert_eq!(sorted, vec![1, 2, 3, 4]);
    }

    #[test]
    fn dnc_reinitializes_locals_from_global() {
        let (space, s) = subs(2);
        let c = cfg();
        let mut run = parallel(&c, space, s, 0).unwrap();
        run.rounds(2, u64::MAX, Coupling::Independent, &mut NullObserver).unwrap();
        let mut global = fresh_global(&c, 0).unwrap();
        distill_parallel(&run, &mut global, &mut Adam::new(1e-3), &mut GlobalBuffer::new(100), &mut stream_rng(0, 1)).unwrap();
        for a in &mut run.agents {
            a.sac.policy.copy_from(&global);
        }
        let probe = ndarray::Array2::from_shape_fn((100, feature_dim(4)), |(r, c)| ((r * 7 + c) as f64 * 0.37).sin());
        for a in &run.agents {
            assert_eq!(a.sac.policy.dist_infer(probe.view()).unwrap(), global.dist_infer(probe.view()).unwrap());
        }
    }

    #[test]
    fn dnc_with_one_iteration_is_didor() {
        let (space, s) = subs(2);
        let spec = MethodSpec { dnc_period: 1_000_000, ..MethodSpec::new(Method::Dnc) };
        let a = run_method(&spec, &cfg(), space.clone(), s.clone(), 200, 4, &mut NullObserver).unwrap();
        let b = run_method(&MethodSpec::new(Method::Didor), &cfg(), space, s, 200, 4, &mut NullObserver).unwrap();
        assert_eq!(a.final_policy, b.final_policy);
        assert_eq!(a.costs.mixes_during, 0);
    }

    #[test]
    fn didor_agents_are_independent() {
        let (space, s) = subs(2);
        let mut a = ParallelRun::new(cfg(), space.clone(), s.clone(), &[1, 7]).unwrap();
        let mut b = ParallelRun::new(cfg(), space, s, &[2, 7]).unwrap();
        a.rounds(6, u64::MAX, Coupling::Independent, &mut NullObserver).unwrap();
        b.rounds(6, u64::MAX, Coupling::Independent, &mut NullObserver).unwrap();
        assert_ne!(a.agents[0].sac.policy, b.agents[0].sac.policy);
        assert_eq!(a.agents[1].sac.policy, b.agents[1].sac.policy);
        assert_eq!(a.agents[1].sac.q1, b.agents[1].sac.q1);
    }

    #[test]
    fn pairwise_coupling_pulls_policies_together() {
        let (space, s) = subs(2);
        let mut run = parallel(&cfg(), space, s, 0).unwrap();
        for _ in 0..4 {
            run.round(Coupling::Independent, &mut NullObserver).unwrap();
        }
        let peers: Vec<GaussianPolicy> = run.agents.iter().map(|a| a.sac.policy.clone()).collect();
        let agent = &mut run.agents[0];
        let ts = agent.buffer.sample_batch(8, &mut stream_rng(0, 9)).unwrap();
        let batch = crate::agent::Batch::from_transitions(&ts, run.env.space()).unwrap();
        let stats = pairwise_update(&mut agent.sac, &batch, &peers, 0, 1.0, &mut stream_rng(0, 10)).unwrap();
        assert_eq!(stats.distill_terms, 1);
        assert!(stats.mi_loss > 0.0);
    }
}
