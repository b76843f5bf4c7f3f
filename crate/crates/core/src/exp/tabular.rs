//! Exact small-MDP testbed for conservative policy mixing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Finite MDP with action-indexed transition and reward matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    /// `p[a][(s, s')]`
    pub p: Vec<DMatrix<f64>>,
    /// `r[a][(s, s')]`
    pub r: Vec<DMatrix<f64>>,
    pub gamma: f64,
    /// Start-state distribution.
    pub mu: DVector<f64>,
}

/// Row-stochastic `|S| x |A|` matrix.
pub type TabularPolicy = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValues {
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// Discounted state occupancy from `mu`, summing to one.
    pub d: DVector<f64>,
    /// `mu . v`
    pub j: f64,
}

const ROW_TOL: f64 = 1e-9;

fn check_rows(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL || row.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidMdp(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(p: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>, gamma: f64, mu: DVector<f64>) -> Result<Self> {
        let mdp = Self { p, r, gamma, mu };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.mu.len()
    }

    pub fn n_actions(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states();
        if s == 0 || self.p.is_empty() || self.p.len() != self.r.len() {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidMdp(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        for (p, r) in self.p.iter().zip(&self.r) {
            if p.shape() != (s, s) || r.shape() != (s, s) {
                return Err(Error::InvalidMdp("transition or reward matrix has the wrong shape".into()));
            }
            check_rows(p, "transition")?;
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidMdp("non-finite reward".into()));
            }
        }
        let total: f64 = self.mu.iter().sum();
        if (total - 1.0).abs() > ROW_TOL || self.mu.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidMdp("start distribution does not sum to 1".into()));
        }
        Ok(())
    }

    pub fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.shape() != (self.n_states(), self.n_actions()) {
            return Err(Error::InvalidMdp(format!("policy shape {:?} does not match MDP", pi.shape())));
        }
        check_rows(pi, "policy")
    }

    /// Largest reward magnitude.
    pub fn max_reward(&self) -> f64 {
        self.r.iter().flat_map(|r| r.iter()).fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Expected one-step reward per state-action pair.
    pub fn expected_reward(&self) -> DMatrix<f64> {
        let s = self.n_states();
        DMatrix::from_fn(s, self.n_actions(), |i, a| self.p[a].row(i).iter().zip(self.r[a].row(i).iter()).map(|(p, r)| p * r).sum())
    }

    fn p_pi(&self, pi: &TabularPolicy) -> DMatrix<f64> {
        let s = self.n_states();
        let mut out = DMatrix::zeros(s, s);
        for (a, p) in self.p.iter().enumerate() {
            for i in 0..s {
                let w = pi[(i, a)];
                for j in 0..s {
                    out[(i, j)] += w * p[(i, j)];
                }
            }
        }
        out
    }
}

/// Exact V, Q, A and occupancy by linear solves of the Bellman system.
pub fn tabular_policy_eval(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<PolicyValues> {
    mdp.validate()?;
    mdp.check_policy(pi)?;
    let s = mdp.n_states();
    let rsa = mdp.expected_reward();
    let r_pi = DVector::from_fn(s, |i, _| (0..mdp.n_actions()).map(|a| pi[(i, a)] * rsa[(i, a)]).sum());
    let m = DMatrix::identity(s, s) - mdp.p_pi(pi) * mdp.gamma;
    let lu = m.clone().lu();
    let v = lu.solve(&r_pi).ok_or(Error::SingularSystem)?;
    let x = m.transpose().lu().solve(&mdp.mu).ok_or(Error::SingularSystem)?;
    let d = x * (1.0 - mdp.gamma);
    let q = DMatrix::from_fn(s, mdp.n_actions(), |i, a| rsa[(i, a)] + mdp.gamma * mdp.p[a].row(i).iter().zip(v.iter()).map(|(p, v)| p * v).sum::<f64>());
    let adv = DMatrix::from_fn(s, mdp.n_actions(), |i, a| q[(i, a)] - v[i]);
    let j = mdp.mu.dot(&v);
    Ok(PolicyValues { v, q, a: adv, d, j })
}

/// `(1 - m) pi + m target`.
pub fn mix_policies(pi: &TabularPolicy, target: &TabularPolicy, m: f64) -> TabularPolicy {
    let out = pi * (1.0 - m) + target * m;
    debug_assert!(out.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
    out
}

/// Deterministic greedy policy of `q`; ties go to the lowest action.
pub fn greedy(q: &DMatrix<f64>) -> TabularPolicy {
    let mut out = DMatrix::zeros(q.nrows(), q.ncols());
    for (i, row) in q.row_iter().enumerate() {
        let best = row.iter().enumerate().fold(0, |b, (a, &x)| if x > row[b] { a } else { b });
        out[(i, best)] = 1.0;
    }
    out
}

/// Coefficient maximizing the conservative lower bound, clamped to [0, 1].
///
/// Values are taken in the `(1 - gamma)`-normalized scale, where every
/// value lies within `R = max |r|`.
pub fn optimal_mixture_rate(mdp: &TabularMdp, vals: &PolicyValues, target: &TabularPolicy) -> f64 {
    let r = mdp.max_reward();
    if r == 0.0 {
        return 0.0;
    }
    let g = mdp.gamma;
    let adv = expected_advantage(vals, target) * (1.0 - g);
    ((1.0 - g) / (4.0 * r) * adv).clamp(0.0, 1.0)
}

/// `sum_s d(s) sum_a target(a|s) A(s, a)` in the raw value scale.
pub fn expected_advantage(vals: &PolicyValues, target: &TabularPolicy) -> f64 {
    vals.d.iter().enumerate().map(|(s, &d)| d * target.row(s).iter().zip(vals.a.row(s).iter()).map(|(p, a)| p * a).sum::<f64>()).sum()
}

/// Quadratic lower bound on the normalized improvement at rate `m`.
pub fn improvement_bound(mdp: &TabularMdp, vals: &PolicyValues, target: &TabularPolicy, m: f64) -> f64 {
    let g = mdp.gamma;
    let adv = expected_advantage(vals, target) * (1.0 - g);
    m * adv / (1.0 - g) - 2.0 * m * m * mdp.max_reward() / ((1.0 - g) * (1.0 - g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpiStep {
    /// `(m, J(mixture))` on the grid.
    pub grid: Vec<(f64, f64)>,
    pub j0: f64,
    pub grid_argmax: f64,
    pub grid_improvement: f64,
    pub m_star: f64,
    pub improvement_at_m_star: f64,
    /// Grid argmax of the lower bound.
    pub bound_argmax: f64,
    /// Exact improvement curve has no positive second difference.
    pub concave: bool,
}

impl CpiStep {
    pub fn cell(&self) -> f64 {
        1.0 / (self.grid.len().max(2) - 1) as f64
    }

    /// `m_star` lies within one cell of the bound's grid argmax.
    pub fn bound_agrees(&self) -> bool {
        (self.bound_argmax - self.m_star).abs() <= self.cell() + 1e-12
    }
}

/// Exact evaluation of the mixture toward `target` across `grid_points`
/// evenly spaced rates in [0, 1].
pub fn tabular_cpi_step(mdp: &TabularMdp, pi: &TabularPolicy, target: &TabularPolicy, grid_points: usize) -> Result<CpiStep> {
    if grid_points < 2 {
        return Err(Error::InvalidMdp(format!("grid needs at least 2 points, got {grid_points}")));
    }
    mdp.check_policy(target)?;
    let vals = tabular_policy_eval(mdp, pi)?;
    let j_at = |m: f64| tabular_policy_eval(mdp, &mix_policies(pi, target, m)).map(|v| v.j);
    let ms: Vec<f64> = (0..grid_points).map(|i| i as f64 / (grid_points - 1) as f64).collect();
    let grid = ms.iter().map(|&m| j_at(m).map(|j| (m, j))).collect::<Result<Vec<_>>>()?;
    let (grid_argmax, best) = grid.iter().fold((0.0, f64::NEG_INFINITY), |b, &(m, j)| if j > b.1 { (m, j) } else { b });
    let m_star = optimal_mixture_rate(mdp, &vals, target);
    let improvement_at_m_star = j_at(m_star)? - vals.j;
    let bound_argmax = ms.iter().copied().fold((0.0, f64::NEG_INFINITY), |b, m| {
        let l = improvement_bound(mdp, &vals, target, m);
        if l > b.1 {
            (m, l)
        } else {
            b
        }
    });
    let scale = grid.iter().fold(1.0f64, |m, g| m.max(g.1.abs()));
    let concave = grid.windows(3).all(|w| w[0].1 - 2.0 * w[1].1 + w[2].1 <= 1e-12 * scale);
    Ok(CpiStep { j0: vals.j, grid, grid_argmax, grid_improvement: best - vals.j, m_star, improvement_at_m_star, bound_argmax: bound_argmax.0, concave })
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn random_stochastic<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for (j, x) in random_simplex(cols, rng).into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

/// Dense random MDP with rewards uniform in `[lo, hi]`.
pub fn random_mdp<R: Rng + ?Sized>(states: usize, actions: usize, gamma: f64, reward: (f64, f64), rng: &mut R) -> Result<TabularMdp> {
    let p = (0..actions).map(|_| random_stochastic(states, states, rng)).collect();
    let r = (0..actions).map(|_| DMatrix::from_fn(states, states, |_, _| rng.gen_range(reward.0..=reward.1))).collect();
    let mu = DVector::from_vec(random_simplex(states, rng));
    TabularMdp::new(p, r, gamma, mu)
}

pub fn random_policy<R: Rng + ?Sized>(states: usize, actions: usize, rng: &mut R) -> TabularPolicy {
    random_stochastic(states, actions, rng)
}

fn draw<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Monte-Carlo estimate of `V(s0)` from `episodes` rollouts truncated
/// at `horizon` steps.
pub fn monte_carlo_value<R: Rng + ?Sized>(mdp: &TabularMdp, pi: &TabularPolicy, s0: usize, episodes: usize, horizon: usize, rng: &mut R) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let (mut s, mut disc, mut ret) = (s0, 1.0, 0.0);
        for _ in 0..horizon {
            let a = draw(pi.row(s).iter().copied(), rng);
            let next = draw(mdp.p[a].row(s).iter().copied(), rng);
            ret += disc * mdp.r[a][(s, next)];
            disc *= mdp.gamma;
            s = next;
        }
        total += ret;
    }
    total / episodes as f64
}

/// Outcome of the random-MDP CPI safety sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub mdps: usize,
    pub worst_improvement: f64,
    pub bound_disagreements: usize,
    pub concave_cases: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.worst_improvement >= -1e-12 && self.bound_disagreements == 0
    }
}

/// Mixes a random policy toward the greedy policy of its own Q on `count`
/// random MDPs with up to 5 states and 3 actions.
pub fn cpi_oracle_sweep<R: Rng + ?Sized>(count: usize, gamma: f64, rng: &mut R) -> Result<OracleReport> {
    let mut rep = OracleReport { mdps: count, worst_improvement: f64::INFINITY, bound_disagreements: 0, concave_cases: 0 };
    for _ in 0..count {
        let s = rng.gen_range(1..=5);
        let a = rng.gen_range(1..=3);
        let mdp = random_mdp(s, a, gamma, (-1.0, 1.0), rng)?;
        let pi = random_policy(s, a, rng);
        let target = greedy(&tabular_policy_eval(&mdp, &pi)?.q);
        let step = tabular_cpi_step(&mdp, &pi, &target, 101)?;
        rep.worst_improvement = rep.worst_improvement.min(step.improvement_at_m_star);
        rep.bound_disagreements += usize::from(!step.bound_agrees());
        rep.concave_cases += usize::from(step.concave);
    }
    Ok(rep)
}
