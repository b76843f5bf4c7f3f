//! Pendulum swing-up whose physics and actuation follow a domain-parameter
//! vector, and the fixed-length history window that stands in for
//! recurrence in the networks.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;

use crate::domain::{DomainParamVector, DomainSpace};
use crate::error::{Error, Result};

pub const OBS_DIM: usize = 3;
pub const ACT_DIM: usize = 1;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const NOMINAL_G: f64 = 10.0;
pub const NOMINAL_DT: f64 = 0.05;

/// Physical constants after applying a domain-parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    pub g: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub gain: f64,
    pub bias: f64,
}

impl Physics {
    pub const NOMINAL: Physics = Physics { g: NOMINAL_G, mass: 1.0, length: 1.0, dt: NOMINAL_DT, gain: 1.0, bias: 0.0 };

    /// Torque applied for a normalized action in `[-1, 1]`.
    pub fn torque(&self, a: f64) -> f64 {
        self.gain * MAX_TORQUE * a.clamp(-1.0, 1.0) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub theta: f64,
    pub theta_dot: f64,
    pub t: usize,
}

impl EnvState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

/// One stored step; `history` holds the `H` observation-action pairs that
/// preceded `s`, zero-padded at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: [f64; OBS_DIM],
    pub a: [f64; ACT_DIM],
    pub r: f64,
    pub s_next: [f64; OBS_DIM],
    pub done: bool,
    pub xi: DomainParamVector,
    pub history: Vec<([f64; OBS_DIM], [f64; ACT_DIM])>,
}

/// Network input for `(history, s)`: the scaled current observation
/// followed by each scaled history pair, oldest first.
pub fn features_into(history: &[([f64; OBS_DIM], [f64; ACT_DIM])], s: &[f64; OBS_DIM], out: &mut Vec<f64>) {
    let push_obs = |o: &[f64; OBS_DIM], out: &mut Vec<f64>| {
        out.extend_from_slice(&[o[0], o[1], o[2] / MAX_SPEED]);
    };
    push_obs(s, out);
    for (o, a) in history {
        push_obs(o, out);
        out.extend_from_slice(a);
    }
}

pub fn feature_dim(history_len: usize) -> usize {
    OBS_DIM + history_len * (OBS_DIM + ACT_DIM)
}

impl Transition {
    pub fn features_into(&self, out: &mut Vec<f64>) {
        features_into(&self.history, &self.s, out);
    }

    /// Features of `s_next`, whose window has shifted by `(s, a)`.
    pub fn next_features_into(&self, out: &mut Vec<f64>) {
        let push_obs = |o: &[f64; OBS_DIM], out: &mut Vec<f64>| {
            out.extend_from_slice(&[o[0], o[1], o[2] / MAX_SPEED]);
        };
        push_obs(&self.s_next, out);
        for (o, a) in self.history.iter().skip(1) {
            push_obs(o, out);
            out.extend_from_slice(a);
        }
        if !self.history.is_empty() {
            push_obs(&self.s, out);
            out.extend_from_slice(&self.a);
        }
    }
}

/// Rolling window of the last `H` observation-action pairs.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    len: usize,
    buf: VecDeque<([f64; OBS_DIM], [f64; ACT_DIM])>,
}

impl HistoryWindow {
    pub fn new(len: usize) -> Self {
        let mut w = Self { len, buf: VecDeque::with_capacity(len + 1) };
        w.clear();
        w
    }

    pub fn clear(&mut self) {
        self.buf.clear();
        self.buf.extend(std::iter::repeat(([0.0; OBS_DIM], [0.0; ACT_DIM])).take(self.len));
    }

    pub fn push(&mut self, s: [f64; OBS_DIM], a: [f64; ACT_DIM]) {
        if self.len == 0 {
            return;
        }
        self.buf.pop_front();
        self.buf.push_back((s, a));
    }

    pub fn pairs(&self) -> Vec<([f64; OBS_DIM], [f64; ACT_DIM])> {
        self.buf.iter().copied().collect()
    }

    pub fn features(&self, s: &[f64; OBS_DIM]) -> Vec<f64> {
        let mut out = Vec::with_capacity(feature_dim(self.len));
        features_into(&self.pairs(), s, &mut out);
        out
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Randomized pendulum swing-up; `theta = 0` is upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    space: DomainSpace,
    horizon: usize,
    slots: [Option<usize>; 6],
}

const SLOT_NAMES: [&str; 6] = ["gravity", "timestep", "bar_mass", "bar_length", "actuator_gain", "actuator_bias"];

impl Pendulum {
    pub fn new(space: DomainSpace, horizon: usize) -> Self {
        let slots = SLOT_NAMES.map(|n| space.index_of(n).ok());
        Self { space, horizon, slots }
    }

    pub fn space(&self) -> &DomainSpace {
        &self.space
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Nominal constants scaled (or offset) by `xi`; dimensions absent from
    /// the space keep their nominal value.
    pub fn physics(&self, xi: &DomainParamVector) -> Physics {
        let get = |slot: usize, nominal: f64| match self.slots[slot] {
            Some(i) => xi.values[i],
            None => nominal,
        };
        let n = Physics::NOMINAL;
        Physics {
            g: n.g * get(0, 1.0),
            dt: n.dt * get(1, 1.0),
            mass: n.mass * get(2, 1.0),
            length: n.length * get(3, 1.0),
            gain: n.gain * get(4, 1.0),
            bias: n.bias + get(5, 0.0),
        }
    }

    /// Angle uniform in `[-pi, pi]`, angular velocity uniform in `[-1, 1]`.
    pub fn reset<R: Rng + ?Sized>(&self, xi: &DomainParamVector, rng: &mut R) -> Result<EnvState> {
        self.space.check_within(xi)?;
        Ok(EnvState { theta: rng.gen_range(-PI..=PI), theta_dot: rng.gen_range(-1.0..=1.0), t: 0 })
    }

    pub fn step(&self, state: &EnvState, a: &[f64], xi: &DomainParamVector) -> Result<(EnvState, f64, bool)> {
        if state.t >= self.horizon {
            return Err(Error::StepAfterDone);
        }
        if a.len() != ACT_DIM {
            return Err(Error::DimensionMismatch { expected: ACT_DIM, got: a.len() });
        }
        let p = self.physics(xi);
        let (next, reward) = integrate(&p, state, a[0]);
        let done = next.t >= self.horizon;
        Ok((next, reward, done))
    }
}

/// Reward of the pre-step state and one semi-implicit Euler step.
pub fn integrate(p: &Physics, s: &EnvState, a: f64) -> (EnvState, f64) {
    let u = p.torque(a);
    let th = s.theta;
    let thd = s.theta_dot;
    let reward = -(wrap_angle(th).powi(2) + 0.1 * thd * thd + 0.001 * u * u);
    let acc = 3.0 * p.g / (2.0 * p.length) * th.sin() + 3.0 / (p.mass * p.length * p.length) * u;
    let new_thd = (thd + acc * p.dt).clamp(-MAX_SPEED, MAX_SPEED);
    let new_th = th + new_thd * p.dt;
    (EnvState { theta: new_th, theta_dot: new_thd, t: s.t + 1 }, reward)
}

/// Largest magnitude a per-step reward can reach over `space`.
pub fn reward_floor(space: &DomainSpace) -> f64 {
    let range = |name: &str| space.index_of(name).ok().map(|i| (space.dims()[i].lo, space.dims()[i].hi));
    let gain = range("actuator_gain").map_or(1.0, |r| r.1.abs().max(r.0.abs()));
    let bias = range("actuator_bias").map_or(0.0, |r| r.1.abs().max(r.0.abs()));
    let u_max = gain * MAX_TORQUE + bias;
    -(PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * u_max * u_max)
}

/// Undiscounted sum of rewards over one complete episode.
pub fn episode_return(trajectory: &[Transition], horizon: usize) -> Result<f64> {
    if trajectory.len() != horizon {
        return Err(Error::IncompleteEpisode { got: trajectory.len(), expected: horizon });
    }
    Ok(trajectory.iter().map(|t| t.r).sum())
}
