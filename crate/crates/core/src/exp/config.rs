//! Flat `key = value` experiment configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::SacConfig;
use crate::baselines::{Method, MethodSpec};
use crate::cpd::{DistillConfig, OrderMode, TrainConfig};
use crate::domain::{partition, DomainSpace, PartitionMethod, SubDomain};
use crate::error::{Error, Result};
use crate::mixing::{MixMode, MixingConfig};

mod named {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Resolved experiment settings. Every key has a default; a config file
/// overrides any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(with = "named")]
    pub method: Method,
    /// Number of sub-domains.
    pub n: usize,
    #[serde(with = "named")]
    pub partition: PartitionMethod,
    /// Dimensions the partition cuts along.
    pub split: Vec<String>,
    pub m0: f64,
    pub gamma: f64,
    /// Episodes per sub-domain visit.
    pub episodes_per_visit: usize,
    /// Minibatch size in episodes; each update draws `batch_episodes * horizon / 10` transitions.
    pub batch_episodes: usize,
    pub horizon: usize,
    pub history: usize,
    /// Environment steps per run.
    pub budget: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Evaluate every this many episodes; 0 disables.
    pub eval_every: u64,
    /// Evaluation episodes per sub-domain.
    pub eval_episodes: usize,
    /// Seeds run concurrently.
    pub workers: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub tau: f64,
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub init_log_alpha: f64,
    pub mix_loss_samples: usize,
    pub mix_rate_samples: usize,
    pub mix_rate_states: usize,
    pub distill_max_iters: usize,
    pub distill_window: usize,
    pub distill_tol: f64,
    pub distill_steps_per_iter: usize,
    pub distill_batch: usize,
    pub distill_capacity: usize,
    pub distill_lr: f64,
    pub p2p_weight: f64,
    /// 0 means `episodes_per_visit`.
    pub reshuffle_episodes: usize,
    /// 0 means `2 * n * episodes_per_visit`.
    pub dnc_period: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sac = SacConfig::default();
        let mix = MixingConfig::default();
        let dist = DistillConfig::default();
        Self {
            method: Method::Cpd,
            n: 4,
            partition: PartitionMethod::Plane,
            split: vec!["gravity".into()],
            m0: 1.0,
            gamma: 0.99,
            episodes_per_visit: 15,
            batch_episodes: 16,
            horizon: 150,
            history: sac.history_len,
            budget: 120_000,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
            eval_every: 10,
            eval_episodes: 3,
            workers: 1,
            hidden: sac.hidden,
            lr: sac.lr,
            tau: sac.tau,
            warmup: sac.warmup,
            buffer_capacity: sac.buffer_capacity,
            init_log_alpha: sac.init_log_alpha,
            mix_loss_samples: mix.loss_samples,
            mix_rate_samples: mix.rate_samples,
            mix_rate_states: mix.rate_states,
            distill_max_iters: dist.max_iters,
            distill_window: dist.window,
            distill_tol: dist.tol,
            distill_steps_per_iter: dist.steps_per_iter,
            distill_batch: dist.batch,
            distill_capacity: dist.capacity,
            distill_lr: dist.lr,
            p2p_weight: 0.01,
            reshuffle_episodes: 0,
            dnc_period: 0,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config { line: 0, msg: msg.into() }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config { line: e.span().map_or(0, |s| line_of(text, s.start)), msg: e.message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config fields are plain values")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("episodes_per_visit", self.episodes_per_visit),
            ("batch_episodes", self.batch_episodes),
            ("horizon", self.horizon),
            ("eval_episodes", self.eval_episodes),
            ("workers", self.workers),
            ("buffer_capacity", self.buffer_capacity),
            ("mix_loss_samples", self.mix_loss_samples),
            ("mix_rate_samples", self.mix_rate_samples),
            ("mix_rate_states", self.mix_rate_states),
            ("distill_max_iters", self.distill_max_iters),
            ("distill_window", self.distill_window),
            ("distill_steps_per_iter", self.distill_steps_per_iter),
            ("distill_batch", self.distill_batch),
            ("distill_capacity", self.distill_capacity),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("`{k}` must be positive")));
        }
        if self.batch_size() == 0 {
            return Err(invalid("batch_episodes * horizon / 10 must be at least 1"));
        }
        if self.budget == 0 {
            return Err(invalid("`budget` must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("`seeds` must list at least one seed"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("`hidden` needs at least one non-zero layer width"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid(format!("`gamma` must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid(format!("`tau` must lie in (0, 1], got {}", self.tau)));
        }
        for (k, v) in [("m0", self.m0), ("lr", self.lr), ("distill_lr", self.distill_lr), ("distill_tol", self.distill_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("`{k}` must be a positive number, got {v}")));
            }
        }
        if !self.init_log_alpha.is_finite() {
            return Err(invalid("`init_log_alpha` must be finite"));
        }
        self.method_spec().validate()?;
        self.subdomains().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Transitions drawn per update.
    pub fn batch_size(&self) -> usize {
        self.batch_episodes * self.horizon / 10
    }

    pub fn space(&self) -> DomainSpace {
        DomainSpace::pendulum()
    }

    pub fn subdomains(&self) -> Result<Vec<SubDomain>> {
        partition(&self.space(), self.n, self.partition, &self.split)
    }

    pub fn method_spec(&self) -> MethodSpec {
        MethodSpec { method: self.method, p2p_weight: self.p2p_weight, reshuffle_episodes: self.reshuffle_episodes, dnc_period: self.dnc_period }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sac: SacConfig {
                gamma: self.gamma,
                tau: self.tau,
                lr: self.lr,
                hidden: self.hidden.clone(),
                batch_size: self.batch_size(),
                warmup: self.warmup,
                init_log_alpha: self.init_log_alpha,
                history_len: self.history,
                buffer_capacity: self.buffer_capacity,
            },
            mix: MixingConfig { mode: MixMode::Opt, m0: self.m0, loss_samples: self.mix_loss_samples, rate_samples: self.mix_rate_samples, rate_states: self.mix_rate_states },
            episodes_per_visit: self.episodes_per_visit,
            horizon: self.horizon,
            order: OrderMode::Cyclic,
            distill: DistillConfig {
                max_iters: self.distill_max_iters,
                window: self.distill_window,
                tol: self.distill_tol,
                steps_per_iter: self.distill_steps_per_iter,
                batch: self.distill_batch,
                capacity: self.distill_capacity,
                lr: self.distill_lr,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = ExperimentConfig::default();
        assert_eq!((c.n, c.m0, c.gamma, c.episodes_per_visit, c.batch_episodes, c.horizon), (4, 1.0, 0.99, 15, 16, 150));
        assert_eq!(c.batch_size(), 240);
        assert_eq!(c.budget, 120_000);
        assert_eq!((c.eval_every, c.eval_episodes), (10, 3));
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!("".parse::<ExperimentConfig>().unwrap(), ExperimentConfig::default());
        assert_eq!("# nothing\n\n".parse::<ExperimentConfig>().unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let text = "method = \"DnC\"\nn = 8\npartition = \"grid\"\nsplit = [\"gravity\", \"actuator_bias\"]\nbudget = 6000\nseeds = [7]\nm0 = 0.5\n";
        let c: ExperimentConfig = text.parse().unwrap();
        assert_eq!(c.method, Method::Dnc);
        assert_eq!(c.n, 8);
        assert_eq!(c.partition, PartitionMethod::Grid);
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.to_text().parse::<ExperimentConfig>().unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = |t: &str| match t.parse::<ExperimentConfig>() {
            Err(Error::Config { line, msg }) => (line, msg),
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(err("n = 4\nbogus = 1\n").0, 2);
        assert_eq!(err("n = 4\nm0 = \"high\"\n").0, 2);
        assert_eq!(err("n = 4\n= 3\n").0, 2);
        assert!(err("method = \"PPO\"\n").1.contains("PPO"));
        assert!(err("[section]\nn = 1\n").1.contains("section"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for t in ["n = 0", "gamma = 1.0", "seeds = []", "hidden = []", "split = [\"wind\"]", "partition = \"grid\"\nn = 5\nsplit = [\"gravity\", \"bar_mass\"]", "batch_episodes = 0", "p2p_weight = -1.0", "tau = 0.0"] {
            assert!(t.parse::<ExperimentConfig>().is_err(), "{t}");
        }
    }

    #[test]
    fn train_config_carries_values() {
        let c: ExperimentConfig = "gamma = 0.9\nhidden = [32]\nm0 = 2.0\n".parse().unwrap();
        let t = c.train_config();
        assert_eq!(t.sac.gamma, 0.9);
        assert_eq!(t.sac.hidden, vec![32]);
        assert_eq!(t.sac.batch_size, 240);
        assert_eq!(t.mix.m0, 2.0);
        assert_eq!(c.subdomains().unwrap().len(), 4);
    }
}
