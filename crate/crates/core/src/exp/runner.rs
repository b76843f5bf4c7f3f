//! Multi-seed experiment execution and artifact layout.
//!
//! ```text
//! <out>/config.toml
//! <out>/aggregate.csv
//! <out>/seed<k>/{config.toml, metrics.csv, mixture.csv, wallclock.csv, final.ckpt}
//! <out>/seed<k>/FAILED        only when the seed errored
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::metrics::{aggregate, write_rows, AggregateRow, MetricsRecord, MixtureRow, RecordKind, WallClockRow};
use crate::approx::GaussianPolicy;
use crate::baselines::{run_method, RunOutput};
use crate::cpd::{evaluate_policy, stream_rng, EpisodeStats, Observer, UpdateRecord, STREAM_EVAL};
use crate::domain::SubDomain;
use crate::envsim::Pendulum;
use crate::error::{Error, Result};

/// Observer writing metrics rows in memory and running periodic evaluations.
pub struct Recorder {
    env: Pendulum,
    subs: Vec<SubDomain>,
    eval_every: u64,
    eval_episodes: usize,
    rng: ChaCha8Rng,
    start: Instant,
    last_eval: Option<u64>,
    pub records: Vec<MetricsRecord>,
    pub mixture: Vec<MixtureRow>,
    pub wall: Vec<WallClockRow>,
}

impl Recorder {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            env: Pendulum::new(cfg.space(), cfg.horizon),
            subs: cfg.subdomains()?,
            eval_every: cfg.eval_every,
            eval_episodes: cfg.eval_episodes,
            rng: stream_rng(seed, STREAM_EVAL),
            start: Instant::now(),
            last_eval: None,
            records: Vec::new(),
            mixture: Vec::new(),
            wall: Vec::new(),
        })
    }

    /// Evaluate `policies[n - 1]` on sub-domain `n`; a single policy covers all.
    fn evaluate(&mut self, kind: RecordKind, samples: u64, episode: u64, policies: &[&GaussianPolicy]) -> Result<()> {
        for sub in &self.subs {
            let p = policies[(sub.index - 1) % policies.len()];
            let r = evaluate_policy(p, &self.env, std::slice::from_ref(sub), self.eval_episodes, &mut self.rng)?;
            self.records.push(MetricsRecord::eval(kind, samples, episode, sub.index, r[0]));
        }
        self.wall.push(WallClockRow { samples, seconds: self.start.elapsed().as_secs_f64() });
        Ok(())
    }

    /// Final local and global evaluations after training.
    pub fn finish(&mut self, out: &RunOutput) -> Result<()> {
        let (samples, episode) = self.records.iter().rev().find(|r| r.kind == RecordKind::Episode).map_or((out.samples, 0), |r| (r.samples, r.episode));
        if self.last_eval != Some(episode) {
            let locals: Vec<&GaussianPolicy> = out.locals.iter().collect();
            self.evaluate(RecordKind::EvalLocal, samples, episode, &locals)?;
        }
        self.evaluate(RecordKind::EvalGlobal, samples, episode, &[&out.final_policy])
    }
}

impl Observer for Recorder {
    fn on_update(&mut self, rec: &UpdateRecord) -> Result<()> {
        let row = MixtureRow::from(rec);
        if !(row.critic_loss.is_finite() && row.rl_loss.is_finite()) {
            return Err(Error::Diverged(format!("non-finite loss at sample {}", rec.samples)));
        }
        self.mixture.push(row);
        Ok(())
    }

    fn on_episode(&mut self, ev: &EpisodeStats, locals: &[&GaussianPolicy]) -> Result<()> {
        self.records.push(MetricsRecord::episode(ev));
        if self.eval_every > 0 && ev.episode % self.eval_every == 0 {
            self.evaluate(RecordKind::EvalLocal, ev.samples, ev.episode, locals)?;
            self.last_eval = Some(ev.episode);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutput {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub mixture: Vec<MixtureRow>,
    pub wall: Vec<WallClockRow>,
    pub run: RunOutput,
}

/// Train one seed to the budget, evaluate, and write its files under `dir`
/// when given.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<SeedOutput> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, seed)?;
    let run = run_method(&cfg.method_spec(), &cfg.train_config(), cfg.space(), cfg.subdomains()?, cfg.budget, seed, &mut rec)?;
    rec.finish(&run)?;
    let out = SeedOutput { seed, records: rec.records, mixture: rec.mixture, wall: rec.wall, run };
    if let Some(dir) = dir {
        write_seed(cfg, &out, dir)?;
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_seed(cfg: &ExperimentConfig, out: &SeedOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_text())?;
    write_rows(create(&dir.join("metrics.csv"))?, &out.records)?;
    write_rows(create(&dir.join("mixture.csv"))?, &out.mixture)?;
    write_rows(create(&dir.join("wallclock.csv"))?, &out.wall)?;
    out.run.checkpoint.save(&dir.join("final.ckpt"))?;
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{seed}"))
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub out: PathBuf,
    /// Successful seeds in config order.
    pub seeds: Vec<SeedOutput>,
    pub failures: Vec<(u64, Error)>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Run every seed, `cfg.workers` at a time, then write the aggregate.
/// A failing seed is recorded and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_text())?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<SeedOutput>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(cfg.seeds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let dir = seed_dir(&cfg.out, seed);
                let _ = fs::remove_file(dir.join("FAILED"));
                let res = run_seed(cfg, seed, Some(&dir));
                if let Err(e) = &res {
                    let _ = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("FAILED"), format!("{e}\n")));
                }
                results.lock().expect("no panics while held").push((i, res));
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    results.sort_by_key(|(i, _)| *i);
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(o) => seeds.push(o),
            Err(e) => failures.push((cfg.seeds[i], e)),
        }
    }
    let per_seed: Vec<Vec<MetricsRecord>> = seeds.iter().map(|s| s.records.clone()).collect();
    let agg = aggregate(&per_seed);
    write_rows(create(&cfg.out.join("aggregate.csv"))?, &agg)?;
    Ok(ExperimentReport { out: cfg.out.clone(), seeds, failures, aggregate: agg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exp::metrics::{read_metrics, read_rows};

    fn tiny(out: &Path) -> ExperimentConfig {
        let text = format!(
            "n = 2\nepisodes_per_visit = 2\nhorizon = 20\nbatch_episodes = 4\nwarmup = 16\nhidden = [8]\nbudget = 200\nseeds = [0, 1, 2]\neval_every = 3\neval_episodes = 1\ndistill_max_iters = 2\ndistill_steps_per_iter = 2\ndistill_batch = 16\nworkers = 2\nout = {:?}\n",
            out.to_str().unwrap()
        );
        text.parse().unwrap()
    }

    #[test]
    fn files_and_aggregate() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let rep = run_experiment(&cfg).unwrap();
        assert!(rep.all_succeeded());
        assert_eq!(rep.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        let echo = fs::read_to_string(tmp.path().join("config.toml")).unwrap();
        assert_eq!(echo.parse::<ExperimentConfig>().unwrap(), cfg);
        let mut per_seed = Vec::new();
        for s in 0..3 {
            let dir = seed_dir(tmp.path(), s);
            for f in ["config.toml", "metrics.csv", "mixture.csv", "wallclock.csv", "final.ckpt"] {
                assert!(dir.join(f).exists(), "{f}");
            }
            per_seed.push(read_metrics(File::open(dir.join("metrics.csv")).unwrap()).unwrap());
        }
        let agg: Vec<AggregateRow> = read_rows(File::open(tmp.path().join("aggregate.csv")).unwrap()).unwrap();
        assert_eq!(agg, aggregate(&per_seed));
        // recompute one column mean straight from the per-seed files
        let final_samples = per_seed[0].last().unwrap().samples;
        let expect: f64 = per_seed.iter().map(|r| r.iter().filter(|x| x.kind == RecordKind::EvalGlobal && x.samples == final_samples && x.subdomain == 1).map(|x| x.ret).sum::<f64>()).sum::<f64>() / 3.0;
        let row = agg.iter().find(|r| r.series == "eval_global/1").unwrap();
        assert!((row.mean - expect).abs() < 1e-9);
    }

    #[test]
    fn records_are_ordered_and_complete() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let out = run_seed(&cfg, 4, None).unwrap();
        let episodes = out.records.iter().filter(|r| r.kind == RecordKind::Episode).count();
        assert_eq!(episodes, 10);
        assert!(out.records.windows(2).all(|w| w[0].samples <= w[1].samples));
        // evaluations at episodes 3, 6, 9 and the end
        let evals = out.records.iter().filter(|r| r.kind == RecordKind::EvalLocal).count();
        assert_eq!(evals, 4 * 2);
        assert_eq!(out.records.iter().filter(|r| r.kind == RecordKind::EvalGlobal).count(), 2);
        // each agent warms its own buffer
        assert_eq!(out.mixture.len(), 200 - 2 * 15);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny(a.path());
        cfg.seeds = vec![3];
        run_experiment(&cfg).unwrap();
        cfg.out = b.path().to_path_buf();
        run_experiment(&cfg).unwrap();
        for f in ["metrics.csv", "mixture.csv", "final.ckpt"] {
            assert_eq!(fs::read(seed_dir(a.path(), 3).join(f)).unwrap(), fs::read(seed_dir(b.path(), 3).join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn failing_seed_does_not_stop_others() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(tmp.path());
        cfg.seeds = vec![0, 1];
        // a seed directory path blocked by a regular file cannot be written
        fs::write(seed_dir(tmp.path(), 1), b"x").unwrap();
        let rep = run_experiment(&cfg).unwrap();
        assert_eq!(rep.seeds.len(), 1);
        assert_eq!(rep.failures.len(), 1);
        assert_eq!(rep.failures[0].0, 1);
    }
}
