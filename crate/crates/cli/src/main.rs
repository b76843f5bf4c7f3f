use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpd_core::approx::{check_gradients, Checkpoint, GaussianPolicy, GradCheckSpec, Mlp, MlpSpec};
use cpd_core::baselines::{count_update_costs, run_method, Method};
use cpd_core::cpd::{evaluate_policy, stream_rng, NullObserver, STREAM_EVAL};
use cpd_core::envsim::{feature_dim, Pendulum, ACT_DIM};
use cpd_core::exp::metrics::{final_returns, RecordKind};
use cpd_core::exp::tabular::{cpi_oracle_sweep, monte_carlo_value, random_mdp, random_policy, tabular_policy_eval};
use cpd_core::exp::{run_experiment, ExperimentConfig};

const USAGE: u8 = 1;
const FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "cpd", version, about = "Cyclic policy distillation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method name, e.g. CPD, CPD_m0, SAC_DR, DnC.
    #[arg(long)]
    method: Option<String>,
    /// Environment steps per run.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Evaluate a policy stored in a checkpoint on each sub-domain.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor prefix of the policy inside the checkpoint.
        #[arg(long, default_value = "global.policy")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Episodes per sub-domain; defaults to the config's `eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Exact tabular checks of conservative policy mixing.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        mdps: usize,
    },
    /// Finite-difference check of every network gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        configs: usize,
    },
    /// Count distillation and mixing updates for every method on one
    /// shortened cycle of the configured schedule.
    Costs {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(path: &Path, ov: Option<&Overrides>) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(ov) = ov {
        if let Some(s) = ov.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &ov.method {
            cfg.method = m.parse().map_err(|e| format!("{e}"))?;
        }
        if let Some(b) = ov.budget {
            cfg.budget = b;
        }
        cfg.validate().map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

fn run(config: &Path, ov: &Overrides) -> Result<ExitCode, (u8, String)> {
    let cfg = load(config, Some(ov)).map_err(|e| (USAGE, e))?;
    let rep = run_experiment(&cfg).map_err(|e| (FAILURE, e.to_string()))?;
    for s in &rep.seeds {
        let last = |k| final_returns(&s.records, k);
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "seed {}: {} samples, final local {:.2}, final policy {:.2}",
            s.seed,
            s.run.samples,
            mean(last(RecordKind::EvalLocal)),
            mean(last(RecordKind::EvalGlobal))
        );
    }
    for (seed, e) in &rep.failures {
        eprintln!("seed {seed} failed: {e}");
    }
    println!("wrote {}", rep.out.display());
    Ok(if rep.all_succeeded() { ExitCode::SUCCESS } else { ExitCode::from(FAILURE) })
}

fn eval(config: &Path, ck: &Path, prefix: &str, seed: u64, episodes: Option<usize>) -> Result<ExitCode, (u8, String)> {
    let cfg = load(config, None).map_err(|e| (USAGE, e))?;
    let fail = |e: cpd_core::Error| (FAILURE, e.to_string());
    let ckpt = Checkpoint::load(ck).map_err(fail)?;
    let spec = MlpSpec::policy(feature_dim(cfg.history), ACT_DIM, cfg.hidden.clone());
    let mut net = Mlp::new(spec, &mut stream_rng(0, 0)).map_err(fail)?;
    ckpt.load_mlp(prefix, &mut net).map_err(fail)?;
    let policy = GaussianPolicy::from_net(net, true).map_err(fail)?;
    let env = Pendulum::new(cfg.space(), cfg.horizon);
    let subs = cfg.subdomains().map_err(fail)?;
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let mut total = 0.0;
    for sub in &subs {
        let r = evaluate_policy(&policy, &env, std::slice::from_ref(sub), episodes.unwrap_or(cfg.eval_episodes), &mut rng).map_err(fail)?;
        println!("subdomain {}: {:.3}", sub.index, r[0]);
        total += r[0];
    }
    println!("mean: {:.3}", total / subs.len() as f64);
    Ok(ExitCode::SUCCESS)
}

fn oracle(seed: u64, mdps: usize) -> Result<ExitCode, (u8, String)> {
    let fail = |e: cpd_core::Error| (FAILURE, e.to_string());
    let mut rng = stream_rng(seed, 0);
    let rep = cpi_oracle_sweep(mdps, 0.9, &mut rng).map_err(fail)?;
    println!(
        "mixing at the bound maximizer: {} MDPs, worst improvement {:.3e}, bound argmax disagreements {}, concave curves {}",
        rep.mdps, rep.worst_improvement, rep.bound_disagreements, rep.concave_cases
    );
    let mdp = random_mdp(4, 2, 0.9, (0.5, 1.0), &mut rng).map_err(fail)?;
    let pi = random_policy(4, 2, &mut rng);
    let v = tabular_policy_eval(&mdp, &pi).map_err(fail)?;
    let mut worst: f64 = 0.0;
    for s in 0..4 {
        let mc = monte_carlo_value(&mdp, &pi, s, 20_000, 200, &mut rng);
        worst = worst.max((mc - v.v[s]).abs() / v.v[s].abs());
    }
    println!("exact values vs Monte-Carlo: worst relative gap {worst:.2e}");
    let ok = rep.passed() && worst < 0.01;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(FAILURE) })
}

fn gradcheck(seed: u64, configs: usize) -> Result<ExitCode, (u8, String)> {
    let spec = GradCheckSpec { configs, seed, ..Default::default() };
    match check_gradients(&spec, 1e-4) {
        Ok(r) => {
            println!("{} configurations, {} coordinates checked, {} skipped at kinks, max relative error {:.3e}", r.configs, r.checked, r.skipped, r.max_rel_err);
            println!("PASS");
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!("{e}");
            println!("FAIL");
            Ok(ExitCode::from(FAILURE))
        }
    }
}

fn costs(config: Option<&Path>, seed: u64) -> Result<ExitCode, (u8, String)> {
    let mut cfg = match config {
        Some(p) => load(p, None).map_err(|e| (USAGE, e))?,
        None => ExperimentConfig::default(),
    };
    // the tallies are structural, so a short cycle with small batches shows them
    cfg.episodes_per_visit = 2;
    cfg.batch_episodes = 4;
    cfg.warmup = cfg.batch_size();
    cfg.hidden = vec![16, 16];
    cfg.distill_max_iters = 2;
    cfg.dnc_period = cfg.n * cfg.episodes_per_visit;
    let budget = (2 * cfg.n * cfg.episodes_per_visit * cfg.horizon) as u64;
    let subs = cfg.subdomains().map_err(|e| (FAILURE, e.to_string()))?;
    println!("{:<10} {:>10} {:>14} {:>8}", "method", "dist/step", "mix/iteration", "mix/end");
    for m in [Method::Cpd, Method::SacDr, Method::P2pdrl, Method::Dnc, Method::Didor] {
        let mut spec = cfg.method_spec();
        spec.method = m;
        let out = run_method(&spec, &cfg.train_config(), cfg.space(), subs.clone(), budget, seed, &mut NullObserver).map_err(|e| (FAILURE, format!("{m}: {e}")))?;
        let r = count_update_costs(&out.costs);
        let yn = |b: bool| if b { "yes" } else { "no" };
        println!("{:<10} {:>10} {:>14} {:>8}", m.as_str(), r.dist_per_step, yn(r.mix_per_iteration), yn(r.mix_at_end));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let res = match &cli.cmd {
        Cmd::Run { config, ov } => run(config, ov),
        Cmd::Eval { config, checkpoint, policy, seed, episodes } => eval(config, checkpoint, policy, *seed, *episodes),
        Cmd::Oracle { seed, mdps } => oracle(*seed, *mdps),
        Cmd::Gradcheck { seed, configs } => gradcheck(*seed, *configs),
        Cmd::Costs { config, seed } => costs(config.as_deref(), *seed),
    };
    match res {
        Ok(code) => code,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
