use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use spinctl::harness::export::{self, write_json, write_summary, Format};
use spinctl::harness::{
    run_experiment, summarize, Algorithm, ExperimentConfig, ExperimentKind, ExperimentOutput, RunRecord,
    SummaryRow, Transition,
};
use spinctl::ppo::checkpoint::Checkpoint;
use spinctl::ppo::{train_agent, PpoAgent, PpoConfig};
use spinctl::robustness;
use spinctl::{ChainSpec, EnvConfig, Environment, NoiseConfig, SpinChainEnv};

#[derive(Parser)]
#[command(name = "spinctl", version, about = "Static bias control of XX spin chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Environment calls to threshold versus chain length.
    CostSweep(Common),
    /// Environment calls to threshold versus perturbation strength.
    NoiseSweep(Common),
    /// Train one PPO agent and save a checkpoint.
    TrainPpo(TrainArgs),
    /// L-BFGS with random restarts.
    OptimizeLbfgs(Common),
    /// Uniform random controllers as a baseline.
    RandomSearch(Common),
    /// Monte Carlo robustness analysis of converged L-BFGS controllers.
    Mcra(Common),
    /// Fidelity curves along random perturbation directions.
    Sphere(Common),
    /// Summarize a runs file.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Chain length; repeat or comma-separate for several.
    #[arg(long = "chain", value_delimiter = ',')]
    chain: Vec<usize>,
    /// Transition `S:T` (zero-based); repeatable.
    #[arg(long = "transition", value_delimiter = ',')]
    transition: Vec<Transition>,
    /// Perturbation strength; repeatable.
    #[arg(long = "sigma", value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Measurement shots per reward (0 = exact).
    #[arg(long)]
    shots: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Environment calls allowed per run.
    #[arg(long)]
    budget: Option<u64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// TOML file overriding the defaults; flags override the file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from a saved checkpoint instead of a fresh agent.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Runs file written by another subcommand.
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Also write the summary CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> spinctl::Result<()> {
    match cli.command {
        Command::CostSweep(c) => experiment(ExperimentKind::CostSweep, None, c),
        Command::NoiseSweep(c) => experiment(ExperimentKind::NoiseSweep, None, c),
        Command::RandomSearch(c) => experiment(ExperimentKind::RandomBaseline, Some(Algorithm::Random), c),
        Command::OptimizeLbfgs(c) => experiment(ExperimentKind::CostSweep, Some(Algorithm::Lbfgs), c),
        Command::Mcra(c) => experiment(ExperimentKind::Mcra, None, c),
        Command::Sphere(c) => experiment(ExperimentKind::Sphere, None, c),
        Command::TrainPpo(t) => train_ppo(t),
        Command::Report(r) => report(r),
    }
}

fn build_config(kind: ExperimentKind, single: Option<Algorithm>, c: &Common) -> spinctl::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(kind, p)?,
        None => {
            let mut cfg = ExperimentConfig::for_kind(kind);
            if single.is_some() {
                // Single-algorithm commands default to one run on the 4-chain.
                cfg.chain_lengths = vec![4];
                cfg.runs = 1;
            }
            cfg
        }
    };
    if let Some(a) = single {
        cfg.algorithms = vec![a];
    }
    if !c.chain.is_empty() {
        cfg.chain_lengths = c.chain.clone();
    }
    if !c.transition.is_empty() {
        cfg.transitions = c.transition.clone();
    }
    if !c.sigma.is_empty() {
        cfg.sigmas = c.sigma.clone();
    }
    if let Some(v) = c.shots {
        cfg.shots = v;
    }
    if let Some(v) = c.runs {
        cfg.runs = v;
    }
    if let Some(v) = c.threshold {
        match kind {
            ExperimentKind::NoiseSweep => cfg.noisy_threshold = v,
            _ => cfg.threshold = v,
        }
    }
    if let Some(v) = c.budget {
        cfg.budget = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: String,
    started_unix_s: u64,
    wall_time_s: f64,
    run_wall_times_s: Vec<f64>,
    config: &'a ExperimentConfig,
    notes: Vec<&'static str>,
}

fn create_dir(path: &Path) -> spinctl::Result<()> {
    std::fs::create_dir_all(path).map_err(|source| spinctl::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn runs_file(out: &Path, format: Format) -> PathBuf {
    out.join(match format {
        Format::Csv => "runs.csv",
        Format::Json => "runs.json",
    })
}

fn notes(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut n = vec!["one environment call = one (possibly noisy) fidelity evaluation; L-BFGS value and gradient share one call"];
    if cfg.algorithms.contains(&Algorithm::Lbfgs) && (cfg.sigmas.iter().any(|s| *s > 0.0) || cfg.shots > 0) {
        n.push("noisy L-BFGS uses the analytic gradient of each sampled perturbed instance");
    }
    match cfg.kind {
        ExperimentKind::Mcra => n.push("MCRA scores converged L-BFGS controllers with exact fidelities of perturbed Hamiltonians"),
        ExperimentKind::Sphere => n.push(
            "sphere controller = highest median of samples pooled over all MCRA levels, polished to the gradient tolerance",
        ),
        _ => {}
    }
    n
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<7} {:>3} {:>5} {:>8} {:>5} {:>6} {:>5} {:>5} {:>12} {:>12} {:>12} {:>9} {:>9}",
        "alg", "N", "S:T", "sigma", "shots", "thr", "runs", "conv", "median", "q1", "q3", "perc", "true"
    );
    for r in rows {
        println!(
            "{:<7} {:>3} {:>5} {:>8.4} {:>5} {:>6.3} {:>5} {:>5} {:>12.1} {:>12.1} {:>12.1} {:>9.5} {:>9.5}",
            r.algorithm.to_string(),
            r.n_spins,
            format!("{}:{}", r.source, r.target),
            r.sigma,
            r.shots,
            r.threshold,
            r.runs,
            r.converged,
            r.median_calls,
            r.q1_calls,
            r.q3_calls,
            r.median_perceived,
            r.median_true
        );
    }
}

fn write_outputs(out: &ExperimentOutput, c: &Common) -> spinctl::Result<()> {
    export::export_records(&out.records, c.format, &runs_file(&c.out, c.format))?;
    write_summary(&out.summary, &c.out.join("summary.csv"))?;
    if let Some(m) = &out.mcra {
        robustness::write_mcra_samples(&c.out.join("mcra_samples.csv"), m)?;
        robustness::write_box_stats(&c.out.join("mcra_box.csv"), &m.levels)?;
        println!("MCRA median trend (Spearman, median vs sigma): {:.4}", m.median_trend());
    }
    if let Some(s) = &out.sphere {
        robustness::write_sphere_curves(&c.out.join("sphere_curves.csv"), &s.scan)?;
        robustness::write_sphere_densities(&c.out.join("sphere_density.csv"), &s.scan)?;
        let path = c.out.join("sphere_slopes.csv");
        let mut w = export::csv_writer(&path, "spinctl-sphere-slopes/1")?;
        export::write_row(&mut w, &path, ["direction", "slope"])?;
        for (i, v) in s.slopes.iter().enumerate() {
            export::write_row(&mut w, &path, [i.to_string(), v.to_string()])?;
        }
        export::finish_csv(w, &path)?;
        println!(
            "sphere: controller {} (pooled median {:.5}), F = {:.8}, improving directions {:.1}%",
            s.selected,
            s.pooled_median,
            s.scan.base_fidelity,
            100.0 * s.improving_fraction
        );
    }
    Ok(())
}

fn started() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn experiment(kind: ExperimentKind, single: Option<Algorithm>, c: Common) -> spinctl::Result<()> {
    let cfg = build_config(kind, single, &c)?;
    create_dir(&c.out)?;
    let t0 = Instant::now();
    let started_unix_s = started();
    let out = run_experiment(&cfg)?;
    write_outputs(&out, &c)?;
    print_summary(&out.summary);
    write_json(
        &c.out.join("metadata.json"),
        &Metadata {
            tool: "spinctl",
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect::<Vec<_>>().join(" "),
            started_unix_s,
            wall_time_s: t0.elapsed().as_secs_f64(),
            run_wall_times_s: out.records.iter().map(|r| r.wall_time_s).collect(),
            config: &cfg,
            notes: notes(&cfg),
        },
    )
}

fn train_ppo(t: TrainArgs) -> spinctl::Result<()> {
    let c = &t.common;
    let mut cfg = build_config(ExperimentKind::CostSweep, Some(Algorithm::Ppo), c)?;
    cfg.runs = 1;
    let (n, tr, sigma) = (cfg.chain_lengths[0], cfg.transitions[0], cfg.sigmas[0]);
    let env_cfg = EnvConfig::new(
        ChainSpec::uniform(n, tr.source, tr.target)?,
        NoiseConfig::new(sigma, cfg.shots)?,
        cfg.threshold,
    )?;
    let (mut agent, ppo_cfg, mut rng) = match &t.resume {
        Some(p) => {
            let (agent, ppo_cfg, rng) = Checkpoint::load(p)?.restore()?;
            if agent.policy.net.input_dim() != n + 1 {
                return Err(spinctl::Error::Config(format!(
                    "checkpoint was trained on {} spins, not {n}",
                    agent.policy.net.input_dim() - 1
                )));
            }
            (agent, ppo_cfg, rng)
        }
        None => {
            let seed = spinctl::harness::derive_seed(cfg.seed, &[1, n as u64, 0, 0], 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let agent = PpoAgent::new(n, &cfg.ppo, &mut rng);
            (agent, cfg.ppo.clone(), rng)
        }
    };
    let ppo_cfg = PpoConfig {
        max_env_calls: cfg.budget,
        ..ppo_cfg
    };
    create_dir(&c.out)?;
    let t0 = Instant::now();
    let started_unix_s = started();
    let mut env = SpinChainEnv::new(env_cfg.clone())?;
    let result = train_agent(&mut agent, &mut env, &ppo_cfg, &mut rng)?;
    Checkpoint::capture(&agent, &ppo_cfg, &rng).save(&c.out.join("checkpoint.json"))?;

    let record = RunRecord {
        algorithm: Algorithm::Ppo,
        seed: cfg.seed,
        spec: env_cfg.spec.clone(),
        sigma,
        shots: cfg.shots,
        threshold: cfg.threshold,
        budget: cfg.budget,
        controller: result.best_controller.clone(),
        env_calls: env.calls_made(),
        converged: result.converged,
        perceived_fidelity: result.best_perceived,
        true_fidelity: result.best_true,
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    export::export_records(std::slice::from_ref(&record), c.format, &runs_file(&c.out, c.format))?;
    let path = c.out.join("history.csv");
    let mut w = export::csv_writer(&path, "spinctl-ppo-history/1")?;
    export::write_row(&mut w, &path, ["epoch", "env_calls", "perceived_fidelity", "true_fidelity"])?;
    for (i, h) in result.history.iter().enumerate() {
        export::write_row(
            &mut w,
            &path,
            [i.to_string(), h.env_calls.to_string(), h.perceived_fidelity.to_string(), h.true_fidelity.to_string()],
        )?;
    }
    export::finish_csv(w, &path)?;
    let summary = summarize(std::slice::from_ref(&record));
    write_summary(&summary, &c.out.join("summary.csv"))?;
    print_summary(&summary);
    write_json(
        &c.out.join("metadata.json"),
        &Metadata {
            tool: "spinctl",
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect::<Vec<_>>().join(" "),
            started_unix_s,
            wall_time_s: record.wall_time_s,
            run_wall_times_s: vec![record.wall_time_s],
            config: &cfg,
            notes: notes(&cfg),
        },
    )
}

fn report(r: ReportArgs) -> spinctl::Result<()> {
    let format = r.format.unwrap_or(match r.input.extension().and_then(|e| e.to_str()) {
        Some("json") => Format::Json,
        _ => Format::Csv,
    });
    let records = export::load_records(&r.input, format)?;
    let rows = summarize(&records);
    print_summary(&rows);
    if let Some(out) = &r.out {
        write_summary(&rows, out)?;
    }
    Ok(())
}
