use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use ssi_core::dynamics::{data_matrices_from_csv, data_matrices_to_csv};
use ssi_core::experiment::{
    build_system, run_experiment, simulate_data, summarize, write_outputs, ExperimentConfig,
};
use ssi_core::graph::{read_trust_text, write_trust_text, SocialGraph, StubbornSupport, TrustSystem};
use ssi_core::identifiability::{b_range, IdentifiabilityParams, IdentifiabilityReport};
use ssi_core::identify::{relative_trust, solve_ssi, SolverOptions, SsiProblem};
use ssi_core::metrics::{evaluate, DEFAULT_SUPPORT_THRESHOLD};

#[derive(Parser)]
#[command(name = "ssi", version, about = "Social system identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a social graph and its ground-truth trust system.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Simulate K issues and write the data matrices.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trust system to simulate (as written by `generate`); sampled from
        /// the configuration when absent.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Recover relative trust from data matrices.
    Identify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Data matrices CSV (as written by `simulate`).
        #[arg(long)]
        data: PathBuf,
        /// Known stubborn support, `normal,stubborn` pairs in global indices.
        #[arg(long)]
        support: Option<PathBuf>,
        /// Ground truth; supplies the support if `--support` is absent and
        /// enables scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run a full Monte-Carlo experiment.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate the degree and magnitude identifiability conditions.
    CheckIdentifiability(CheckArgs),
}

/// Configuration sources, applied in order: preset, file, flags.
#[derive(Args)]
struct ConfigArgs {
    /// Starting parameter set: static-sweep or gossip-single.
    #[arg(long, default_value = "static-sweep")]
    preset: String,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n_normal: Option<String>,
    /// Stubborn counts, comma separated.
    #[arg(long)]
    n_s: Option<String>,
    #[arg(long)]
    p_e: Option<String>,
    /// Probability or `matched`.
    #[arg(long)]
    p_s: Option<String>,
    /// er, regular(d), or a comma list of both.
    #[arg(long)]
    placement: Option<String>,
    /// static or gossip.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    t_warmup: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    t_max: Option<String>,
    /// uniform or consecutive.
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    /// error or least_squares.
    #[arg(long)]
    on_infeasible: Option<String>,
    #[arg(long)]
    max_iter: Option<String>,
    #[arg(long)]
    trials: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg = ExperimentConfig::parse(&text, Some(cfg)).with_context(|| format!("in {}", path.display()))?;
        }
        // gamma after model so `--model gossip --gamma 0.3` keeps the gamma
        let flags = [
            ("scenario", &self.scenario),
            ("n_normal", &self.n_normal),
            ("n_s", &self.n_s),
            ("p_e", &self.p_e),
            ("p_s", &self.p_s),
            ("placement", &self.placement),
            ("model", &self.model),
            ("gamma", &self.gamma),
            ("sigma", &self.sigma),
            ("t_warmup", &self.t_warmup),
            ("samples", &self.samples),
            ("t_max", &self.t_max),
            ("sampling", &self.sampling),
            ("m", &self.m),
            ("k", &self.k),
            ("epsilon", &self.epsilon),
            ("lambda", &self.lambda),
            ("on_infeasible", &self.on_infeasible),
            ("max_iter", &self.max_iter),
            ("trials", &self.trials),
            ("seed", &self.seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CheckArgs {
    /// Number of normal agents.
    #[arg(long, default_value_t = 50)]
    n_normal: usize,
    /// Number of stubborn agents.
    #[arg(long)]
    n_s: usize,
    /// Stubborn degree of every normal agent.
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Smallest nonzero relative stubborn trust.
    #[arg(long)]
    b_min: Option<f64>,
    /// Largest relative stubborn trust.
    #[arg(long)]
    b_max: Option<f64>,
    /// Take b_min/b_max from this trust system (ground truth).
    #[arg(long, conflicts_with = "estimate")]
    truth: Option<PathBuf>,
    /// Take b_min/b_max from this estimate.
    #[arg(long)]
    estimate: Option<PathBuf>,
}

fn read_system(path: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_trust_text(BufReader::new(file)).with_context(|| format!("in {}", path.display()))
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn support_csv(support: &StubbornSupport) -> String {
    let ns = support.n_stub();
    let mut out = String::from("normal,stubborn\n");
    for (i, row) in support.rows().iter().enumerate() {
        for s in row {
            out.push_str(&format!("{},{s}\n", i + ns));
        }
    }
    out
}

fn read_support(path: &Path, n_normal: usize, n_stub: usize) -> Result<StubbornSupport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = vec![Vec::new(); n_normal];
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (i, s) = line
            .split_once(',')
            .with_context(|| format!("{}:{}: expected `normal,stubborn`", path.display(), k + 1))?;
        let (i, s): (usize, usize) = (i.trim().parse()?, s.trim().parse()?);
        if i < n_stub || i >= n_stub + n_normal || s >= n_stub {
            bail!("{}:{}: pair ({i}, {s}) out of range", path.display(), k + 1);
        }
        rows[i - n_stub].push(s);
    }
    Ok(StubbornSupport::new(n_stub, rows)?)
}

fn support_of(b: &DMatrix<f64>) -> Result<StubbornSupport> {
    let rows = (0..b.nrows())
        .map(|i| (0..b.ncols()).filter(|&s| b[(i, s)] != 0.0).collect())
        .collect();
    Ok(StubbornSupport::new(b.ncols(), rows)?)
}

fn first_cell(cfg: &ExperimentConfig) -> (usize, ssi_core::experiment::Placement) {
    (cfg.n_stub[0], cfg.placements[0])
}

fn generate(config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve()?;
    let (ns, placement) = first_cell(&cfg);
    let (graph, system) = build_system(&cfg, ns, placement, cfg.seed)?;
    let truth = write_file(&config.out_dir, "truth.txt", &write_trust_text(&system.b, &system.d))?;
    write_file(&config.out_dir, "support.csv", &support_csv(graph.support_b()))?;
    println!(
        "n = {}, n_s = {}, placement = {placement}, edges = {}, spectral_radius_d = {:.6} -> {}",
        graph.n_total(),
        ns,
        graph.edges().len(),
        system.spectral_radius_d(),
        truth.display()
    );
    Ok(())
}

fn simulate(config: &ConfigArgs, truth: Option<&Path>) -> Result<()> {
    let cfg = config.resolve()?;
    let (graph, system) = match truth {
        Some(path) => {
            let (b, d) = read_system(path)?;
            let system = TrustSystem::new(b, d)?;
            (SocialGraph::from_trust(&system)?, system)
        }
        None => {
            let (ns, placement) = first_cell(&cfg);
            build_system(&cfg, ns, placement, cfg.seed)?
        }
    };
    let data = simulate_data(&cfg, &graph, &system, cfg.seed)?;
    let path = write_file(&config.out_dir, "data.csv", &data_matrices_to_csv(&data))?;
    if truth.is_none() {
        write_file(&config.out_dir, "truth.txt", &write_trust_text(&system.b, &system.d))?;
    }
    println!(
        "{} issues x {} components, {} normal / {} stubborn agents -> {}",
        data.k,
        data.m,
        data.n_normal(),
        data.n_stub(),
        path.display()
    );
    Ok(())
}

fn identify(config: &ConfigArgs, data: &Path, support: Option<&Path>, truth: Option<&Path>) -> Result<()> {
    let cfg = config.resolve()?;
    let text = fs::read_to_string(data).with_context(|| format!("reading {}", data.display()))?;
    let data = data_matrices_from_csv(&text).with_context(|| format!("in {}", data.display()))?;
    let truth = truth.map(read_system).transpose()?;
    let support = match (support, &truth) {
        (Some(path), _) => read_support(path, data.n_normal(), data.n_stub())?,
        (None, Some((b, _))) => support_of(b)?,
        (None, None) => bail!("identify needs --support or --truth for the stubborn support"),
    };
    let mut problem = SsiProblem::new(data, support, cfg.epsilon());
    problem.options = SolverOptions {
        max_iter: cfg.max_iter,
        relax_infeasible: cfg.relax_infeasible,
        ..SolverOptions::default()
    };
    let est = solve_ssi(&problem)?;
    write_file(&config.out_dir, "estimate.txt", &est.to_text())?;
    let mut diagnostics = est.diagnostics_text();
    if let Some((b, d)) = &truth {
        let (br, dr) = relative_trust(b, d)?;
        let report = evaluate(&est.b_hat, &est.d_hat, &br, &dr, DEFAULT_SUPPORT_THRESHOLD)?;
        diagnostics.push_str(&format!(
            "nmse_d = {:e}\nnmse_b = {:e}\nsupport_error = {}\n",
            report.nmse_d, report.nmse_b, report.support_errors
        ));
    }
    write_file(&config.out_dir, "diagnostics.txt", &diagnostics)?;
    print!("{diagnostics}");
    Ok(())
}

fn experiment(config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve()?;
    let result = run_experiment(&cfg)?;
    let files = write_outputs(&result, &cfg, &config.out_dir)?;
    println!("n_s,placement,trials,nmse_d_mean,nmse_d_std,support_error_mean,support_error_std");
    for c in summarize(&result.rows) {
        println!(
            "{},{},{},{:.6e},{:.6e},{:.3},{:.3}",
            c.n_stub, c.placement, c.trials, c.nmse_d_mean, c.nmse_d_std, c.support_mean, c.support_std
        );
    }
    println!("wrote {} files to {}", files.len(), config.out_dir.display());
    Ok(())
}

fn check_identifiability(args: &CheckArgs) -> Result<()> {
    let source = args.truth.as_deref().or(args.estimate.as_deref());
    let (b_min, b_max) = match (source, args.b_min, args.b_max) {
        (Some(path), None, None) => {
            let (b, d) = read_system(path)?;
            let (br, _) = relative_trust(&b, &d)?;
            b_range(&br).with_context(|| format!("{} has no stubborn trust", path.display()))?
        }
        (None, Some(lo), Some(hi)) => (lo, hi),
        (Some(_), _, _) => bail!("give either a trust file or --b-min/--b-max, not both"),
        _ => bail!("need --b-min and --b-max, or --truth/--estimate"),
    };
    let params = IdentifiabilityParams::new(args.n_normal + args.n_s, args.n_s, args.d, args.alpha, b_min, b_max)?;
    print!("{}", IdentifiabilityReport::evaluate(params, args.estimate.is_some()).to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { config } => generate(config),
        Command::Simulate { config, truth } => simulate(config, truth.as_deref()),
        Command::Identify {
            config,
            data,
            support,
            truth,
        } => identify(config, data, support.as_deref(), truth.as_deref()),
        Command::Experiment { config } => experiment(config),
        Command::CheckIdentifiability(args) => check_identifiability(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
