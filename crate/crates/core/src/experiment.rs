//! Monte-Carlo experiment harness.
//!
//! A configuration is a flat `key = value` file (`#` starts a comment).
//! [`run_experiment`] executes every `(n_s, placement, trial)` cell, in
//! parallel when enabled, and returns the rows in deterministic order.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;

use crate::dynamics::{
    assemble_data_matrices, estimate_terminal, random_initial_state, DataMatrices, DynamicsModel,
    SamplingSchedule, Simulator,
};
use crate::error::{Error, Result};
use crate::graph::{
    expected_gossip_matrix, generate_er_graph, generate_regular_graph, generate_trust_matrix,
    write_trust_text, SocialGraph, TrustSystem,
};
use crate::identify::{relative_trust, solve_ssi, Penalty, SolverOptions, SsiProblem};
use crate::metrics::{evaluate, DEFAULT_SUPPORT_THRESHOLD};
use crate::{parallel, seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    StaticSweep,
    GossipSingle,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Er,
    Regular(usize),
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Er => write!(f, "er"),
            Placement::Regular(d) => write!(f, "regular{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Distinct times drawn uniformly from `{t_warmup + 1, ..., t_max}`.
    Uniform,
    /// `t_warmup, t_warmup + 1, ...`.
    Consecutive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    Absolute(f64),
    /// `value * sqrt(K)`.
    PerSqrtIssue(f64),
    Lambda(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n_normal: usize,
    pub n_stub: Vec<usize>,
    pub p_e: f64,
    pub p_s: f64,
    /// Use `p_s = d / n_s` for ER placement so that the mean degree matches
    /// the regular placement.
    pub p_s_matched: bool,
    pub placements: Vec<Placement>,
    pub model: DynamicsModel,
    pub sigma: f64,
    pub t_warmup: u64,
    pub samples: usize,
    pub t_max: u64,
    pub sampling: Sampling,
    pub m: usize,
    pub k: usize,
    pub tolerance: Tolerance,
    /// Fall back to the minimum-residual estimate when the tolerance is
    /// below the attainable residual (`on_infeasible = least_squares`)
    /// instead of failing the trial (`on_infeasible = error`).
    pub relax_infeasible: bool,
    pub max_iter: usize,
    pub trials: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Static sweep: noiseless DeGroot, single sample at `T_o = 10^4`.
    pub fn static_sweep() -> Self {
        Self {
            scenario: Scenario::StaticSweep,
            n_normal: 50,
            n_stub: vec![10, 20, 30, 40, 50],
            p_e: 0.15,
            p_s: 0.15,
            p_s_matched: true,
            placements: vec![Placement::Er, Placement::Regular(8)],
            model: DynamicsModel::Static,
            sigma: 0.0,
            t_warmup: 10_000,
            samples: 1,
            t_max: 10_000,
            sampling: Sampling::Consecutive,
            m: 1,
            k: 100,
            tolerance: Tolerance::Absolute(1e-8),
            relax_infeasible: false,
            max_iter: 50_000,
            trials: 100,
            seed: 1,
        }
    }

    /// Single gossip instance with noisy, uniformly spread samples.
    pub fn gossip_single() -> Self {
        Self {
            scenario: Scenario::GossipSingle,
            n_normal: 50,
            n_stub: vec![30],
            p_e: 0.15,
            p_s: 0.15,
            p_s_matched: false,
            placements: vec![Placement::Er],
            model: DynamicsModel::Gossip { gamma: 0.5 },
            sigma: 1e-2,
            t_warmup: 1_000,
            samples: 3_000,
            t_max: 100_000,
            sampling: Sampling::Uniform,
            m: 1,
            k: 100,
            tolerance: Tolerance::PerSqrtIssue(1.65e-2),
            relax_infeasible: true,
            max_iter: 50_000,
            trials: 1,
            seed: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "static-sweep" => Ok(Self::static_sweep()),
            "gossip-single" => Ok(Self::gossip_single()),
            other => Err(Error::InvalidParameter(format!("unknown preset '{other}'"))),
        }
    }

    /// Parses a config file on top of `base` (or the custom defaults).
    pub fn parse(text: &str, base: Option<Self>) -> Result<Self> {
        let mut cfg = base.unwrap_or_else(|| Self {
            scenario: Scenario::Custom,
            ..Self::static_sweep()
        });
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; keys are the ones written by [`Self::to_text`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidParameter(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "scenario" => {
                self.scenario = match value {
                    "static-sweep" => Scenario::StaticSweep,
                    "gossip-single" => Scenario::GossipSingle,
                    "custom" => Scenario::Custom,
                    _ => return Err(Error::InvalidParameter(format!("scenario '{value}'"))),
                }
            }
            "n_normal" => self.n_normal = num(key, value)?,
            "n_s" => {
                self.n_stub = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "p_e" => self.p_e = num(key, value)?,
            "p_s" => {
                if value == "matched" {
                    self.p_s_matched = true;
                } else {
                    self.p_s = num(key, value)?;
                    self.p_s_matched = false;
                }
            }
            "placement" => {
                self.placements = value
                    .split(',')
                    .map(|v| parse_placement(v.trim()))
                    .collect::<Result<_>>()?
            }
            "model" => {
                self.model = match value {
                    "static" => DynamicsModel::Static,
                    "gossip" => DynamicsModel::Gossip {
                        gamma: match self.model {
                            DynamicsModel::Gossip { gamma } => gamma,
                            DynamicsModel::Static => 0.5,
                        },
                    },
                    _ => return Err(Error::InvalidParameter(format!("model '{value}'"))),
                }
            }
            "gamma" => {
                self.model = DynamicsModel::Gossip {
                    gamma: num(key, value)?,
                }
            }
            "sigma" => self.sigma = num(key, value)?,
            "noise_variance" => self.sigma = num::<f64>(key, value)?.sqrt(),
            "t_warmup" => self.t_warmup = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "sampling" => {
                self.sampling = match value {
                    "uniform" => Sampling::Uniform,
                    "consecutive" => Sampling::Consecutive,
                    _ => return Err(Error::InvalidParameter(format!("sampling '{value}'"))),
                }
            }
            "m" => self.m = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "epsilon" => self.tolerance = Tolerance::Absolute(num(key, value)?),
            "epsilon_per_sqrt_k" => self.tolerance = Tolerance::PerSqrtIssue(num(key, value)?),
            "lambda" => self.tolerance = Tolerance::Lambda(num(key, value)?),
            "on_infeasible" => {
                self.relax_infeasible = match value {
                    "error" => false,
                    "least_squares" => true,
                    _ => return Err(Error::InvalidParameter(format!("on_infeasible '{value}'"))),
                }
            }
            "max_iter" => self.max_iter = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::InvalidParameter(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_normal == 0 || self.m == 0 || self.k == 0 || self.trials == 0 || self.samples == 0 {
            return bad("n_normal, m, k, samples and trials must be positive".into());
        }
        if self.n_stub.is_empty() || self.n_stub.contains(&0) {
            return bad("n_s needs at least one positive value".into());
        }
        if self.n_stub.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_s values must be strictly increasing".into());
        }
        if self.placements.is_empty() {
            return bad("no placement".into());
        }
        if self.p_s_matched && !self.placements.iter().any(|p| matches!(p, Placement::Regular(_))) {
            return bad("p_s = matched needs a regular placement to match".into());
        }
        if self.t_max < self.t_warmup {
            return bad(format!("t_max = {} < t_warmup = {}", self.t_max, self.t_warmup));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma = {}", self.sigma));
        }
        self.model.validate()
    }

    pub fn epsilon(&self) -> Penalty {
        match self.tolerance {
            Tolerance::Absolute(e) => Penalty::Epsilon(e),
            Tolerance::PerSqrtIssue(e) => Penalty::Epsilon(e * (self.k as f64).sqrt()),
            Tolerance::Lambda(l) => Penalty::Lambda(l),
        }
    }

    /// Canonical `key = value` form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |v: Vec<String>| v.join(",");
        let scenario = match self.scenario {
            Scenario::StaticSweep => "static-sweep",
            Scenario::GossipSingle => "gossip-single",
            Scenario::Custom => "custom",
        };
        let _ = writeln!(out, "scenario = {scenario}");
        let _ = writeln!(out, "n_normal = {}", self.n_normal);
        let _ = writeln!(out, "n_s = {}", join(self.n_stub.iter().map(|v| v.to_string()).collect()));
        let _ = writeln!(out, "p_e = {}", self.p_e);
        if self.p_s_matched {
            let _ = writeln!(out, "p_s = matched");
        } else {
            let _ = writeln!(out, "p_s = {}", self.p_s);
        }
        let _ = writeln!(out, "placement = {}", join(self.placements.iter().map(|p| p.to_string()).collect()));
        match self.model {
            DynamicsModel::Static => {
                let _ = writeln!(out, "model = static");
            }
            DynamicsModel::Gossip { gamma } => {
                let _ = writeln!(out, "model = gossip");
                let _ = writeln!(out, "gamma = {gamma}");
            }
        }
        let _ = writeln!(out, "sigma = {}", self.sigma);
        let _ = writeln!(out, "t_warmup = {}", self.t_warmup);
        let _ = writeln!(out, "samples = {}", self.samples);
        let _ = writeln!(out, "t_max = {}", self.t_max);
        let sampling = match self.sampling {
            Sampling::Uniform => "uniform",
            Sampling::Consecutive => "consecutive",
        };
        let _ = writeln!(out, "sampling = {sampling}");
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "k = {}", self.k);
        match self.tolerance {
            Tolerance::Absolute(e) => writeln!(out, "epsilon = {e}"),
            Tolerance::PerSqrtIssue(e) => writeln!(out, "epsilon_per_sqrt_k = {e}"),
            Tolerance::Lambda(l) => writeln!(out, "lambda = {l}"),
        }
        .ok();
        let policy = if self.relax_infeasible { "least_squares" } else { "error" };
        let _ = writeln!(out, "on_infeasible = {policy}");
        let _ = writeln!(out, "max_iter = {}", self.max_iter);
        let _ = writeln!(out, "trials = {}", self.trials);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }
}

fn parse_placement(v: &str) -> Result<Placement> {
    if v == "er" {
        return Ok(Placement::Er);
    }
    let d = v
        .strip_prefix("regular")
        .map(|d| d.trim_start_matches(['(', ':']).trim_end_matches(')'))
        .ok_or_else(|| Error::InvalidParameter(format!("placement '{v}'")))?;
    d.parse()
        .map(Placement::Regular)
        .map_err(|_| Error::InvalidParameter(format!("placement '{v}'")))
}

/// Result of one `(n_s, placement, trial)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub n_stub: usize,
    pub placement: Placement,
    pub nmse_d: f64,
    pub nmse_b: f64,
    pub support_error: usize,
    pub residual: f64,
    pub lambda: f64,
    pub converged: bool,
    /// False when the tolerance was infeasible and the fallback was used.
    pub epsilon_feasible: bool,
    pub wall_time_s: f64,
}

/// Ground truth and estimate of one trial, in relative-trust form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialArtifacts {
    pub b_truth: DMatrix<f64>,
    pub d_truth: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<TrialRow>,
    /// Artifacts of the last trial run.
    pub last: Option<TrialArtifacts>,
}

/// Graph, observed data and truth for one trial.
pub struct TrialInstance {
    pub graph: SocialGraph,
    /// The system whose terminal behaviour the data reflects (the mean
    /// matrix under gossip).
    pub truth: TrustSystem,
    pub data: DataMatrices,
}

fn trial_seed(cfg: &ExperimentConfig, n_stub: usize, placement: usize, trial: usize) -> u64 {
    seed::derive(cfg.seed, &[n_stub as u64, placement as u64, trial as u64])
}

/// Graph and trust system of one trial. Under gossip the system is the
/// expected update matrix.
pub fn build_system(
    cfg: &ExperimentConfig,
    n_stub: usize,
    placement: Placement,
    tseed: u64,
) -> Result<(SocialGraph, TrustSystem)> {
    let graph = match placement {
        Placement::Er => {
            let p_s = if cfg.p_s_matched {
                let d = cfg
                    .placements
                    .iter()
                    .find_map(|p| match p {
                        Placement::Regular(d) => Some(*d),
                        Placement::Er => None,
                    })
                    .unwrap_or(1);
                (d as f64 / n_stub as f64).min(1.0)
            } else {
                cfg.p_s
            };
            generate_er_graph(cfg.n_normal, n_stub, cfg.p_e, p_s, tseed)?
        }
        Placement::Regular(d) => generate_regular_graph(cfg.n_normal, n_stub, cfg.p_e, d, tseed)?,
    };
    let system = match cfg.model {
        DynamicsModel::Static => {
            generate_trust_matrix(&graph, seed::derive(tseed, &[seed::stream::TRUST]))?
        }
        DynamicsModel::Gossip { gamma } => expected_gossip_matrix(&graph, gamma)?,
    };
    Ok((graph, system))
}

/// Simulates the configured `K` issues on `graph` and stacks the terminal
/// estimates. Issue `s` uses seeds derived from `(tseed, s)`.
pub fn simulate_data(
    cfg: &ExperimentConfig,
    graph: &SocialGraph,
    system: &TrustSystem,
    tseed: u64,
) -> Result<DataMatrices> {
    let n = graph.n_total();
    let n_stub = graph.n_stub();
    let sim = Simulator::new(system, graph, cfg.model, cfg.sigma, cfg.t_max)?;
    let estimates = parallel::map_indices(cfg.k, |issue| -> Result<DMatrix<f64>> {
        let iseed = seed::derive(tseed, &[issue as u64]);
        let mut init_rng = seed::rng(iseed, &[seed::stream::INITIAL]);
        let x0 = random_initial_state(n, n_stub, cfg.m, issue, &mut init_rng);
        let schedule = match cfg.sampling {
            Sampling::Consecutive => SamplingSchedule::consecutive(cfg.t_warmup, cfg.samples),
            Sampling::Uniform => {
                let mut srng = seed::rng(iseed, &[seed::stream::SCHEDULE]);
                SamplingSchedule::uniform(cfg.t_warmup, cfg.t_max, cfg.samples, &mut srng)?
            }
        };
        let snaps = sim.run(&x0, &schedule, iseed)?;
        estimate_terminal(&snaps)
    });
    let estimates = estimates.into_iter().collect::<Result<Vec<_>>>()?;
    assemble_data_matrices(&estimates, n_stub)
}

/// Builds the graph, simulates all issues and assembles the data matrices.
pub fn prepare_trial(cfg: &ExperimentConfig, n_stub: usize, placement: Placement, tseed: u64) -> Result<TrialInstance> {
    let (graph, truth) = build_system(cfg, n_stub, placement, tseed)?;
    let data = simulate_data(cfg, &graph, &truth, tseed)?;
    Ok(TrialInstance { graph, truth, data })
}

fn run_trial(
    cfg: &ExperimentConfig,
    n_stub: usize,
    placement: Placement,
    trial: usize,
    tseed: u64,
) -> Result<(TrialRow, TrialArtifacts)> {
    let start = Instant::now();
    let inst = prepare_trial(cfg, n_stub, placement, tseed)?;
    let mut problem = SsiProblem::new(inst.data, inst.graph.support_b().clone(), cfg.epsilon());
    problem.options = SolverOptions {
        max_iter: cfg.max_iter,
        relax_infeasible: cfg.relax_infeasible,
        ..SolverOptions::default()
    };
    let est = solve_ssi(&problem)?;
    let (b_truth, d_truth) = relative_trust(&inst.truth.b, &inst.truth.d)?;
    let report = evaluate(&est.b_hat, &est.d_hat, &b_truth, &d_truth, DEFAULT_SUPPORT_THRESHOLD)?;
    let row = TrialRow {
        trial,
        n_stub,
        placement,
        nmse_d: report.nmse_d,
        nmse_b: report.nmse_b,
        support_error: report.support_errors,
        residual: est.residual,
        lambda: est.penalty,
        converged: est.converged(),
        epsilon_feasible: est.epsilon_feasible,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let artifacts = TrialArtifacts {
        b_truth,
        d_truth,
        diagnostics: est.diagnostics_text(),
        b_hat: est.b_hat,
        d_hat: est.d_hat,
    };
    Ok((row, artifacts))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &ns in &cfg.n_stub {
        for (pi, &placement) in cfg.placements.iter().enumerate() {
            for trial in 0..cfg.trials {
                cells.push((ns, pi, placement, trial));
            }
        }
    }
    let last_index = cells.len().saturating_sub(1);
    let outcomes = parallel::map_indices(cells.len(), |c| {
        let (ns, pi, placement, trial) = cells[c];
        run_trial(cfg, ns, placement, trial, trial_seed(cfg, ns, pi, trial)).map_err(|e| Error::Trial {
            trial,
            n_stub: ns,
            source: Box::new(e),
        })
    });
    let mut rows = Vec::with_capacity(cells.len());
    let mut last = None;
    for (c, outcome) in outcomes.into_iter().enumerate() {
        let (row, art) = outcome?;
        rows.push(row);
        if c == last_index {
            last = Some(art);
        }
    }
    Ok(ExperimentResult { rows, last })
}

pub const RESULTS_HEADER: &str =
    "trial,n_s,placement,nmse_d,nmse_b,support_error,residual,lambda,converged,epsilon_feasible";

/// Per-cell results; deterministic for a given configuration.
pub fn results_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{},{:e},{:e},{},{}",
            r.trial,
            r.n_stub,
            r.placement,
            r.nmse_d,
            r.nmse_b,
            r.support_error,
            r.residual,
            r.lambda,
            r.converged,
            r.epsilon_feasible
        );
    }
    out
}

/// Wall-clock time per cell (kept apart so the results file is reproducible).
pub fn timings_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from("trial,n_s,placement,wall_time_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.trial, r.n_stub, r.placement, r.wall_time_s);
    }
    out
}

/// Mean and (sample) standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and standard deviation of one `(n_s, placement)` group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub n_stub: usize,
    pub placement: Placement,
    pub trials: usize,
    pub nmse_d_mean: f64,
    pub nmse_d_std: f64,
    pub support_mean: f64,
    pub support_std: f64,
}

/// Groups rows by `(n_s, placement)`, ordered by `n_s` then placement name.
pub fn summarize(rows: &[TrialRow]) -> Vec<CellSummary> {
    type Group = (Placement, Vec<f64>, Vec<f64>);
    let mut groups: BTreeMap<(usize, String), Group> = BTreeMap::new();
    for r in rows {
        let e = groups
            .entry((r.n_stub, r.placement.to_string()))
            .or_insert_with(|| (r.placement, Vec::new(), Vec::new()));
        e.1.push(r.nmse_d);
        e.2.push(r.support_error as f64);
    }
    groups
        .into_iter()
        .map(|((n_stub, _), (placement, nm, se))| {
            let (nmse_d_mean, nmse_d_std) = mean_std(&nm);
            let (support_mean, support_std) = mean_std(&se);
            CellSummary {
                n_stub,
                placement,
                trials: nm.len(),
                nmse_d_mean,
                nmse_d_std,
                support_mean,
                support_std,
            }
        })
        .collect()
}

fn dense_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes plot-ready files into `dir` and returns their paths: the
/// n_s-sweep panels (mean/std of nmse and of support error) and dense
/// heatmap dumps of the last trial's true and estimated `D^r`.
pub fn emit_plotdata(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.rows.is_empty() {
        return Err(Error::InvalidParameter("empty result table".into()));
    }
    std::fs::create_dir_all(dir)?;
    let summary = summarize(&result.rows);
    let mut nmse = String::from("n_s,placement,trials,nmse_d_mean,nmse_d_std\n");
    let mut supp = String::from("n_s,placement,trials,support_error_mean,support_error_std\n");
    for c in &summary {
        let head = format!("{},{},{}", c.n_stub, c.placement, c.trials);
        let _ = writeln!(nmse, "{head},{:e},{:e}", c.nmse_d_mean, c.nmse_d_std);
        let _ = writeln!(supp, "{head},{},{}", c.support_mean, c.support_std);
    }
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("sweep_nmse.csv", &nmse)?;
    put("sweep_support.csv", &supp)?;
    if let Some(last) = &result.last {
        put("heatmap_truth.csv", &dense_csv(&last.d_truth))?;
        put("heatmap_estimate.csv", &dense_csv(&last.d_hat))?;
    }
    Ok(written)
}

/// Writes results, timings, sparse truth/estimate and diagnostics of the
/// last trial, plus plot data.
pub fn write_outputs(result: &ExperimentResult, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("config.txt", cfg.to_text())?;
    put("results.csv", results_csv(&result.rows))?;
    put("timings.csv", timings_csv(&result.rows))?;
    if let Some(last) = &result.last {
        put("truth.txt", write_trust_text(&last.b_truth, &last.d_truth))?;
        put("estimate.txt", write_trust_text(&last.b_hat, &last.d_hat))?;
        put("diagnostics.txt", last.diagnostics.clone())?;
    }
    written.extend(emit_plotdata(result, dir)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_normal: 8,
            n_stub: vec![6],
            placements: vec![Placement::Regular(3)],
            p_s_matched: false,
            k: 12,
            trials: 2,
            t_warmup: 500,
            t_max: 500,
            ..ExperimentConfig::static_sweep()
        }
    }

    #[test]
    fn config_round_trip() {
        for cfg in [ExperimentConfig::static_sweep(), ExperimentConfig::gossip_single(), tiny()] {
            let again = ExperimentConfig::parse(&cfg.to_text(), None).unwrap();
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn config_parse_errors() {
        assert!(matches!(
            ExperimentConfig::parse("n_normal 5", None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("# c\nbogus = 1", None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(ExperimentConfig::parse("n_s = 30, 20", None).is_err());
        assert!(ExperimentConfig::parse("trials = 0", None).is_err());
        let c = ExperimentConfig::parse("noise_variance = 1e-4  # comment\nplacement = er, regular(5)\np_s = 0.2", None).unwrap();
        assert!((c.sigma - 1e-2).abs() < 1e-15);
        assert_eq!(c.placements, vec![Placement::Er, Placement::Regular(5)]);
        assert!(!c.p_s_matched);
    }

    #[test]
    fn presets() {
        let g = ExperimentConfig::preset("gossip-single").unwrap();
        assert_eq!(g.n_stub, vec![30]);
        assert_eq!((g.t_warmup, g.samples, g.t_max), (1_000, 3_000, 100_000));
        match g.epsilon() {
            Penalty::Epsilon(e) => assert!((e - 0.165).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn deterministic_csv() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(results_csv(&a.rows), results_csv(&b.rows));
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[1].trial, 1);
    }

    #[test]
    fn plotdata_files() {
        let cfg = ExperimentConfig { trials: 1, ..tiny() };
        let res = run_experiment(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("ssi-plot-{}", std::process::id()));
        let files = emit_plotdata(&res, &dir).unwrap();
        assert_eq!(files.len(), 4);
        let sweep = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(sweep.lines().count(), 2);
        let empty = ExperimentResult { rows: vec![], last: None };
        assert!(emit_plotdata(&empty, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
