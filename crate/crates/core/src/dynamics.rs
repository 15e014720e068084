//! Opinion exchange with stubborn agents: static DeGroot pooling and
//! randomized broadcast gossip, noisy snapshots, and the time-average
//! estimator of the terminal ensemble-mean opinion.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, Normal};

use crate::error::{Error, Result};
use crate::graph::{SocialGraph, TrustSystem};
use crate::seed::{self, stream};

/// Beliefs of all agents on one issue: row `i` is agent `i`'s belief vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionState {
    pub values: DMatrix<f64>,
    pub issue: usize,
    pub time: u64,
}

impl OpinionState {
    pub fn new(values: DMatrix<f64>, issue: usize) -> Self {
        Self {
            values,
            issue,
            time: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.values.ncols()
    }

    /// Every row in `[0,1]^m` with sum at most one, up to `tol`.
    pub fn is_valid_belief(&self, tol: f64) -> bool {
        self.values.row_iter().all(|r| {
            r.iter().all(|&v| v >= -tol && v <= 1.0 + tol) && r.sum() <= 1.0 + tol
        })
    }
}

/// Random initial beliefs: normal agents uniform on the belief simplex
/// prefix, stubborn agents uniform on `[0,1]^m` (rescaled onto the simplex
/// when the row sum exceeds one).
pub fn random_initial_state(
    n_total: usize,
    n_stub: usize,
    m: usize,
    issue: usize,
    rng: &mut seed::Rng,
) -> OpinionState {
    let mut values = DMatrix::zeros(n_total, m);
    for i in 0..n_total {
        if i < n_stub {
            let mut row: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = row.iter().sum();
            if s > 1.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
            for (c, v) in row.into_iter().enumerate() {
                values[(i, c)] = v;
            }
        } else {
            let e: Vec<f64> = (0..=m).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = e.iter().sum();
            for c in 0..m {
                values[(i, c)] = e[c] / s;
            }
        }
    }
    OpinionState::new(values, issue)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicsModel {
    /// `W(t)` equal to the mean trust matrix at every step.
    Static,
    /// One uniformly chosen agent broadcasts per step; listeners mix with weight `gamma`.
    Gossip { gamma: f64 },
}

impl DynamicsModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DynamicsModel::Static => Ok(()),
            DynamicsModel::Gossip { gamma } => check_gamma(gamma),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("gamma = {gamma} not in (0, 1)")))
    }
}

/// Warm-up time, sorted distinct sampling instants and horizon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingSchedule {
    t_warmup: u64,
    sample_times: Vec<u64>,
    t_max: u64,
}

impl SamplingSchedule {
    pub fn new(t_warmup: u64, mut sample_times: Vec<u64>, t_max: u64) -> Result<Self> {
        sample_times.sort_unstable();
        if sample_times.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("duplicate sample time".into()));
        }
        if let (Some(&lo), Some(&hi)) = (sample_times.first(), sample_times.last()) {
            if lo < t_warmup || hi > t_max {
                return Err(Error::InvalidParameter(format!(
                    "sample times [{lo}, {hi}] outside [{t_warmup}, {t_max}]"
                )));
            }
        }
        Ok(Self {
            t_warmup,
            sample_times,
            t_max,
        })
    }

    /// One snapshot taken at `t`.
    pub fn single(t: u64) -> Self {
        Self {
            t_warmup: t,
            sample_times: vec![t],
            t_max: t,
        }
    }

    /// `count` distinct instants drawn uniformly from `{t_warmup+1, ..., t_max}`.
    pub fn uniform(t_warmup: u64, t_max: u64, count: usize, rng: &mut seed::Rng) -> Result<Self> {
        let width = t_max.saturating_sub(t_warmup) as usize;
        if count > width {
            return Err(Error::InvalidParameter(format!(
                "cannot draw {count} distinct times from a window of {width}"
            )));
        }
        let times = rand::seq::index::sample(rng, width, count)
            .into_iter()
            .map(|k| t_warmup + 1 + k as u64)
            .collect();
        Self::new(t_warmup, times, t_max)
    }

    /// `count` consecutive instants right after the warm-up.
    pub fn consecutive(t_warmup: u64, count: usize) -> Self {
        let times: Vec<u64> = (1..=count as u64).map(|k| t_warmup + k).collect();
        Self {
            t_warmup,
            t_max: t_warmup + count as u64,
            sample_times: times,
        }
    }

    pub fn t_warmup(&self) -> u64 {
        self.t_warmup
    }

    pub fn sample_times(&self) -> &[u64] {
        &self.sample_times
    }

    pub fn t_max(&self) -> u64 {
        self.t_max
    }

    pub fn len(&self) -> usize {
        self.sample_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_times.is_empty()
    }
}

/// Noisy snapshots `y(t_i) = x(t_i) + n(t_i)` of one issue.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub snapshots: Vec<(u64, DMatrix<f64>)>,
    pub noise_sigma: f64,
}

/// Terminal estimates of `K` issues, normal rows in `y` and stubborn rows in
/// `z`, one column block of width `m` per issue.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub k: usize,
    pub m: usize,
}

impl DataMatrices {
    pub fn n_normal(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_stub(&self) -> usize {
        self.z.nrows()
    }
}

fn check_state(state: &OpinionState, n: usize) -> Result<()> {
    if state.n_agents() != n {
        return Err(Error::DimensionMismatch(format!(
            "state has {} agents, system has {n}",
            state.n_agents()
        )));
    }
    Ok(())
}

/// One step of `x(t+1) = W x(t)` with the mean trust matrix.
pub fn degroot_step(state: &OpinionState, system: &TrustSystem) -> Result<OpinionState> {
    check_state(state, system.n_total())?;
    let ns = system.n_stub();
    let nn = system.n_normal();
    let m = state.n_components();
    let stub = state.values.rows(0, ns);
    let normal = state.values.rows(ns, nn);
    let next_normal = &system.b * stub + &system.d * normal;
    let mut values = state.values.clone();
    values.view_mut((ns, 0), (nn, m)).copy_from(&next_normal);
    Ok(OpinionState {
        values,
        issue: state.issue,
        time: state.time + 1,
    })
}

/// The update matrix of a broadcast by `broadcaster`.
pub fn broadcast_matrix(graph: &SocialGraph, gamma: f64, broadcaster: usize) -> DMatrix<f64> {
    let n = graph.n_total();
    let mut w = DMatrix::identity(n, n);
    for &j in graph.neighbors(broadcaster) {
        if !graph.is_stubborn(j) {
            w[(j, j)] = gamma;
            w[(j, broadcaster)] = 1.0 - gamma;
        }
    }
    w
}

fn apply_broadcast(values: &mut DMatrix<f64>, graph: &SocialGraph, gamma: f64, i: usize) {
    for &j in graph.neighbors(i) {
        if !graph.is_stubborn(j) {
            for c in 0..values.ncols() {
                values[(j, c)] = gamma * values[(j, c)] + (1.0 - gamma) * values[(i, c)];
            }
        }
    }
}

/// One broadcast-gossip step with a uniformly drawn broadcaster.
pub fn broadcast_gossip_step(
    state: &OpinionState,
    graph: &SocialGraph,
    gamma: f64,
    rng: &mut seed::Rng,
) -> Result<OpinionState> {
    check_gamma(gamma)?;
    check_state(state, graph.n_total())?;
    let i = rng.gen_range(0..graph.n_total());
    let mut next = state.clone();
    apply_broadcast(&mut next.values, graph, gamma, i);
    next.time += 1;
    Ok(next)
}

/// Row-major gossip state for long trajectories.
struct GossipTrajectory<'g> {
    graph: &'g SocialGraph,
    gamma: f64,
    m: usize,
    x: Vec<f64>,
}

impl<'g> GossipTrajectory<'g> {
    fn new(graph: &'g SocialGraph, gamma: f64, values: &DMatrix<f64>) -> Self {
        let (n, m) = values.shape();
        let mut x = vec![0.0; n * m];
        for i in 0..n {
            for c in 0..m {
                x[i * m + c] = values[(i, c)];
            }
        }
        Self { graph, gamma, m, x }
    }

    #[inline]
    fn step(&mut self, broadcaster: usize) {
        let m = self.m;
        let g = self.gamma;
        for &j in self.graph.neighbors(broadcaster) {
            if !self.graph.is_stubborn(j) {
                for c in 0..m {
                    let src = self.x[broadcaster * m + c];
                    let dst = &mut self.x[j * m + c];
                    *dst = g * *dst + (1.0 - g) * src;
                }
            }
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.graph.n_total();
        DMatrix::from_row_slice(n, self.m, &self.x)
    }
}

/// Cached `W^(2^k)` powers of a static trust matrix.
#[derive(Debug, Clone)]
pub struct PowerCache {
    powers: Vec<DMatrix<f64>>,
}

impl PowerCache {
    pub fn new(system: &TrustSystem, t_max: u64) -> Self {
        let bits = (64 - t_max.leading_zeros()).max(1) as usize;
        let mut powers = Vec::with_capacity(bits);
        powers.push(system.full_matrix());
        for k in 1..bits {
            let p = &powers[k - 1] * &powers[k - 1];
            powers.push(p);
        }
        Self { powers }
    }

    /// `W^t x`, by binary decomposition of `t`.
    pub fn advance(&self, x: &DMatrix<f64>, t: u64) -> DMatrix<f64> {
        let mut out = x.clone();
        let mut k = 0;
        let mut rem = t;
        while rem > 0 {
            if rem & 1 == 1 {
                out = &self.powers[k] * out;
            }
            rem >>= 1;
            k += 1;
        }
        out
    }

    fn covers(&self, t: u64) -> bool {
        t < (1u64 << self.powers.len().min(63))
    }
}

/// Jumps shorter than this are taken step by step.
const STATIC_STEP_LIMIT: u64 = 32;

/// Simulation context reused across issues that share a trust system.
pub struct Simulator<'a> {
    system: &'a TrustSystem,
    graph: &'a SocialGraph,
    model: DynamicsModel,
    sigma: f64,
    powers: Option<PowerCache>,
}

impl<'a> Simulator<'a> {
    pub fn new(
        system: &'a TrustSystem,
        graph: &'a SocialGraph,
        model: DynamicsModel,
        sigma: f64,
        t_max: u64,
    ) -> Result<Self> {
        model.validate()?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma = {sigma} must be >= 0")));
        }
        if graph.n_total() != system.n_total() || graph.n_stub() != system.n_stub() {
            return Err(Error::DimensionMismatch(format!(
                "graph is {}/{} agents, system is {}/{}",
                graph.n_total(),
                graph.n_stub(),
                system.n_total(),
                system.n_stub()
            )));
        }
        let powers = match model {
            DynamicsModel::Static if t_max >= STATIC_STEP_LIMIT => {
                Some(PowerCache::new(system, t_max))
            }
            _ => None,
        };
        Ok(Self {
            system,
            graph,
            model,
            sigma,
            powers,
        })
    }

    /// Runs one issue from `x0` and records the scheduled noisy snapshots.
    pub fn run(&self, x0: &OpinionState, schedule: &SamplingSchedule, seed: u64) -> Result<SnapshotSet> {
        check_state(x0, self.system.n_total())?;
        let mut noise_rng = seed::rng(seed, &[stream::NOISE]);
        let noise = Normal::new(0.0, self.sigma)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut add_noise = |mut x: DMatrix<f64>| {
            if self.sigma > 0.0 {
                x.iter_mut()
                    .for_each(|v| *v += noise.sample(&mut noise_rng));
            }
            x
        };
        let mut snapshots = Vec::with_capacity(schedule.len());
        match self.model {
            DynamicsModel::Static => {
                let mut state = x0.clone();
                for &t in schedule.sample_times() {
                    let gap = t - state.time;
                    match &self.powers {
                        Some(p) if gap >= STATIC_STEP_LIMIT && p.covers(gap) => {
                            state.values = p.advance(&state.values, gap);
                            state.time = t;
                        }
                        _ => {
                            while state.time < t {
                                state = degroot_step(&state, self.system)?;
                            }
                        }
                    }
                    snapshots.push((t, add_noise(state.values.clone())));
                }
            }
            DynamicsModel::Gossip { gamma } => {
                let mut rng = seed::rng(seed, &[stream::DYNAMICS]);
                let n = self.graph.n_total();
                let mut traj = GossipTrajectory::new(self.graph, gamma, &x0.values);
                let mut now = x0.time;
                for &t in schedule.sample_times() {
                    while now < t {
                        let i = rng.gen_range(0..n);
                        traj.step(i);
                        now += 1;
                    }
                    snapshots.push((t, add_noise(traj.to_matrix())));
                }
            }
        }
        Ok(SnapshotSet {
            snapshots,
            noise_sigma: self.sigma,
        })
    }
}

/// Advances the dynamics from `x0` and samples `y(t_i) = x(t_i) + n(t_i)` at
/// each scheduled time, with i.i.d. Gaussian noise of standard deviation
/// `sigma`.
pub fn simulate_and_sample(
    system: &TrustSystem,
    graph: &SocialGraph,
    model: DynamicsModel,
    x0: &OpinionState,
    schedule: &SamplingSchedule,
    sigma: f64,
    seed: u64,
) -> Result<SnapshotSet> {
    if let Some(&first) = schedule.sample_times().first() {
        if first < x0.time {
            return Err(Error::InvalidParameter(format!(
                "first sample time {first} precedes initial time {}",
                x0.time
            )));
        }
    }
    Simulator::new(system, graph, model, sigma, schedule.t_max())?.run(x0, schedule, seed)
}

/// Arithmetic mean of the snapshots; the sample times play no role.
pub fn estimate_terminal(snapshots: &SnapshotSet) -> Result<DMatrix<f64>> {
    let mut it = snapshots.snapshots.iter();
    let (_, first) = it.next().ok_or(Error::EmptySnapshots)?;
    let mut sum = first.clone();
    for (_, y) in it {
        if y.shape() != sum.shape() {
            return Err(Error::DimensionMismatch("snapshot shapes differ".into()));
        }
        sum += y;
    }
    Ok(sum / snapshots.snapshots.len() as f64)
}

/// Terminal normal-agent opinions `(I - D)^{-1} B x_stub(0)`, by LU solve.
pub fn exact_terminal(system: &TrustSystem, x0: &OpinionState) -> Result<DMatrix<f64>> {
    check_state(x0, system.n_total())?;
    let ns = system.n_stub();
    let nn = system.n_normal();
    let rhs = &system.b * x0.values.rows(0, ns);
    let lhs = DMatrix::identity(nn, nn) - &system.d;
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SolveFailure("I - D is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolveFailure("I - D is numerically singular".into()));
    }
    Ok(sol)
}

/// `W(t) W(t-1) ... W(s)` for matrices given in time order (earliest
/// first); the empty product is the `n x n` identity.
pub fn phi_product(n: usize, matrices: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let mut acc = DMatrix::identity(n, n);
    for (k, w) in matrices.iter().enumerate() {
        if w.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "matrix {k} is {}x{}, expected {n}x{n}",
                w.nrows(),
                w.ncols()
            )));
        }
        acc = w * acc;
    }
    Ok(acc)
}

/// Stacks per-issue `n x m` estimates into `Y` (normal rows) and `Z`
/// (stubborn rows), issue-major.
pub fn assemble_data_matrices(estimates: &[DMatrix<f64>], n_stub: usize) -> Result<DataMatrices> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one issue is required".into()))?;
    let (n, m) = first.shape();
    if n_stub > n {
        return Err(Error::DimensionMismatch(format!("n_stub = {n_stub} exceeds {n} agents")));
    }
    let k = estimates.len();
    let nn = n - n_stub;
    let mut y = DMatrix::zeros(nn, k * m);
    let mut z = DMatrix::zeros(n_stub, k * m);
    for (s, est) in estimates.iter().enumerate() {
        if est.shape() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "issue {s} estimate is {}x{}, expected {n}x{m}",
                est.nrows(),
                est.ncols()
            )));
        }
        z.view_mut((0, s * m), (n_stub, m))
            .copy_from(&est.rows(0, n_stub));
        y.view_mut((0, s * m), (nn, m)).copy_from(&est.rows(n_stub, nn));
    }
    Ok(DataMatrices { y, z, k, m })
}

fn push_row(out: &mut String, head: &str, values: impl Iterator<Item = f64>) {
    out.push_str(head);
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

/// CSV with one row per agent and one column per (sample, component).
pub fn snapshots_to_csv(set: &SnapshotSet) -> String {
    let mut out = String::from("agent");
    let (n, m) = set
        .snapshots
        .first()
        .map(|(_, y)| y.shape())
        .unwrap_or((0, 0));
    for (t, _) in &set.snapshots {
        for c in 0..m {
            let _ = write!(out, ",t{t}_c{c}");
        }
    }
    out.push('\n');
    for i in 0..n {
        push_row(
            &mut out,
            &i.to_string(),
            set.snapshots
                .iter()
                .flat_map(|(_, y)| (0..m).map(move |c| y[(i, c)])),
        );
    }
    out
}

/// CSV with one row per agent (stubborn agents first) and one column per
/// (issue, component).
pub fn data_matrices_to_csv(data: &DataMatrices) -> String {
    let mut out = String::from("agent,role");
    for s in 0..data.k {
        for c in 0..data.m {
            let _ = write!(out, ",s{s}_c{c}");
        }
    }
    out.push('\n');
    let ns = data.n_stub();
    for i in 0..ns {
        push_row(&mut out, &format!("{i},stubborn"), data.z.row(i).iter().copied());
    }
    for i in 0..data.n_normal() {
        push_row(
            &mut out,
            &format!("{},normal", i + ns),
            data.y.row(i).iter().copied(),
        );
    }
    out
}

/// Parses the output of [`data_matrices_to_csv`].
pub fn data_matrices_from_csv(text: &str) -> Result<DataMatrices> {
    let bad = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "agent" || cols[1] != "role" {
        return Err(bad(1, format!("bad header {header:?}")));
    }
    let (k, m) = cols[cols.len() - 1]
        .strip_prefix('s')
        .and_then(|rest| rest.split_once("_c"))
        .and_then(|(s, c)| Some((s.parse::<usize>().ok()? + 1, c.parse::<usize>().ok()? + 1)))
        .ok_or_else(|| bad(1, format!("bad column name {:?}", cols[cols.len() - 1])))?;
    if k * m != cols.len() - 2 {
        return Err(bad(1, format!("{} value columns, expected {k} x {m}", cols.len() - 2)));
    }
    let mut stub_rows = Vec::new();
    let mut normal_rows = Vec::new();
    for (idx, line) in lines {
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != cols.len() {
            return Err(bad(idx + 1, format!("{} fields, expected {}", parts.len(), cols.len())));
        }
        let values = parts[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad(idx + 1, format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        match parts[1] {
            "stubborn" if normal_rows.is_empty() => stub_rows.push(values),
            "normal" => normal_rows.push(values),
            role => return Err(bad(idx + 1, format!("unexpected role {role:?}"))),
        }
    }
    let stack = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), k * m, |i, j| rows[i][j]);
    Ok(DataMatrices {
        y: stack(&normal_rows),
        z: stack(&stub_rows),
        k,
        m,
    })
}
