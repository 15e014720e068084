//! Social graphs with stubborn agents and their ground-truth trust systems.
//!
//! Agents `0..n_stub` are stubborn; agents `n_stub..n_total` are normal. A
//! normal agent is addressed either by its global index or by its local index
//! `global - n_stub`, which is its row in the `B` and `D` trust blocks.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::DMatrix;
use rand::distributions::Open01;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Resample budget used by the random generators.
pub const DEFAULT_MAX_RETRIES: usize = 100;

/// Row-sum tolerance accepted when validating trust systems.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Stubborn neighbours of every normal agent (the known support of `B`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubbornSupport {
    n_stub: usize,
    rows: Vec<Vec<usize>>,
}

impl StubbornSupport {
    /// `rows[i]` lists the stubborn agents normal agent `i` listens to.
    pub fn new(n_stub: usize, mut rows: Vec<Vec<usize>>) -> Result<Self> {
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&s) = row.last() {
                if s >= n_stub {
                    return Err(Error::InvalidParameter(format!(
                        "support row {i} references stubborn agent {s} >= {n_stub}"
                    )));
                }
            }
        }
        Ok(Self { n_stub, rows })
    }

    /// Every normal agent connected to every stubborn agent.
    pub fn complete(n_normal: usize, n_stub: usize) -> Self {
        Self {
            n_stub,
            rows: vec![(0..n_stub).collect(); n_normal],
        }
    }

    pub fn n_normal(&self) -> usize {
        self.rows.len()
    }

    pub fn n_stub(&self) -> usize {
        self.n_stub
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, s: usize) -> bool {
        self.rows[i].binary_search(&s).is_ok()
    }

    /// Number of (normal, stubborn) pairs.
    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every normal agent has at least one stubborn neighbour.
    pub fn covers_all_rows(&self) -> bool {
        self.rows.iter().all(|r| !r.is_empty())
    }

    /// 0/1 indicator matrix, `n_normal x n_stub`.
    pub fn mask(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_normal(), self.n_stub);
        for (i, row) in self.rows.iter().enumerate() {
            for &s in row {
                m[(i, s)] = 1.0;
            }
        }
        m
    }
}

/// Undirected social graph whose first `n_stub` vertices are stubborn.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialGraph {
    n_total: usize,
    n_stub: usize,
    edges: BTreeSet<(usize, usize)>,
    support_b: StubbornSupport,
    neighbors: Vec<Vec<usize>>,
}

impl SocialGraph {
    /// Builds a graph from global-index edges. Self loops are dropped and
    /// pairs are stored with the smaller index first. The stubborn support
    /// is derived from the (normal, stubborn) edges.
    ///
    /// Only structural checks happen here; see [`SocialGraph::check_assumptions`].
    pub fn new(
        n_total: usize,
        n_stub: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if n_stub > n_total {
            return Err(Error::InvalidParameter(format!(
                "n_stub = {n_stub} exceeds n_total = {n_total}"
            )));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_total || b >= n_total {
                return Err(Error::InvalidParameter(format!(
                    "edge ({a}, {b}) out of range for {n_total} agents"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let mut neighbors = vec![Vec::new(); n_total];
        let mut rows = vec![Vec::new(); n_total - n_stub];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
            if a < n_stub && b >= n_stub {
                rows[b - n_stub].push(a);
            }
        }
        Ok(Self {
            n_total,
            n_stub,
            edges: set,
            support_b: StubbornSupport::new(n_stub, rows)?,
            neighbors,
        })
    }

    /// Graph from local normal-normal edges plus a stubborn support pattern.
    pub fn from_support(
        n_normal: usize,
        normal_edges: impl IntoIterator<Item = (usize, usize)>,
        support: &StubbornSupport,
    ) -> Result<Self> {
        if support.n_normal() != n_normal {
            return Err(Error::DimensionMismatch(format!(
                "support has {} rows, expected {n_normal}",
                support.n_normal()
            )));
        }
        let ns = support.n_stub();
        let mut edges: Vec<(usize, usize)> = normal_edges
            .into_iter()
            .map(|(a, b)| (a + ns, b + ns))
            .collect();
        for (i, row) in support.rows().iter().enumerate() {
            edges.extend(row.iter().map(|&s| (s, i + ns)));
        }
        Self::new(n_normal + ns, ns, edges)
    }

    /// Recovers the graph implied by a trust system: an edge wherever trust
    /// is positive in at least one direction.
    pub fn from_trust(system: &TrustSystem) -> Result<Self> {
        let ns = system.n_stub();
        let nn = system.n_normal();
        let mut edges = Vec::new();
        for i in 0..nn {
            for s in 0..ns {
                if system.b[(i, s)] > 0.0 {
                    edges.push((s, i + ns));
                }
            }
            for j in 0..nn {
                if i != j && system.d[(i, j)] > 0.0 {
                    edges.push((i + ns, j + ns));
                }
            }
        }
        Self::new(nn + ns, ns, edges)
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_stub(&self) -> usize {
        self.n_stub
    }

    pub fn n_normal(&self) -> usize {
        self.n_total - self.n_stub
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn support_b(&self) -> &StubbornSupport {
        &self.support_b
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn is_stubborn(&self, agent: usize) -> bool {
        agent < self.n_stub
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn is_connected(&self) -> bool {
        if self.n_total == 0 {
            return true;
        }
        let mut seen = vec![false; self.n_total];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n_total
    }

    /// Connectivity and "every normal agent listens to a stubborn agent".
    pub fn check_assumptions(&self) -> Result<()> {
        if !self.is_connected() {
            return Err(Error::InvalidParameter("graph is not connected".into()));
        }
        if let Some(i) = self.support_b.rows().iter().position(Vec::is_empty) {
            return Err(Error::InvalidParameter(format!(
                "normal agent {} has no stubborn neighbour",
                i + self.n_stub
            )));
        }
        Ok(())
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {p} not in (0, 1]")))
    }
}

fn er_normal_edges(n_normal: usize, p_e: f64, rng: &mut seed::Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n_normal {
        for j in (i + 1)..n_normal {
            if rng.gen_bool(p_e) {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn retry_graph<F>(max_retries: usize, mut attempt: F) -> Result<SocialGraph>
where
    F: FnMut(u64) -> Result<SocialGraph>,
{
    let mut last = String::from("no attempts made");
    for k in 0..max_retries {
        let g = attempt(k as u64)?;
        match g.check_assumptions() {
            Ok(()) => return Ok(g),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: max_retries,
        reason: last,
    })
}

/// Erdős–Rényi graph: normal-normal pairs with probability `p_e`,
/// (normal, stubborn) pairs with probability `p_s`, resampled until the graph
/// is connected and every normal agent has a stubborn neighbour.
pub fn generate_er_graph(
    n_normal: usize,
    n_stub: usize,
    p_e: f64,
    p_s: f64,
    seed: u64,
) -> Result<SocialGraph> {
    generate_er_graph_with_retries(n_normal, n_stub, p_e, p_s, seed, DEFAULT_MAX_RETRIES)
}

pub fn generate_er_graph_with_retries(
    n_normal: usize,
    n_stub: usize,
    p_e: f64,
    p_s: f64,
    seed: u64,
    max_retries: usize,
) -> Result<SocialGraph> {
    check_probability("p_e", p_e)?;
    check_probability("p_s", p_s)?;
    if n_normal == 0 {
        return Err(Error::InvalidParameter("n_normal must be >= 1".into()));
    }
    retry_graph(max_retries, |attempt| {
        let mut rng = seed::rng(seed, &[stream::GRAPH, attempt]);
        let normal_edges = er_normal_edges(n_normal, p_e, &mut rng);
        let rows = (0..n_normal)
            .map(|_| (0..n_stub).filter(|_| rng.gen_bool(p_s)).collect())
            .collect();
        let support = StubbornSupport::new(n_stub, rows)?;
        SocialGraph::from_support(n_normal, normal_edges, &support)
    })
}

/// Each normal agent gets exactly `d` distinct stubborn neighbours, drawn
/// uniformly without replacement and independently across agents.
pub fn place_stubborn_regular(
    n_normal: usize,
    n_stub: usize,
    d: usize,
    seed: u64,
) -> Result<StubbornSupport> {
    if d > n_stub {
        return Err(Error::DegreeTooLarge { d, n_stub });
    }
    if d == 0 {
        return Err(Error::InvalidParameter("stubborn degree must be >= 1".into()));
    }
    let mut rng = seed::rng(seed, &[stream::PLACEMENT]);
    let rows = (0..n_normal)
        .map(|_| rand::seq::index::sample(&mut rng, n_stub, d).into_vec())
        .collect();
    StubbornSupport::new(n_stub, rows)
}

/// ER normal-normal graph combined with a regular stubborn placement.
pub fn generate_regular_graph(
    n_normal: usize,
    n_stub: usize,
    p_e: f64,
    d: usize,
    seed: u64,
) -> Result<SocialGraph> {
    check_probability("p_e", p_e)?;
    if n_normal == 0 {
        return Err(Error::InvalidParameter("n_normal must be >= 1".into()));
    }
    retry_graph(DEFAULT_MAX_RETRIES, |attempt| {
        let mut rng = seed::rng(seed, &[stream::GRAPH, attempt]);
        let normal_edges = er_normal_edges(n_normal, p_e, &mut rng);
        let support =
            place_stubborn_regular(n_normal, n_stub, d, seed::derive(seed, &[attempt]))?;
        SocialGraph::from_support(n_normal, normal_edges, &support)
    })
}

/// Mean trust of the normal agents: `B` (normal -> stubborn) and `D`
/// (normal -> normal). The stubborn rows of the full matrix are the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustSystem {
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    spectral_radius_d: f64,
}

impl TrustSystem {
    /// Validates nonnegativity, row-stochasticity of `[B D]` and
    /// `spectral_radius(D) < 1`.
    pub fn new(b: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != d.nrows() || d.nrows() != d.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{}, D is {}x{}",
                b.nrows(),
                b.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        if b.iter().chain(d.iter()).any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("trust weights must be finite and >= 0".into()));
        }
        for i in 0..b.nrows() {
            let s = b.row(i).sum() + d.row(i).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!("row {i} of [B D] sums to {s}")));
            }
        }
        let rho = spectral_radius(&d);
        if rho >= 1.0 - 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "spectral radius of D is {rho}, expected < 1"
            )));
        }
        Ok(Self {
            b,
            d,
            spectral_radius_d: rho,
        })
    }

    pub fn n_normal(&self) -> usize {
        self.d.nrows()
    }

    pub fn n_stub(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_total(&self) -> usize {
        self.n_normal() + self.n_stub()
    }

    pub fn spectral_radius_d(&self) -> f64 {
        self.spectral_radius_d
    }

    /// The full `n x n` matrix `[[I, 0], [B, D]]`.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let ns = self.n_stub();
        let n = self.n_total();
        let mut w = DMatrix::zeros(n, n);
        w.view_mut((0, 0), (ns, ns)).fill_with_identity();
        w.view_mut((ns, 0), (self.n_normal(), ns)).copy_from(&self.b);
        w.view_mut((ns, ns), (self.n_normal(), self.n_normal()))
            .copy_from(&self.d);
        w
    }

    /// Largest deviation of a `[B D]` row sum from one.
    pub fn max_row_sum_deviation(&self) -> f64 {
        (0..self.n_normal())
            .map(|i| (self.b.row(i).sum() + self.d.row(i).sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Uniform(0,1) weights on every allowed position of a normal agent's row
/// (stubborn neighbours, normal neighbours, self), normalized to sum one.
pub fn generate_trust_matrix(graph: &SocialGraph, seed: u64) -> Result<TrustSystem> {
    graph.check_assumptions()?;
    let ns = graph.n_stub();
    let nn = graph.n_normal();
    let mut rng = seed::rng(seed, &[stream::TRUST]);
    let mut b = DMatrix::zeros(nn, ns);
    let mut d = DMatrix::zeros(nn, nn);
    for i in 0..nn {
        let agent = i + ns;
        // Neighbour lists are sorted, so stubborn entries come first.
        let mut total = 0.0;
        let own: f64 = rng.sample(Open01);
        d[(i, i)] = own;
        total += own;
        for &j in graph.neighbors(agent) {
            let w: f64 = rng.sample(Open01);
            total += w;
            if j < ns {
                b[(i, j)] = w;
            } else {
                d[(i, j - ns)] = w;
            }
        }
        b.row_mut(i).scale_mut(1.0 / total);
        d.row_mut(i).scale_mut(1.0 / total);
    }
    TrustSystem::new(b, d)
}

/// Exact mean of the broadcast-gossip update matrix with mixing weight
/// `gamma`, averaged over the `n` equally likely broadcasters.
///
/// A normal agent `j` changes only when one of its neighbours broadcasts;
/// it then keeps `gamma` of its own opinion and takes `1 - gamma` from the
/// broadcaster.
pub fn expected_gossip_matrix(graph: &SocialGraph, gamma: f64) -> Result<TrustSystem> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma = {gamma} not in (0, 1)")));
    }
    let ns = graph.n_stub();
    let nn = graph.n_normal();
    let n = graph.n_total() as f64;
    let share = (1.0 - gamma) / n;
    let mut b = DMatrix::zeros(nn, ns);
    let mut d = DMatrix::zeros(nn, nn);
    for i in 0..nn {
        let nbrs = graph.neighbors(i + ns);
        d[(i, i)] = 1.0 - share * nbrs.len() as f64;
        for &j in nbrs {
            if j < ns {
                b[(i, j)] = share;
            } else {
                d[(i, j - ns)] = share;
            }
        }
    }
    TrustSystem::new(b, d)
}

/// Sparse text dump: header `n n_s`, then one `i j w` line per nonzero of
/// the normal rows of the full trust matrix (global 0-based indices).
pub fn write_trust_text(b: &DMatrix<f64>, d: &DMatrix<f64>) -> String {
    let ns = b.ncols();
    let nn = d.nrows();
    let mut out = format!("{} {}\n", nn + ns, ns);
    for i in 0..nn {
        for s in 0..ns {
            let w = b[(i, s)];
            if w != 0.0 {
                let _ = writeln!(out, "{} {} {}", i + ns, s, w);
            }
        }
        for j in 0..nn {
            let w = d[(i, j)];
            if w != 0.0 {
                let _ = writeln!(out, "{} {} {}", i + ns, j + ns, w);
            }
        }
    }
    out
}

/// Inverse of [`write_trust_text`]. Returns the raw `(B, D)` blocks.
pub fn read_trust_text(input: impl BufRead) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut lines = input.lines().enumerate();
    let (n, ns) = loop {
        let (k, line) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(n)), Some(Ok(ns)), None) if ns <= n => break (n, ns),
            _ => {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("bad header {line:?}"),
                })
            }
        }
    };
    let nn = n - ns;
    let mut b = DMatrix::zeros(nn, ns);
    let mut d = DMatrix::zeros(nn, nn);
    for (k, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: k + 1, msg };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected `i j w`, got {line:?}")));
        }
        let i: usize = parts[0].parse().map_err(|_| bad(format!("bad row {:?}", parts[0])))?;
        let j: usize = parts[1].parse().map_err(|_| bad(format!("bad column {:?}", parts[1])))?;
        let w: f64 = parts[2].parse().map_err(|_| bad(format!("bad weight {:?}", parts[2])))?;
        if i < ns || i >= n || j >= n {
            return Err(bad(format!("entry ({i}, {j}) outside the normal rows")));
        }
        if j < ns {
            b[(i - ns, j)] = w;
        } else {
            d[(i - ns, j - ns)] = w;
        }
    }
    Ok((b, d))
}
