//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.
//!
//! Select a subset by number: `cargo test --release -p ssi-core --test acceptance -- 4 9`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use ssi_core::dynamics::{
    broadcast_matrix, degroot_step, estimate_terminal, exact_terminal, phi_product,
    random_initial_state, simulate_and_sample, DataMatrices, DynamicsModel, OpinionState,
    SamplingSchedule,
};
use ssi_core::experiment::{run_experiment, ExperimentConfig, Placement};
use ssi_core::graph::{
    expected_gossip_matrix, generate_er_graph, generate_regular_graph, generate_trust_matrix,
    SocialGraph, TrustSystem,
};
use ssi_core::identifiability::{check_degree_condition, min_stubborn_count, min_stubborn_fraction, IdentifiabilityParams};
use ssi_core::identify::{apply_equivalence_scaling, relative_trust, residual, RowProblem, SolverOptions};
use ssi_core::{parallel, seed};

const MASTER: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_static_system(rng: &mut seed::Rng, tag: u64, max_total: usize) -> (SocialGraph, TrustSystem) {
    let ns = rng.gen_range(1..=15.min(max_total / 3));
    let nn = rng.gen_range(4..=max_total - ns);
    let gseed = rng.gen();
    let graph = if tag & 1 == 0 {
        let p_s = (4.0 / ns as f64).min(1.0);
        generate_er_graph(nn, ns, 0.2, p_s, gseed).expect("er graph")
    } else {
        generate_regular_graph(nn, ns, 0.2, ns.min(3), gseed).expect("regular graph")
    };
    let system = generate_trust_matrix(&graph, rng.gen()).expect("trust");
    (graph, system)
}

/// Terminal-limit correctness of the static dynamics.
fn criterion_1() -> Outcome {
    const T_O: u64 = 10_000;
    let errors = parallel::map_indices(50, |s| {
        let mut rng = seed::rng(MASTER, &[1, s as u64]);
        let (graph, system) = random_static_system(&mut rng, s as u64, 60);
        let x0 = random_initial_state(graph.n_total(), graph.n_stub(), 2, 0, &mut rng);
        let exact = exact_terminal(&system, &x0).unwrap();
        let ns = graph.n_stub();

        let mut state = x0.clone();
        for _ in 0..T_O {
            state = degroot_step(&state, &system).unwrap();
        }
        let stepped = (state.values.rows(ns, graph.n_normal()) - &exact).norm();

        let snaps = simulate_and_sample(
            &system,
            &graph,
            DynamicsModel::Static,
            &x0,
            &SamplingSchedule::single(T_O),
            0.0,
            0,
        )
        .unwrap();
        let jumped = (snaps.snapshots[0].1.rows(ns, graph.n_normal()) - &exact).norm();
        stepped.max(jumped)
    });
    let worst = errors.iter().copied().fold(0.0, f64::max);
    outcome(worst < 1e-6, format!("50 systems, worst ||x(T_o) - x(inf)||_F = {worst:.2e} (< 1e-6)"))
}

fn gossip_fixture() -> (SocialGraph, TrustSystem, OpinionState, DMatrix<f64>) {
    let graph = generate_er_graph(16, 4, 0.3, 0.5, seed::derive(MASTER, &[2])).unwrap();
    let mean = expected_gossip_matrix(&graph, 0.5).unwrap();
    let mut rng = seed::rng(MASTER, &[2, 1]);
    let x0 = random_initial_state(20, 4, 2, 0, &mut rng);
    let exact = exact_terminal(&mean, &x0).unwrap();
    (graph, mean, x0, exact)
}

#[allow(clippy::too_many_arguments)]
fn gossip_estimate(
    graph: &SocialGraph,
    mean: &TrustSystem,
    x0: &OpinionState,
    t_o: u64,
    t_max: u64,
    samples: usize,
    sigma: f64,
    run_seed: u64,
) -> DMatrix<f64> {
    let mut srng = seed::rng(run_seed, &[0]);
    let schedule = SamplingSchedule::uniform(t_o, t_max, samples, &mut srng).unwrap();
    let snaps = simulate_and_sample(
        mean,
        graph,
        DynamicsModel::Gossip { gamma: 0.5 },
        x0,
        &schedule,
        sigma,
        run_seed,
    )
    .unwrap();
    let est = estimate_terminal(&snaps).unwrap();
    est.rows(graph.n_stub(), graph.n_normal()).into_owned()
}

/// Unbiasedness of the sample-mean estimator under gossip.
fn criterion_2() -> Outcome {
    const RUNS: usize = 10_000;
    let (graph, mean, x0, exact) = gossip_fixture();
    let ests = parallel::map_indices(RUNS, |r| {
        gossip_estimate(&graph, &mean, &x0, 2_000, 4_000, 50, 0.01, seed::derive(MASTER, &[2, 2, r as u64]))
    });
    let (rows, cols) = exact.shape();
    let mut within = 0;
    for i in 0..rows {
        for c in 0..cols {
            let v: Vec<f64> = ests.iter().map(|e| e[(i, c)]).collect();
            let m = v.iter().sum::<f64>() / RUNS as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (RUNS - 1) as f64;
            let se = (var / RUNS as f64).sqrt();
            if (m - exact[(i, c)]).abs() <= 3.0 * se {
                within += 1;
            }
        }
    }
    let frac = within as f64 / (rows * cols) as f64;
    outcome(
        frac >= 0.95,
        format!("{within}/{} components within 3 SE ({:.1}%, need >= 95%)", rows * cols, 100.0 * frac),
    )
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// MSE of the estimator decays like `1/|T_s|`.
fn criterion_3() -> Outcome {
    const TRIALS: usize = 200;
    const T_O: u64 = 1_000;
    const T_MAX: u64 = 1_000_000;
    let sizes = [100usize, 300, 1000, 3000];
    let (graph, mean, x0, exact) = gossip_fixture();
    let mse: Vec<f64> = sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let errs = parallel::map_indices(TRIALS, |t| {
                let est = gossip_estimate(
                    &graph,
                    &mean,
                    &x0,
                    T_O,
                    T_MAX,
                    size,
                    0.01,
                    seed::derive(MASTER, &[3, k as u64, t as u64]),
                );
                (est - &exact).norm_squared()
            });
            errs.iter().sum::<f64>() / TRIALS as f64
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let slope = log_log_slope(&xs, &mse);
    let table: Vec<String> = sizes.iter().zip(&mse).map(|(s, m)| format!("{s}:{m:.3e}")).collect();
    outcome(
        (-1.3..=-0.7).contains(&slope),
        format!("slope {slope:.3} in [-1.3, -0.7]; mse {}", table.join(" ")),
    )
}

/// Exact recovery with many regularly placed stubborn agents.
fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig {
        n_stub: vec![40],
        placements: vec![Placement::Regular(8)],
        trials: 20,
        ..ExperimentConfig::static_sweep()
    };
    let result = run_experiment(&cfg).unwrap();
    let ok = result
        .rows
        .iter()
        .filter(|r| r.nmse_d < 1e-3 && r.nmse_b < 1e-3 && r.support_error == 0)
        .count();
    let worst = result.rows.iter().map(|r| r.nmse_d).fold(0.0, f64::max);
    outcome(
        ok * 10 >= 9 * result.rows.len(),
        format!("{ok}/{} trials exact (need >= 90%), worst nmse_D {worst:.2e}", result.rows.len()),
    )
}

/// Sweep trend over the number of stubborn agents.
fn criterion_5() -> Outcome {
    let cfg = ExperimentConfig::static_sweep();
    let result = run_experiment(&cfg).unwrap();
    let mean_for = |ns: usize, p: Placement| {
        let v: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| r.n_stub == ns && r.placement == p)
            .map(|r| r.nmse_d)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let er: Vec<f64> = cfg.n_stub.iter().map(|&ns| mean_for(ns, Placement::Er)).collect();
    let reg: Vec<f64> = cfg.n_stub.iter().map(|&ns| mean_for(ns, Placement::Regular(8))).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let dominated: Vec<usize> = cfg
        .n_stub
        .iter()
        .zip(er.iter().zip(&reg))
        .filter(|(_, (e, r))| r > e)
        .map(|(&ns, _)| ns)
        .collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" ");
    outcome(
        decreasing(&er) && decreasing(&reg) && dominated.is_empty(),
        format!(
            "er [{}] regular [{}]; decreasing er={} regular={}; regular > er at n_s {:?}",
            fmt(&er),
            fmt(&reg),
            decreasing(&er),
            decreasing(&reg),
            dominated
        ),
    )
}

/// Single gossip instance across seeds.
fn criterion_6() -> Outcome {
    let rows: Vec<(f64, bool)> = (1..=20u64)
        .map(|s| {
            let cfg = ExperimentConfig {
                seed: s,
                ..ExperimentConfig::gossip_single()
            };
            let row = &run_experiment(&cfg).unwrap().rows[0];
            (row.nmse_d, row.epsilon_feasible)
        })
        .collect();
    let band = |v: f64| (0.01..=0.3).contains(&v);
    let inside = rows.iter().filter(|r| band(r.0)).count();
    let feasible = rows.iter().filter(|r| r.1).count();
    let inside_feasible = rows.iter().filter(|r| r.1 && band(r.0)).count();
    let lo = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    outcome(
        inside >= 16,
        format!(
            "{inside}/20 seeds with nmse_D in [0.01, 0.3] (need >= 16), range [{lo:.3e}, {hi:.3e}]; \
             eps attainable on {feasible}/20 seeds ({inside_feasible} of them in band), others used the least-squares fallback"
        ),
    )
}

fn noiseless_data(system: &TrustSystem, k: usize, rng: &mut seed::Rng) -> DataMatrices {
    let ns = system.n_stub();
    let n = system.n_total();
    let z = DMatrix::from_fn(ns, k, |_, _| rng.gen::<f64>());
    let mut x0 = DMatrix::zeros(n, k);
    x0.rows_mut(0, ns).copy_from(&z);
    let y = exact_terminal(system, &OpinionState::new(x0, 0)).unwrap();
    DataMatrices { y, z, k, m: 1 }
}

fn random_scaling(b: &DMatrix<f64>, d: &DMatrix<f64>, rng: &mut seed::Rng) -> Vec<f64> {
    (0..d.nrows())
        .map(|i| {
            let mass = b.row(i).sum() + d.row(i).sum() - d[(i, i)];
            rng.gen_range(0.05..=1.0) / mass
        })
        .collect()
}

/// Equivalence classes of trust systems.
fn criterion_7() -> Outcome {
    let failures = parallel::map_indices(1000, |t| {
        let mut rng = seed::rng(MASTER, &[7, t as u64]);
        let (_, system) = random_static_system(&mut rng, t as u64, 24);
        let data = noiseless_data(&system, 30, &mut rng);
        let (br, dr) = relative_trust(&system.b, &system.d).unwrap();
        let mut worst_rows = 0.0f64;
        let mut worst_res = residual(&system.b, &system.d, &data).unwrap();
        let mut worst_rel = 0.0f64;
        let mut first_class = true;
        for _ in 0..20 {
            let l = random_scaling(&system.b, &system.d, &mut rng);
            let (bs, ds) = apply_equivalence_scaling(&system.b, &system.d, &l).unwrap();
            let rows = (0..ds.nrows())
                .map(|i| (bs.row(i).sum() + ds.row(i).sum() - 1.0).abs())
                .fold(0.0, f64::max);
            worst_rows = worst_rows.max(rows);
            worst_res = worst_res.max(residual(&bs, &ds, &data).unwrap());
            let (b2, d2) = relative_trust(&bs, &ds).unwrap();
            worst_rel = worst_rel.max((b2 - &br).amax()).max((d2 - &dr).amax());
            first_class &= bs.iter().chain(ds.iter()).all(|&v| v >= 0.0);
        }
        (worst_rows, worst_res, worst_rel, first_class)
    });
    let rows = failures.iter().map(|f| f.0).fold(0.0, f64::max);
    let res = failures.iter().map(|f| f.1).fold(0.0, f64::max);
    let rel = failures.iter().map(|f| f.2).fold(0.0, f64::max);
    let nonneg = failures.iter().all(|f| f.3);
    outcome(
        rows <= 1e-14 && res <= 1e-9 && rel <= 1e-9 && nonneg,
        format!("1000 triples x 20 members: row-sum dev {rows:.1e}, residual {res:.1e}, relative-trust spread {rel:.1e}, nonneg {nonneg}"),
    )
}

/// Largest singular value via power iteration on `M^T M`.
fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut v = DVector::from_element(g.ncols(), 1.0);
    let mut est = 0.0;
    for _ in 0..500 {
        let w = &g * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / v.norm();
        v = w / norm;
    }
    est.sqrt()
}

/// Limit structure of long products of gossip matrices.
fn criterion_8() -> Outcome {
    let stats = parallel::map_indices(100, |s| {
        let mut rng = seed::rng(MASTER, &[8, s as u64]);
        let ns = rng.gen_range(1..=4);
        let nn = rng.gen_range(4..=20 - ns);
        let p_s = (3.0 / ns as f64).min(1.0);
        let graph = generate_er_graph(nn, ns, 0.3, p_s, rng.gen()).unwrap();
        let n = graph.n_total();
        let mats: Vec<DMatrix<f64>> = (0..5_000)
            .map(|_| broadcast_matrix(&graph, 0.5, rng.gen_range(0..n)))
            .collect();
        let phi = phi_product(n, &mats).unwrap();
        let lower = spectral_norm(&phi.view((ns, ns), (nn, nn)).into_owned());
        let top_identity = phi.view((0, 0), (ns, ns)) == DMatrix::<f64>::identity(ns, ns);
        (lower, top_identity)
    });
    let worst = stats.iter().map(|s| s.0).fold(0.0, f64::max);
    let identity = stats.iter().all(|s| s.1);
    outcome(
        worst < 1e-4 && identity,
        format!("100 sequences: worst lower-right ||.||_2 = {worst:.2e} (< 1e-4), top-left identity {identity}"),
    )
}

/// Degree-condition threshold and monotonicity.
fn criterion_9() -> Outcome {
    let (d, alpha) = (8, 0.2);
    let count = min_stubborn_count(50, d, alpha).unwrap();
    let at = |ns: usize| {
        check_degree_condition(&IdentifiabilityParams::new(50 + ns, ns, d, alpha, 0.0, 0.0).unwrap())
            .map(|c| c.satisfied)
            .unwrap_or(false)
    };
    let fractions: Vec<f64> = (5..=15).map(|d| min_stubborn_fraction(d, alpha, 1000).unwrap()).collect();
    let monotone = fractions.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        count == 38 && at(38) && !at(37) && monotone,
        format!(
            "threshold n_s = {count} (expect 38), beta(d=5..15) {:.4}..{:.4} non-increasing {monotone}",
            fractions[0],
            fractions[fractions.len() - 1]
        ),
    )
}

/// Minimum over the simplex by enumerating supports and solving each
/// equality-constrained stationarity system.
fn enumerate_row(a: &DMatrix<f64>, y: &DVector<f64>, r: &DVector<f64>, lambda: f64) -> f64 {
    let p = a.ncols();
    let f = |x: &DVector<f64>| (y - a * x).norm_squared() - lambda * r.dot(x);
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << p) {
        let s: Vec<usize> = (0..p).filter(|&j| mask & (1 << j) != 0).collect();
        let k = s.len();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (u, &i) in s.iter().enumerate() {
            for (v, &j) in s.iter().enumerate() {
                kkt[(u, v)] = 2.0 * a.column(i).dot(&a.column(j));
            }
            kkt[(u, k)] = 1.0;
            kkt[(k, u)] = 1.0;
            rhs[u] = 2.0 * a.column(i).dot(y) + lambda * r[i];
        }
        rhs[k] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if (0..k).any(|u| sol[u] < -1e-12 || !sol[u].is_finite()) {
            continue;
        }
        let mut x = DVector::zeros(p);
        for (u, &j) in s.iter().enumerate() {
            x[j] = sol[u].max(0.0);
        }
        x /= x.sum();
        best = best.min(f(&x));
    }
    best
}

/// Row solver against exhaustive enumeration.
fn criterion_10() -> Outcome {
    let opts = SolverOptions::default();
    let gaps = parallel::map_indices(200, |t| {
        let mut rng = seed::rng(MASTER, &[10, t as u64]);
        let p = rng.gen_range(1..=6);
        let k = rng.gen_range(p + 1..=p + 12);
        let a = DMatrix::from_fn(k, p, |_, _| rng.gen::<f64>());
        let y = DVector::from_fn(k, |_, _| rng.gen::<f64>());
        let r = DVector::from_fn(p, |_, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let lambda = if rng.gen_bool(0.2) { 0.0 } else { 10f64.powf(rng.gen_range(-4.0..1.0)) };
        let problem = RowProblem::new(a.clone(), y.clone(), r.clone(), opts.power_iters).unwrap();
        let sol = problem.solve(lambda, None, &opts);
        let reference = enumerate_row(&a, &y, &r, lambda);
        (sol.objective - reference).abs()
    });
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    outcome(worst <= 1e-6, format!("200 problems, worst objective gap {worst:.2e} (<= 1e-6)"))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "terminal limit", criterion_1),
        (2, "estimator unbiasedness", criterion_2),
        (3, "estimator consistency rate", criterion_3),
        (4, "noiseless exact recovery", criterion_4),
        (5, "stubborn-count sweep trend", criterion_5),
        (6, "gossip instance accuracy", criterion_6),
        (7, "equivalence classes", criterion_7),
        (8, "gossip product limit", criterion_8),
        (9, "identifiability threshold", criterion_9),
        (10, "row solver vs enumeration", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict} {name}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
