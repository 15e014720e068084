use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};

use ssi_core::dynamics::{estimate_terminal, random_initial_state, DynamicsModel, SamplingSchedule, Simulator};
use ssi_core::experiment::{prepare_trial, ExperimentConfig, Placement};
use ssi_core::graph::{expected_gossip_matrix, generate_er_graph};
use ssi_core::identify::{RowProblem, SolverOptions};
use ssi_core::parallel::{map_indices, map_indices_sequential};
use ssi_core::seed;

fn row_problems() -> Vec<RowProblem> {
    let cfg = ExperimentConfig {
        n_stub: vec![30],
        placements: vec![Placement::Regular(8)],
        ..ExperimentConfig::static_sweep()
    };
    let inst = prepare_trial(&cfg, 30, Placement::Regular(8), 7).unwrap();
    let data = &inst.data;
    let nn = data.n_normal();
    (0..nn)
        .map(|i| {
            let stubs = inst.graph.support_b().row(i);
            let p = nn - 1 + stubs.len();
            let mut a = DMatrix::zeros(data.y.ncols(), p);
            let mut r = DVector::zeros(p);
            for (c, j) in (0..nn).filter(|&j| j != i).enumerate() {
                a.set_column(c, &data.y.row(j).transpose());
            }
            for (c, &s) in stubs.iter().enumerate() {
                a.set_column(nn - 1 + c, &data.z.row(s).transpose());
                r[nn - 1 + c] = 1.0;
            }
            RowProblem::new(a, data.y.row(i).transpose(), r, 100).unwrap()
        })
        .collect()
}

fn bench_rows(c: &mut Criterion) {
    let problems = row_problems();
    let opts = SolverOptions::default();
    let solve = |i: usize| problems[i].solve(1e-6, None, &opts).objective;
    let mut group = c.benchmark_group("row_solves");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", problems.len()), |b| {
        b.iter(|| map_indices(problems.len(), solve))
    });
    group.bench_function(BenchmarkId::new("sequential", problems.len()), |b| {
        b.iter(|| map_indices_sequential(problems.len(), solve))
    });
    group.finish();
}

fn bench_issues(c: &mut Criterion) {
    let graph = generate_er_graph(50, 30, 0.15, 0.15, 3).unwrap();
    let mean = expected_gossip_matrix(&graph, 0.5).unwrap();
    let sim = Simulator::new(&mean, &graph, DynamicsModel::Gossip { gamma: 0.5 }, 0.01, 20_000).unwrap();
    let issues = 32;
    let run = |s: usize| {
        let mut rng = seed::rng(5, &[s as u64]);
        let x0 = random_initial_state(80, 30, 1, s, &mut rng);
        let schedule = SamplingSchedule::uniform(1_000, 20_000, 500, &mut rng).unwrap();
        estimate_terminal(&sim.run(&x0, &schedule, s as u64).unwrap()).unwrap()
    };
    let mut group = c.benchmark_group("gossip_issues");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", issues), |b| b.iter(|| map_indices(issues, run)));
    group.bench_function(BenchmarkId::new("sequential", issues), |b| {
        b.iter(|| map_indices_sequential(issues, run))
    });
    group.finish();
}

criterion_group!(benches, bench_rows, bench_issues);
criterion_main!(benches);
