use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use terrapref::evalkit::{run_benchmark, TerrainRanks};
use terrapref::linalg::Matrix;
use terrapref::par::ExecMode;
use terrapref::planner::{gen_arcs, plan_step, PlanObjective};
use terrapref::preference::silhouette_select_k;
use terrapref::rng::rng_from_seed;
use terrapref::scenarios::{corridor_task, OracleScorer, TASK_ALPHA};
use terrapref::worldsim::RobotState;

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn arc_scoring(c: &mut Criterion) {
    let task = corridor_task(0).unwrap();
    let scorer = OracleScorer::new(&task.world, &TerrainRanks::oracle(&task.world), 1.0);
    let arcs = gen_arcs(61, 1.5, 2.2, 24).unwrap();
    let objective = PlanObjective::new(task.goal, TASK_ALPHA);
    let pose = RobotState::new(3.0, 6.5, 0.0);
    let mut g = c.benchmark_group("plan_step");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                plan_step(
                    &pose,
                    &arcs,
                    &objective,
                    &scorer,
                    &task.world,
                    black_box(7),
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn cluster_selection(c: &mut Criterion) {
    let mut rng = rng_from_seed(1);
    let rows: Vec<Vec<f64>> = (0..1200)
        .map(|i| {
            let centre = (i % 5) as f64 * 3.0;
            (0..8)
                .map(|d| centre * (d % 2) as f64 + rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let points = Matrix::from_rows(&rows);
    let mut g = c.benchmark_group("silhouette_select_k");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| silhouette_select_k(&points, 2..=8, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn benchmark_trials(c: &mut Criterion) {
    let task = corridor_task(0).unwrap();
    let ranks = TerrainRanks::oracle(&task.world);
    let scorer = OracleScorer::new(&task.world, &ranks, 1.0);
    let cfg = task.benchmark("oracle", TASK_ALPHA, ranks, 8, 0);
    let mut g = c.benchmark_group("run_benchmark");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_benchmark(&task.world, &scorer, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, arc_scoring, cluster_selection, benchmark_trials);
criterion_main!(benches);
