use proptest::prelude::*;

use terrapref::datapipe::psd::{folded_power, psd};
use terrapref::datapipe::split_indices;
use terrapref::evalkit::{aligned_fraction, alignment_success, hausdorff, TerrainRanks};
use terrapref::linalg::Matrix;
use terrapref::par::ExecMode;
use terrapref::planner::{
    combined_cost, gen_arcs, geometric_cost, plan_step, select_arc, terrain_cost,
    time_optimal_controller, Arc, ControllerLimits, FlatUtility, PlanError, PlanObjective,
    UtilityModel,
};
use terrapref::worldsim::{RobotState, TerrainModel, World, WorldConfig};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (-10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y)| [x, y])
}

fn point_set() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(point(), 1..12)
}

/// Terrain `id` has a first descriptor pair of norm `3 − id`.
fn random_world(w: usize, h: usize, grid: Vec<u32>, obstacles: Vec<[usize; 2]>) -> World {
    let terrains = (0..3)
        .map(|id| TerrainModel {
            id,
            label: format!("t{id}"),
            visual_prototype: vec![3.0 - id as f64, 0.0, 0.5, 0.5],
            visual_spread: 0.05,
            ipt_prototype: vec![0.1; 5],
            ipt_spread: 0.1,
            oracle_rank: id,
        })
        .collect();
    World::new(
        WorldConfig {
            width: w,
            height: h,
            grid,
            cell_size: 1.0,
            obstacles,
            rng_seed: 0,
            ipt_sample_rate: 8.0,
            ipt_window: 2.0,
            sensing_range: 2.5,
        },
        terrains,
    )
    .unwrap()
}

prop_compose! {
    fn planning_instance()(
        (w, h, grid) in (5usize..10, 5usize..10).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(0u32..3, w * h))
        }),
        px in 0.1..0.9f64, py in 0.1..0.9f64, theta in -3.1..3.1f64,
        gx in 0.0..1.0f64, gy in 0.0..1.0f64,
        obstacle in prop::option::of((0usize..5, 0usize..5)),
        seed in any::<u64>(),
    ) -> (World, RobotState, [f64; 2], u64) {
        let obstacles: Vec<[usize; 2]> = obstacle.into_iter().map(|(c, r)| [c, r]).collect();
        let world = random_world(w, h, grid, obstacles);
        let mut pose = RobotState::new(px * w as f64, py * h as f64, theta);
        if world.collides(pose.x, pose.y) {
            pose = RobotState::new(w as f64 - 0.5, h as f64 - 0.5, theta);
        }
        (world, pose, [gx * w as f64, gy * h as f64], seed)
    }
}

/// Utility from the first descriptor pair's norm, which the viewpoint
/// rotation preserves.
struct PairNorm(f64);

impl UtilityModel for PairNorm {
    fn utilities(&self, d: &Matrix) -> Result<Vec<f64>, PlanError> {
        Ok((0..d.rows)
            .map(|r| self.0 * d.get(r, 0).hypot(d.get(r, 1)))
            .collect())
    }
}

/// Same model, but each row is evaluated on its own.
struct RowByRow<'a>(&'a dyn UtilityModel);

impl UtilityModel for RowByRow<'_> {
    fn utilities(&self, d: &Matrix) -> Result<Vec<f64>, PlanError> {
        let mut out = Vec::with_capacity(d.rows);
        for r in 0..d.rows {
            out.extend(self.0.utilities(&Matrix::from_rows(&[d.row(r)]))?);
        }
        Ok(out)
    }
}

fn oracle_terrain_cost(u: &[f64], gamma: f64) -> f64 {
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &ui)| gamma.powi(i as i32) * (-ui).exp())
        .sum::<f64>()
        / n
}

proptest! {
    #![proptest_config(cfg(1000))]

    #[test]
    fn hausdorff_zero_on_identical_sets(a in point_set()) {
        prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_symmetric_nonnegative(a in point_set(), b in point_set()) {
        let ab = hausdorff(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, hausdorff(&b, &a).unwrap());
    }

    #[test]
    fn hausdorff_triangle(a in point_set(), b in point_set(), c in point_set()) {
        let lhs = hausdorff(&a, &c).unwrap();
        let rhs = hausdorff(&a, &b).unwrap() + hausdorff(&b, &c).unwrap();
        prop_assert!(lhs <= rhs + 1e-12, "{} > {}", lhs, rhs);
    }

    #[test]
    fn hausdorff_positive_on_distinct_point(a in point_set(), p in point()) {
        let mut b = a.clone();
        b.push([p[0] + 100.0, p[1]]);
        prop_assert!(hausdorff(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn terrain_cost_matches_brute_force(u in prop::collection::vec(0.0..6.0f64, 1..=6), gamma in 0.05..=1.0f64) {
        let j = terrain_cost(&u, gamma).unwrap();
        prop_assert!((j - oracle_terrain_cost(&u, gamma)).abs() < 1e-9);
        prop_assert!(j > 0.0 && j <= 1.0);
    }

    #[test]
    fn raising_a_utility_never_raises_the_cost(
        u in prop::collection::vec(0.0..6.0f64, 1..=12),
        i in any::<prop::sample::Index>(),
        bump in 0.0..3.0f64,
    ) {
        let mut v = u.clone();
        let k = i.index(v.len());
        v[k] += bump;
        prop_assert!(terrain_cost(&v, 0.8).unwrap() <= terrain_cost(&u, 0.8).unwrap());
    }

    /// Raising one arc's utilities never makes it lose to an unchanged arc.
    #[test]
    fn raising_winner_utilities_keeps_it_winning(
        jg in prop::collection::vec(0.0..2.0f64, 3..9),
        u in prop::collection::vec(prop::collection::vec(0.0..5.0f64, 6), 3..9),
        bump in 0.0..2.0f64,
        alpha in 0.0..=1.0f64,
    ) {
        let n = jg.len().min(u.len());
        let kappas: Vec<f64> = (0..n).map(|i| i as f64 - (n / 2) as f64).collect();
        let j: Vec<f64> = (0..n).map(|a| combined_cost(alpha, jg[a], terrain_cost(&u[a], 0.8).unwrap())).collect();
        let win = select_arc(&j, &kappas).unwrap();
        let raised: Vec<f64> = u[win].iter().map(|x| x + bump).collect();
        let mut j2 = j.clone();
        j2[win] = combined_cost(alpha, jg[win], terrain_cost(&raised, 0.8).unwrap());
        prop_assert!(j2[win] <= j[win]);
        prop_assert_eq!(select_arc(&j2, &kappas), Some(win));
    }

    /// Values on a dyadic grid keep every sum exact, so the invariance is
    /// tested without rounding noise.
    #[test]
    fn constant_shift_leaves_argmin_unchanged(
        jg in prop::collection::vec(0u32..512, 3..16),
        jt in prop::collection::vec(1u32..256, 16),
        shift in 0u32..256,
        alpha8 in 0u32..=8,
    ) {
        let alpha = alpha8 as f64 / 8.0;
        let n = jg.len();
        let kappas: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64) / 4.0).collect();
        let g = |x: u32| x as f64 / 256.0;
        let j: Vec<f64> = (0..n).map(|a| combined_cost(alpha, g(jg[a]), g(jt[a]))).collect();
        let js: Vec<f64> = (0..n).map(|a| combined_cost(alpha, g(jg[a]), g(jt[a] + shift))).collect();
        prop_assert_eq!(select_arc(&j, &kappas), select_arc(&js, &kappas));
    }

    #[test]
    fn parseval_holds(series in prop::collection::vec(-5.0..5.0f64, 64..512), window in prop::sample::select(vec![8usize, 16, 31, 64])) {
        let p = psd(&series, 100.0, window).unwrap();
        let used = p.windows * window;
        let energy = series[..used].iter().map(|x| x * x).sum::<f64>() / p.windows as f64;
        prop_assert!((folded_power(&p.bins, window) - energy).abs() < 1e-9 * energy.max(1.0));
    }

    #[test]
    fn split_is_a_seeded_partition(n in 1usize..300, fraction in 0.01..0.99f64, seed in any::<u64>()) {
        let (a, b) = split_indices(n, fraction, seed);
        prop_assert_eq!(a.len(), ((fraction * n as f64).ceil() as usize).min(n));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, fraction, seed), (a, b));
    }

    #[test]
    fn controller_respects_limits(
        kappa in -2.0..2.0f64,
        length in 0.05..6.0f64,
        v_max in 0.2..2.0f64,
        a_max in 0.2..3.0f64,
    ) {
        let limits = ControllerLimits { v_max, a_max, dt: 0.1 };
        let arc = Arc::new(kappa, length, 8).unwrap();
        let cmds = time_optimal_controller(&arc, &limits);
        let mut prev = 0.0;
        for &(v, w) in &cmds {
            prop_assert!(v >= 0.0 && v <= v_max + 1e-12);
            prop_assert!((v - prev).abs() / limits.dt <= a_max + 1e-9);
            prop_assert!((w - kappa * v).abs() < 1e-12);
            prev = v;
        }
        prop_assert!(prev.abs() / limits.dt <= a_max + 1e-9);
    }
}

proptest! {
    #![proptest_config(cfg(1000))]

    #[test]
    fn alpha_one_is_pure_geometry((world, pose, goal, seed) in planning_instance(), scale in 0.1..3.0f64) {
        let arcs = gen_arcs(9, 1.5, 2.0, 6).unwrap();
        let obj = PlanObjective::new(goal, 1.0);
        let placed: Vec<Vec<RobotState>> = arcs.iter().map(|a| a.world_states(&pose)).collect();
        let jg: Vec<f64> = placed.iter().map(|s| geometric_cost(s, pose.xy(), &obj, &world)).collect();
        let kappas: Vec<f64> = arcs.iter().map(|a| a.kappa).collect();
        let expected = select_arc(&jg, &kappas);
        match plan_step(&pose, &arcs, &obj, &PairNorm(scale), &world, seed, ExecMode::Sequential) {
            Ok(r) => {
                prop_assert_eq!(Some(r.chosen), expected);
                let flat = plan_step(&pose, &arcs, &obj, &FlatUtility, &world, seed, ExecMode::Sequential).unwrap();
                prop_assert_eq!(flat.chosen, r.chosen);
            }
            Err(PlanError::Blocked) => prop_assert_eq!(expected, None),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn batch_and_per_state_scoring_agree((world, pose, goal, seed) in planning_instance(), alpha in 0.0..=1.0f64) {
        let arcs = gen_arcs(5, 1.5, 2.0, 6).unwrap();
        let obj = PlanObjective::new(goal, alpha);
        let model = PairNorm(1.3);
        let batch = plan_step(&pose, &arcs, &obj, &model, &world, seed, ExecMode::Parallel);
        let single = plan_step(&pose, &arcs, &obj, &RowByRow(&model), &world, seed, ExecMode::Sequential);
        match (batch, single) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.chosen, b.chosen);
                for (x, y) in a.scores.iter().zip(&b.scores) {
                    prop_assert!((x.j_terrain - y.j_terrain).abs() < 1e-12);
                    prop_assert!(x.j_terrain > 0.0 && x.j_terrain <= 1.0);
                    prop_assert!((x.j_terrain - terrain_cost(&x.utilities, obj.gamma_discount).unwrap()).abs() < 1e-12);
                }
            }
            (Err(PlanError::Blocked), Err(PlanError::Blocked)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.map(|r| r.chosen), b.map(|r| r.chosen)),
        }
    }
}

fn strip_world() -> World {
    // column c has terrain c / 2: x in [0,2) → 0, [2,4) → 1, [4,6) → 2
    let grid = (0..18).map(|i| ((i % 6) / 2) as u32).collect();
    random_world(6, 3, grid, vec![])
}

#[test]
fn aligned_fraction_fixtures_are_exact() {
    let w = strip_world();
    let ranks = TerrainRanks::oracle(&w);
    let reference = [[0.5, 1.5], [3.5, 1.5]];
    // 2 m on terrain 0, 2 m on terrain 1, 1 m on terrain 2
    let traj = [[0.0, 1.5], [5.0, 1.5]];
    let exact = |t: &[[f64; 2]], r: &TerrainRanks, reference: &[[f64; 2]], want: f64| {
        let got = aligned_fraction(t, &w, r, reference).unwrap();
        assert!((got - want).abs() < 1e-12, "{t:?}: {got} vs {want}");
    };
    exact(&traj, &ranks, &reference, 0.8);
    exact(
        &[[0.5, 0.5], [3.5, 0.5], [3.5, 2.5]],
        &ranks,
        &reference,
        1.0,
    );
    exact(&[[4.25, 0.5], [5.75, 0.5]], &ranks, &reference, 0.0);
    // diagonal from x = 1 to x = 4.75: the part left of x = 4 is 0.8 of it
    exact(&[[1.0, 0.0], [4.75, 2.9]], &ranks, &reference, 0.8);
    let flipped = TerrainRanks([(0, 2), (1, 1), (2, 0)].into_iter().collect());
    exact(&traj, &flipped, &[[4.5, 1.5], [5.5, 1.5]], 0.2);
}

#[test]
fn alignment_success_agrees_with_cell_audit() {
    let w = strip_world();
    let ranks = TerrainRanks::oracle(&w);
    let reference = [[0.5, 1.5], [3.5, 1.5]];
    let paths: [&[[f64; 2]]; 3] = [
        &[[0.5, 0.5], [3.9, 0.5]],
        &[[0.5, 0.5], [4.1, 0.5]],
        &[[1.0, 2.5], [1.0, 0.5]],
    ];
    for p in paths {
        // independent audit: sample every 1 mm and look the cell up directly
        let mut worst = 0;
        for s in p.windows(2) {
            let steps = (((s[1][0] - s[0][0]).hypot(s[1][1] - s[0][1])) / 1e-3).ceil() as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let x = s[0][0] + t * (s[1][0] - s[0][0]);
                worst = worst.max((x.floor() as u32).min(5) / 2);
            }
        }
        assert_eq!(
            alignment_success(p, true, &reference, &w, &ranks).unwrap(),
            worst <= 1,
            "{p:?}"
        );
        assert!(!alignment_success(p, false, &reference, &w, &ranks).unwrap());
    }
}
