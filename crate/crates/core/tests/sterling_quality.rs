//! Representation and utility quality on the standard separable fixture:
//! five terrains, 2000 random-walk samples, the default 50-epoch schedule.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use terrapref::datapipe::Dataset;
use terrapref::linalg::{dist, Matrix};
use terrapref::par::ExecMode;
use terrapref::preference::UtilityConfig;
use terrapref::scenarios::{
    heldout_accuracy, oracle_label_ranks, random_walk_dataset, run_sterling, separable_world,
    SterlingRun,
};
use terrapref::sterling::SterlingConfig;

const SEED: u64 = 0;

fn fixture() -> &'static (Dataset, SterlingRun) {
    static CELL: OnceLock<(Dataset, SterlingRun)> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = separable_world(SEED).unwrap();
        let ds = random_walk_dataset(&world, 2000, SEED, ExecMode::Parallel).unwrap();
        let run = run_sterling(&ds, &SterlingConfig::new(SEED), ExecMode::Parallel).unwrap();
        (ds, run)
    })
}

#[test]
fn heldout_clustering_accuracy_is_high() {
    let (ds, _) = fixture();
    let (acc, _) = heldout_accuracy(ds, &SterlingConfig::new(SEED)).unwrap();
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn training_loss_trends_down() {
    let (_, run) = fixture();
    let h = &run.checkpoint.history;
    assert_eq!(h.len(), 50);
    let non_increasing = h
        .windows(2)
        .filter(|w| w[1].train_loss <= w[0].train_loss)
        .count();
    assert!(
        non_increasing as f64 >= 0.8 * (h.len() - 1) as f64,
        "{non_increasing} of {}",
        h.len() - 1
    );
}

#[test]
fn views_of_one_location_embed_close_together() {
    let (ds, run) = fixture();
    let ck = &run.checkpoint;
    let multi: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.samples[i].views.len() >= 2)
        .take(400)
        .collect();
    assert!(multi.len() >= 100);
    let a = ck
        .encode_visual_batch(&Matrix::from_rows(
            &multi
                .iter()
                .map(|&i| ds.samples[i].views[0].as_slice())
                .collect::<Vec<_>>(),
        ))
        .unwrap();
    let b = ck
        .encode_visual_batch(&Matrix::from_rows(
            &multi
                .iter()
                .map(|&i| ds.samples[i].views[1].as_slice())
                .collect::<Vec<_>>(),
        ))
        .unwrap();
    let same = (0..a.rows).map(|r| dist(a.row(r), b.row(r))).sum::<f64>() / a.rows as f64;
    let mut cross = (0.0, 0usize);
    for (x, &i) in multi.iter().enumerate() {
        for (y, &j) in multi.iter().enumerate().skip(x + 1).step_by(7) {
            if ds.samples[i].label != ds.samples[j].label {
                cross.0 += dist(a.row(x), a.row(y));
                cross.1 += 1;
            }
        }
    }
    let cross = cross.0 / cross.1 as f64;
    assert!(
        same < 0.5 * cross,
        "same-location {same} vs cross-terrain {cross}"
    );
}

#[test]
fn embeddings_are_unit_length() {
    let (ds, run) = fixture();
    let z = run
        .checkpoint
        .embed_dataset(&ds.subset(&(0..50).collect::<Vec<_>>()).unwrap())
        .unwrap();
    for r in 0..z.rows {
        let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn utility_order_follows_the_operator_ranking() {
    let (ds, run) = fixture();
    let world = separable_world(SEED).unwrap();
    let labels = oracle_label_ranks(&world);
    let head = run.fit_utility(&labels, &UtilityConfig::new(SEED)).unwrap();
    let u = head.utilities(&run.embeddings).unwrap();
    let mut per_cluster: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, &c) in run.clustering.assignment.iter().enumerate() {
        let e = per_cluster.entry(c).or_default();
        e.0 += u[i];
        e.1 += 1;
    }
    let ranking = terrapref::scenarios::simulate_operator(&run.clustering, &run.labels, &labels);
    let group_means: Vec<Vec<f64>> = ranking
        .rank_groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|c| per_cluster[c].0 / per_cluster[c].1 as f64)
                .collect()
        })
        .collect();
    for g in &group_means {
        let (lo, hi) = g
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        assert!(hi - lo <= 0.1, "tied clusters differ: {g:?}");
    }
    for w in group_means.windows(2) {
        let worst_better = w[0].iter().copied().fold(f64::INFINITY, f64::min);
        let best_worse = w[1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(worst_better > best_worse, "{group_means:?}");
    }
    assert!(u.iter().all(|&x| x >= 0.0 && x.is_finite()));
    assert_eq!(ds.len(), u.len());
}
