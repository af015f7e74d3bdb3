use std::path::Path;

use serde::Serialize;

use terrapref::audit::gradient_audit;
use terrapref::datapipe::{
    extract_samples, record_rollout, split_dataset, Dataset, ExtractConfig, Policy, RolloutConfig,
    Trajectory,
};
use terrapref::evalkit::{path_length, run_benchmark, BenchmarkConfig, EvalReport};
use terrapref::par::ExecMode;
use terrapref::patern::{
    adapt, extrapolate_preference, train_preadaptation, Novelty, PaternCheckpoint, PaternConfig,
    PaternError,
};
use terrapref::planner::{run_episode, EpisodeConfig, Outcome};
use terrapref::preference::{
    sample_exemplars, silhouette_select_k, train_utility, PreferenceRanking, UtilityConfig,
    UtilityHead,
};
use terrapref::rng::{derive_rng, derive_seed, tag};
use terrapref::scenarios::{
    cluster_embeddings, corridor_task, label_ranking, novel_corridor_task, random_start,
    separable_world, simulate_operator, START_JITTER,
};
use terrapref::sterling::{train_sterling, Checkpoint, Objective, SterlingConfig};
use terrapref::worldsim::RobotState;

use crate::args::*;
use crate::artifacts::*;

fn say(line: impl AsRef<str>) {
    println!("{}", line.as_ref());
}

pub fn gen_world(a: &GenWorldArgs) -> Result<()> {
    let (world, task) = match a.kind {
        WorldKind::Separable => (separable_world(a.seed)?, None),
        WorldKind::Corridor => {
            let t = corridor_task(a.seed)?;
            (t.world.clone(), Some(t))
        }
        WorldKind::NovelCorridor => {
            let t = novel_corridor_task(a.seed)?;
            (t.world.clone(), Some(t))
        }
    };
    write_text(&a.out.out, WORLD_FILE, &(world.to_json() + "\n"))?;
    if let Some(t) = task {
        let file = TaskFile {
            world_hash: world.content_hash(),
            start: t.start,
            goal: t.goal,
            reference: t.reference,
        };
        write_json(&a.out.out, TASK_FILE, &file)?;
    }
    say(format!(
        "world {} ({} terrains)",
        &world.content_hash()[..12],
        world.terrains().len()
    ));
    Ok(())
}

pub fn rollout(a: &RolloutArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let start = match &a.start {
        Some(s) => parse_pose(s)?,
        None => random_start(&world, &mut derive_rng(a.seed, tag("cli-start")))?,
    };
    let policy = if a.waypoint.is_empty() {
        Policy::random_walk()
    } else {
        let waypoints = a
            .waypoint
            .iter()
            .map(|w| parse_point(w))
            .collect::<Result<Vec<_>>>()?;
        Policy::WaypointFollow {
            waypoints,
            v: 0.6,
            gain: 2.0,
            tolerance: 0.3,
        }
    };
    let traj = record_rollout(
        &world,
        &policy,
        &RolloutConfig {
            start,
            duration: a.duration,
            dt: 0.1,
        },
        a.seed,
    )?;
    write_json(&a.out.out, TRAJECTORY_FILE, &traj)?;
    say(format!(
        "{} states{}",
        traj.states.len(),
        if traj.truncated { " (truncated)" } else { "" }
    ));
    Ok(())
}

pub fn featurize(a: &FeaturizeArgs, exec: ExecMode) -> Result<()> {
    let world = load_world(&a.world)?;
    let extract = ExtractConfig {
        exec,
        ..ExtractConfig::default()
    };
    let mut parts = Vec::new();
    for path in &a.trajectory {
        let traj: Trajectory = read_json(path)?;
        parts.push(extract_samples(&traj, &world, &extract)?);
    }
    let seed = parts.first().map_or(0, |d| d.manifest.seed);
    let mut ds = Dataset::concat(&parts, world.content_hash(), seed)?;
    if let Some(n) = a.limit {
        if ds.len() < n {
            return Err(CliError::Runtime(format!(
                "only {} samples, --limit asks for {n}",
                ds.len()
            )));
        }
        ds = ds.subset(&(0..n).collect::<Vec<_>>())?;
    }
    save_dataset(&ds, &a.out.out)?;
    say(format!("{} samples", ds.len()));
    Ok(())
}

pub fn train_sterling_cmd(a: &TrainSterlingArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<SterlingConfig>(p)?,
        None => SterlingConfig::new(a.seed),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(o) = a.objective {
        cfg.objective = match o {
            ObjectiveArg::Full => Objective::Full,
            ObjectiveArg::ViewpointOnly => Objective::ViewpointOnly,
            ObjectiveArg::MultiModalOnly => Objective::MultiModalOnly,
        };
    }
    let (train, val) = split_dataset(&ds, 0.8, cfg.seed)?;
    let ckpt = train_sterling(&train, &val, &cfg)?;
    write_text(&a.out.out, STERLING_FILE, &(ckpt.to_json() + "\n"))?;
    write_text(&a.out.out, LOSS_CURVE_FILE, &ckpt.loss_curve_csv())?;
    if let Some(last) = ckpt.history.last() {
        say(format!(
            "{} epochs, final train loss {:.4}",
            ckpt.history.len(),
            last.train_loss
        ));
    }
    Ok(())
}

fn check_dataset(file: &ClusterFile, ds: &Dataset, path: &Path) -> Result<()> {
    if file.dataset_hash != ds.manifest.content_hash || file.clustering.assignment.len() != ds.len()
    {
        return Err(CliError::Runtime(format!(
            "{} was computed on a different dataset",
            path.display()
        )));
    }
    Ok(())
}

pub fn cluster(a: &ClusterArgs, exec: ExecMode) -> Result<()> {
    let ckpt: Checkpoint = read_json(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    if a.k_min < 2 || a.k_min > a.k_max {
        return Err(CliError::Usage(format!(
            "invalid cluster range {}..={}",
            a.k_min, a.k_max
        )));
    }
    let z = ckpt.embed_dataset(&ds)?;
    let clustering = silhouette_select_k(
        &z,
        a.k_min..=a.k_max,
        derive_seed(a.seed, tag("cluster")),
        exec,
    )?;
    let exemplars = sample_exemplars(&z, &clustering, a.exemplars);
    say(format!(
        "k = {}, mean silhouette {:.3}{}",
        clustering.k,
        clustering.mean_silhouette,
        if clustering.low_confidence {
            " (low confidence)"
        } else {
            ""
        }
    ));
    let file = ClusterFile {
        dataset_hash: ds.manifest.content_hash.clone(),
        clustering,
        exemplars,
    };
    write_json(&a.out.out, CLUSTERING_FILE, &file)?;
    Ok(())
}

pub fn rank(a: &RankArgs) -> Result<()> {
    let file: ClusterFile = read_json(&a.clustering)?;
    let ranking: PreferenceRanking<usize> = match (&a.ranking, &a.simulate) {
        (Some(p), None) => read_json(p)?,
        (None, Some(d)) => {
            let ds = load_dataset(d)?;
            check_dataset(&file, &ds, &a.clustering)?;
            let world = a.world.as_deref().map(load_world).transpose()?;
            let ranks = label_ranks_or_oracle(a.label_ranks.as_deref(), world.as_ref())?;
            let labels: Vec<Option<String>> = ds.samples.iter().map(|s| s.label.clone()).collect();
            simulate_operator(&file.clustering, &labels, &ranks)
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --ranking or --simulate".into(),
            ))
        }
    };
    let ids: Vec<usize> = (0..file.clustering.k).collect();
    ranking
        .validate(&ids)
        .map_err(|e| CliError::Runtime(format!("invalid ranking: {e}")))?;
    write_json(&a.out.out, RANKING_FILE, &ranking)?;
    say(format!(
        "{} rank groups over {} clusters",
        ranking.rank_groups.len(),
        ids.len()
    ));
    Ok(())
}

pub fn train_utility_cmd(a: &TrainUtilityArgs) -> Result<()> {
    let ckpt: Checkpoint = read_json(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let file: ClusterFile = read_json(&a.clustering)?;
    check_dataset(&file, &ds, &a.clustering)?;
    let ranking: PreferenceRanking<usize> = read_json(&a.ranking)?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<UtilityConfig>(p)?,
        None => UtilityConfig::new(a.seed),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let head = fit_head(&ckpt, &ds, &file, &ranking, &cfg)?;
    write_json(&a.out.out, UTILITY_FILE, &head)?;
    say(format!(
        "utility head trained, final loss {:.4}",
        head.meta.final_loss
    ));
    Ok(())
}

/// Utility head over the clusters' visual embeddings.
pub fn fit_head(
    ckpt: &Checkpoint,
    ds: &Dataset,
    file: &ClusterFile,
    ranking: &PreferenceRanking<usize>,
    cfg: &UtilityConfig,
) -> Result<UtilityHead> {
    let z = ckpt.embed_dataset(ds)?;
    Ok(train_utility(
        &cluster_embeddings(&z, &file.clustering),
        ranking,
        cfg,
    )?)
}

pub fn train_patern_cmd(a: &TrainPaternArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let world = a.world.as_deref().map(load_world).transpose()?;
    let ranks = label_ranks_or_oracle(a.label_ranks.as_deref(), world.as_ref())?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<PaternConfig>(p)?,
        None => PaternConfig::new(a.seed),
    };
    cfg.seed = a.seed;
    let ckpt = train_preadaptation(&ds, &label_ranking(&ranks), &cfg)?;
    write_json(&a.out.out, PATERN_FILE, &ckpt)?;
    say(format!(
        "{} known terrains, held-out distillation MAE {:.4}",
        ckpt.known_terrains.len(),
        ckpt.report.val_distill_mae
    ));
    Ok(())
}

#[derive(Serialize)]
struct NoveltyReport {
    samples: usize,
    novel: usize,
    per_sample: Vec<Novelty>,
}

pub fn detect_novel(a: &DetectNovelArgs) -> Result<()> {
    let ckpt: PaternCheckpoint = read_json(&a.patern)?;
    let ds = load_dataset(&a.dataset)?;
    let per_sample = ds
        .samples
        .iter()
        .map(|s| ckpt.detect_novel(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let flagged: Vec<usize> = (0..ds.len())
        .filter(|&i| per_sample[i].is_novel())
        .collect();
    if !flagged.is_empty() {
        save_dataset(&ds.subset(&flagged)?, &a.out.out.join(NOVEL_DIR))?;
    }
    say(format!("{} of {} samples novel", flagged.len(), ds.len()));
    write_json(
        &a.out.out,
        NOVELTY_FILE,
        &NoveltyReport {
            samples: ds.len(),
            novel: flagged.len(),
            per_sample,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AdaptReport<'a> {
    groups: &'a [terrapref::patern::ExtrapolationGroup],
    new_terrains: Vec<terrapref::patern::KnownTerrain>,
    already_adapted: bool,
}

pub fn adapt_cmd(a: &AdaptArgs) -> Result<()> {
    let ckpt: PaternCheckpoint = read_json(&a.patern)?;
    let pre = load_dataset(&a.pre_dataset)?;
    let set = load_dataset(&a.set)?;
    let groups = extrapolate_preference(&ckpt, &set)?;
    match adapt(&ckpt, &pre, &set, a.seed) {
        Ok(outcome) => {
            let report = AdaptReport {
                groups: &groups,
                new_terrains: outcome.new_terrains,
                already_adapted: outcome.already_adapted,
            };
            write_json(&a.out.out, EXTRAPOLATION_FILE, &report)?;
            write_json(&a.out.out, PATERN_FILE, &outcome.checkpoint)?;
            for t in &report.new_terrains {
                say(format!("{} takes rank {}", t.label, t.rank));
            }
            Ok(())
        }
        Err(e @ PaternError::OperatorFeedbackRequired { .. }) => {
            let report = AdaptReport {
                groups: &groups,
                new_terrains: Vec::new(),
                already_adapted: false,
            };
            write_json(&a.out.out, EXTRAPOLATION_FILE, &report)?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct EpisodeSummary {
    model: String,
    alpha: f64,
    seed: u64,
    start: RobotState,
    goal: [f64; 2],
    outcome: Outcome,
    steps: usize,
    path_length_m: f64,
    duration_s: f64,
    path: Vec<[f64; 2]>,
}

fn episode_config(goal: [f64; 2], alpha: f64, exec: ExecMode) -> Result<EpisodeConfig> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::Usage(format!(
            "--alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut cfg = EpisodeConfig::new(goal, alpha);
    cfg.exec = exec;
    Ok(cfg)
}

pub fn plan(a: &PlanArgs, exec: ExecMode) -> Result<()> {
    let world = load_world(&a.world)?;
    let task = a
        .task
        .as_deref()
        .map(|p| load_task(p, &world))
        .transpose()?;
    let start = match (&a.start, &task) {
        (Some(s), _) => parse_pose(s)?,
        (None, Some(t)) => t.start,
        (None, None) => return Err(CliError::Usage("give --start or --task".into())),
    };
    let goal = match (&a.goal, &task) {
        (Some(g), _) => parse_point(g)?,
        (None, Some(t)) => t.goal,
        (None, None) => return Err(CliError::Usage("give --goal or --task".into())),
    };
    let cfg = episode_config(goal, a.model.alpha, exec)?;
    let ranks = judging_ranks(a.model.label_ranks.as_deref(), &world)?;
    let model = Model::load(&a.model, &world, &ranks)?;
    let episode = run_episode(&world, model.utility().as_ref(), &cfg, start, a.seed)?;
    let path = episode.points();
    let summary = EpisodeSummary {
        model: model.name().into(),
        alpha: a.model.alpha,
        seed: a.seed,
        start,
        goal,
        outcome: episode.outcome,
        steps: episode.steps,
        path_length_m: path_length(&path),
        duration_s: episode.states.last().map_or(0.0, |s| s.t),
        path,
    };
    write_json(&a.out.out, EPISODE_FILE, &summary)?;
    write_text(&a.out.out, PLAN_LOG_FILE, &episode.log_jsonl())?;
    say(format!(
        "{:?} after {} plans, {:.2} m",
        summary.outcome, summary.steps, summary.path_length_m
    ));
    Ok(())
}

pub fn eval(a: &EvalArgs, exec: ExecMode) -> Result<()> {
    let world = load_world(&a.world)?;
    let task = load_task(&a.task, &world)?;
    let ranks = judging_ranks(a.model.label_ranks.as_deref(), &world)?;
    let model = Model::load(&a.model, &world, &ranks)?;
    let cfg = BenchmarkConfig {
        method: a.method.clone().unwrap_or_else(|| model.name().into()),
        episode: episode_config(task.goal, a.model.alpha, exec)?,
        start: task.start,
        start_jitter: START_JITTER,
        trials: a.trials,
        seed: a.seed,
        reference: task.reference,
        ranks,
    };
    let report = run_benchmark(&world, model.utility().as_ref(), &cfg, exec)?;
    write_text(&a.out.out, REPORT_FILE, &(report.to_json() + "\n"))?;
    let table = EvalReport::table(std::slice::from_ref(&report));
    write_text(&a.out.out, TABLE_FILE, &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let audit = gradient_audit(a.seed);
    write_json(&a.out.out, GRADCHECK_FILE, &audit)?;
    for c in &audit.checks {
        say(format!(
            "{:<34} max rel err {:.2e} over {} coordinates",
            c.loss, c.report.max_rel_err, c.report.checked
        ));
    }
    if audit.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e}",
            audit.max_rel_err
        )))
    }
}
