use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "terrapref",
    version,
    about = "Terrain representation learning, preference utilities and preference-aligned planning"
)]
pub struct Cli {
    /// Run batch loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a standard synthetic world (and its navigation task).
    GenWorld(GenWorldArgs),
    /// Drive a robot through a world and log poses and IPT windows.
    Rollout(RolloutArgs),
    /// Turn trajectories into a multi-view dataset with PSD features.
    Featurize(FeaturizeArgs),
    /// Train the self-supervised visual and IPT encoders.
    TrainSterling(TrainSterlingArgs),
    /// Cluster visual embeddings and pick exemplars for the operator.
    Cluster(ClusterArgs),
    /// Validate an operator ranking of clusters, or simulate one.
    Rank(RankArgs),
    /// Fit a utility head to a cluster ranking.
    TrainUtility(TrainUtilityArgs),
    /// Train the pre-adaptation model on labelled terrains.
    TrainPatern(TrainPaternArgs),
    /// Flag samples whose visual embedding is far from every known terrain.
    DetectNovel(DetectNovelArgs),
    /// Extrapolate preferences to an adaptation set and retrain.
    Adapt(AdaptArgs),
    /// Run one planning episode.
    Plan(PlanArgs),
    /// Run seeded benchmark episodes and report alignment metrics.
    Eval(EvalArgs),
    /// Check analytic gradients of every training loss.
    Gradcheck(GradcheckArgs),
    /// Serve the preference-ranking HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WorldKind {
    /// 20 × 20 cells of the five library terrains in 4 m patches.
    Separable,
    /// Cement, grass and bush; the straight route crosses bush.
    Corridor,
    /// Corridor whose straight route crosses a visually novel terrain.
    NovelCorridor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Full,
    ViewpointOnly,
    MultiModalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// No terrain preference.
    Geometric,
    /// Ground-truth terrain recognition with ranks from --label-ranks.
    Oracle,
    /// STERLING encoder plus a trained utility head.
    Sterling,
    /// PATERN visual utility.
    Patern,
}

#[derive(Debug, Clone, Args)]
pub struct Out {
    /// Directory receiving every output of the command.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long, value_enum)]
    pub kind: WorldKind,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Seconds of driving.
    #[arg(long, default_value_t = 60.0)]
    pub duration: f64,
    /// Start pose `x,y[,theta]`; defaults to a seeded collision-free pose.
    #[arg(long)]
    pub start: Option<String>,
    /// Follow these `x,y` waypoints instead of a random walk.
    #[arg(long, num_args = 1..)]
    pub waypoint: Vec<String>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// One or more trajectory files; their samples are concatenated.
    #[arg(long, required = true, num_args = 1..)]
    pub trajectory: Vec<PathBuf>,
    /// Keep only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct TrainSterlingArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON training configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    /// Exemplars shown per cluster.
    #[arg(long, default_value_t = 4)]
    pub exemplars: usize,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub clustering: PathBuf,
    /// Operator ranking `{"rank_groups": [[cluster ids]…]}`.
    #[arg(long, conflicts_with = "simulate")]
    pub ranking: Option<PathBuf>,
    /// Simulate the operator from ground-truth labels of this dataset.
    #[arg(long, value_name = "DATASET")]
    pub simulate: Option<PathBuf>,
    /// Label ranks `label=rank,…` for the simulated operator; defaults to
    /// the world's ground truth.
    #[arg(long)]
    pub label_ranks: Option<String>,
    /// World supplying ground-truth ranks for the simulated operator.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct TrainUtilityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub clustering: PathBuf,
    #[arg(long)]
    pub ranking: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct TrainPaternArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Label ranks `label=rank,…`; defaults to the world's ground truth.
    #[arg(long)]
    pub label_ranks: Option<String>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct DetectNovelArgs {
    #[arg(long)]
    pub patern: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub patern: PathBuf,
    /// Dataset the pre-adaptation model was trained on.
    #[arg(long)]
    pub pre_dataset: PathBuf,
    /// Adaptation set.
    #[arg(long)]
    pub set: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// STERLING checkpoint (with --model sterling).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Utility head (with --model sterling).
    #[arg(long)]
    pub utility: Option<PathBuf>,
    /// PATERN checkpoint (with --model patern).
    #[arg(long)]
    pub patern: Option<PathBuf>,
    /// Label ranks `label=rank,…` for the oracle model and for judging;
    /// defaults to the world's ground truth.
    #[arg(long)]
    pub label_ranks: Option<String>,
    /// Trade-off between geometric progress (1) and terrain preference (0).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Task file supplying start and goal.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Start pose `x,y[,theta]`.
    #[arg(long)]
    pub start: Option<String>,
    /// Goal `x,y`.
    #[arg(long)]
    pub goal: Option<String>,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Method name in the report; defaults to the model kind.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub clustering: PathBuf,
    /// Task whose start, goal and reference back the previews.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Session directory for rankings and retrained utility heads.
    #[arg(long)]
    pub session: PathBuf,
    /// Directory of the static UI bundle.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}
