//! On-disk artifacts shared by the commands and the server.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use terrapref::datapipe::{read_dataset, write_dataset, Dataset};
use terrapref::evalkit::TerrainRanks;
use terrapref::patern::PaternCheckpoint;
use terrapref::planner::{FlatUtility, UtilityModel};
use terrapref::preference::{Clustering, UtilityHead};
use terrapref::scenarios::{oracle_label_ranks, ranks_from_labels, OracleScorer, SterlingUtility};
use terrapref::sterling::Checkpoint;
use terrapref::worldsim::{RobotState, World};

use crate::args::{ModelArgs, ModelKind};

pub const WORLD_FILE: &str = "world.json";
pub const TASK_FILE: &str = "task.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const STERLING_FILE: &str = "sterling.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const CLUSTERING_FILE: &str = "clustering.json";
pub const RANKING_FILE: &str = "ranking.json";
pub const UTILITY_FILE: &str = "utility.json";
pub const PATERN_FILE: &str = "patern.json";
pub const NOVELTY_FILE: &str = "novelty.json";
pub const NOVEL_DIR: &str = "novel";
pub const EXTRAPOLATION_FILE: &str = "extrapolation.json";
pub const EPISODE_FILE: &str = "episode.json";
pub const PLAN_LOG_FILE: &str = "plan_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flag values; reported like a parse error.
    #[error("{0}")]
    Usage(String),
    #[error("input not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    terrapref::worldsim::WorldError,
    terrapref::datapipe::DataError,
    terrapref::sterling::SterlingError,
    terrapref::preference::PrefError,
    terrapref::patern::PaternError,
    terrapref::planner::PlanError,
    terrapref::evalkit::EvalError,
    terrapref::scenarios::ScenarioError
);

pub type Result<T> = std::result::Result<T, CliError>;

/// Start, goal and demonstration of a navigation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub world_hash: String,
    pub start: RobotState,
    pub goal: [f64; 2],
    pub reference: Vec<[f64; 2]>,
}

/// Clustering of a dataset's visual embeddings plus the exemplars shown to
/// the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFile {
    pub dataset_hash: String,
    pub clustering: Clustering,
    /// Sample indices per cluster, nearest to the centroid first.
    pub exemplars: Vec<Vec<usize>>,
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::File {
        path: path.into(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::File {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::File {
        path: dir.into(),
        message: e.to_string(),
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::File {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(path)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write_text(dir, name, &to_json(value))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_world(path: &Path) -> Result<World> {
    require(path)?;
    World::load(path).map_err(|e| CliError::File {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    require(dir)?;
    read_dataset(dir).map_err(|e| CliError::File {
        path: dir.into(),
        message: e.to_string(),
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    Ok(write_dataset(dataset, dir)?)
}

pub fn load_task(path: &Path, world: &World) -> Result<TaskFile> {
    let task: TaskFile = read_json(path)?;
    if task.world_hash != world.content_hash() {
        return Err(CliError::Runtime(format!(
            "{} belongs to a different world",
            path.display()
        )));
    }
    Ok(task)
}

fn parse_numbers(text: &str, what: &str, lens: &[usize]) -> Result<Vec<f64>> {
    let v: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if lens.contains(&v.len()) && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(CliError::Usage(format!("invalid {what} '{text}'"))),
    }
}

/// `x,y` or `x,y,theta`.
pub fn parse_pose(text: &str) -> Result<RobotState> {
    let v = parse_numbers(text, "pose", &[2, 3])?;
    Ok(RobotState::new(
        v[0],
        v[1],
        v.get(2).copied().unwrap_or(0.0),
    ))
}

pub fn parse_point(text: &str) -> Result<[f64; 2]> {
    let v = parse_numbers(text, "point", &[2])?;
    Ok([v[0], v[1]])
}

/// `label=rank,label=rank,…`.
pub fn parse_label_ranks(text: &str) -> Result<BTreeMap<String, u32>> {
    let mut out = BTreeMap::new();
    for item in text.split(',').filter(|s| !s.trim().is_empty()) {
        let (label, rank) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("label rank '{item}' is not label=rank")))?;
        let rank = rank
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("rank in '{item}' is not a whole number")))?;
        if out.insert(label.trim().to_string(), rank).is_some() {
            return Err(CliError::Usage(format!(
                "label '{}' ranked twice",
                label.trim()
            )));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("empty label ranks".into()));
    }
    Ok(out)
}

/// Label ranks from the flag, or the world's ground truth.
pub fn label_ranks_or_oracle(
    flag: Option<&str>,
    world: Option<&World>,
) -> Result<BTreeMap<String, u32>> {
    match (flag, world) {
        (Some(text), _) => parse_label_ranks(text),
        (None, Some(w)) => Ok(oracle_label_ranks(w)),
        (None, None) => Err(CliError::Usage("give --label-ranks or --world".into())),
    }
}

/// A planner utility model loaded from disk.
pub enum Model {
    Geometric,
    Oracle(OracleScorer),
    Sterling(Box<Checkpoint>, UtilityHead),
    Patern(Box<PaternCheckpoint>),
}

impl Model {
    pub fn load(args: &ModelArgs, world: &World, ranks: &TerrainRanks) -> Result<Self> {
        let need = |p: &Option<PathBuf>, flag: &str| {
            p.clone().ok_or_else(|| {
                CliError::Usage(format!("--model {:?} needs {flag}", args.model).to_lowercase())
            })
        };
        Ok(match args.model {
            ModelKind::Geometric => Model::Geometric,
            ModelKind::Oracle => Model::Oracle(OracleScorer::new(world, ranks, 1.0)),
            ModelKind::Sterling => {
                let (c, u) = (
                    need(&args.checkpoint, "--checkpoint")?,
                    need(&args.utility, "--utility")?,
                );
                Model::Sterling(Box::new(read_json(&c)?), read_json(&u)?)
            }
            ModelKind::Patern => {
                Model::Patern(Box::new(read_json(&need(&args.patern, "--patern")?)?))
            }
        })
    }

    pub fn utility(&self) -> Box<dyn UtilityModel + '_> {
        match self {
            Model::Geometric => Box::new(FlatUtility),
            Model::Oracle(o) => Box::new(Borrowed(o)),
            Model::Sterling(c, h) => Box::new(SterlingUtility {
                checkpoint: c,
                head: h,
            }),
            Model::Patern(p) => Box::new(Borrowed(p.as_ref())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::Geometric => "geometric",
            Model::Oracle(_) => "oracle",
            Model::Sterling(..) => "sterling",
            Model::Patern(_) => "patern",
        }
    }
}

struct Borrowed<'a, T>(&'a T);

impl<T: UtilityModel> UtilityModel for Borrowed<'_, T> {
    fn utilities(
        &self,
        descriptors: &terrapref::linalg::Matrix,
    ) -> std::result::Result<Vec<f64>, terrapref::planner::PlanError> {
        self.0.utilities(descriptors)
    }
}

/// Terrain ranks used for judging: from `--label-ranks` or ground truth.
pub fn judging_ranks(flag: Option<&str>, world: &World) -> Result<TerrainRanks> {
    Ok(match flag {
        Some(text) => ranks_from_labels(world, &parse_label_ranks(text)?),
        None => TerrainRanks::oracle(world),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flag_values() {
        assert_eq!(parse_pose("1,2").unwrap(), RobotState::new(1.0, 2.0, 0.0));
        assert_eq!(
            parse_pose("1, 2, 0.5").unwrap(),
            RobotState::new(1.0, 2.0, 0.5)
        );
        assert!(matches!(parse_pose("1"), Err(CliError::Usage(_))));
        assert!(parse_point("1,2,3").is_err());
        assert!(parse_point("nan,2").is_err());
        let r = parse_label_ranks("cement=0, grass=0,bush=2").unwrap();
        assert_eq!(r["grass"], 0);
        assert_eq!(r["bush"], 2);
        assert!(parse_label_ranks("cement").is_err());
        assert!(parse_label_ranks("a=1,a=2").is_err());
        assert!(parse_label_ranks("a=-1").is_err());
    }
}
