//! Dataset directory format: `manifest.json` plus `samples.jsonl`, one sample
//! per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hash_lines, DataError, Dataset, Manifest, Sample};
use crate::worldsim::RobotState;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    x: f64,
    y: f64,
    theta: f64,
    views: Vec<Vec<f64>>,
    ipt_psd: Vec<f64>,
    label: Option<String>,
}

pub(crate) fn sample_lines(samples: &[Sample]) -> Result<String, DataError> {
    let mut out = String::new();
    for s in samples {
        let line = SampleLine {
            x: s.state.x,
            y: s.state.y,
            theta: s.state.theta,
            views: s.views.clone(),
            ipt_psd: s.ipt_psd.clone(),
            label: s.label.clone(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| DataError::Invalid(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let lines = sample_lines(&dataset.samples)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(dir.join(SAMPLES_FILE), lines).map_err(io)?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n").map_err(io)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name))
            .map_err(|e| DataError::Io(format!("{}: {e}", dir.join(name).display())))
    };
    let manifest_text = read(MANIFEST_FILE)?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| DataError::Parse {
            file: MANIFEST_FILE.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let text = read(SAMPLES_FILE)?;
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for (i, line) in text.lines().enumerate() {
        let parsed: SampleLine = serde_json::from_str(line).map_err(|e| DataError::Parse {
            file: SAMPLES_FILE.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(Sample {
            state: RobotState {
                x: parsed.x,
                y: parsed.y,
                theta: parsed.theta,
            },
            views: parsed.views,
            ipt_psd: parsed.ipt_psd,
            label: parsed.label,
        });
    }
    if samples.len() != manifest.sample_count {
        return Err(DataError::Parse {
            file: SAMPLES_FILE.into(),
            line: samples.len() + 1,
            message: format!(
                "expected {} samples, found {}",
                manifest.sample_count,
                samples.len()
            ),
        });
    }
    if hash_lines(&text) != manifest.content_hash {
        return Err(DataError::Integrity(format!(
            "{} does not match the manifest content hash",
            dir.join(SAMPLES_FILE).display()
        )));
    }
    let ds = Dataset::new(
        samples,
        manifest.world_hash.clone(),
        manifest.seed,
        manifest.dropped_states,
    )?;
    if ds.manifest != manifest {
        return Err(DataError::Integrity(
            "manifest fields disagree with dataset content".into(),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset() -> Dataset {
        let samples = (0..5)
            .map(|i| Sample {
                state: RobotState::new(i as f64 * 0.3, 1.0 / 3.0, 0.1 * i as f64),
                views: vec![vec![0.1 * i as f64, -2.5e-7, 1.0 / 7.0]; 1 + i % 3],
                ipt_psd: vec![0.5, 1e-12, 3.25, -0.2, 0.7],
                label: if i % 2 == 0 {
                    Some(format!("t{i}"))
                } else {
                    None
                },
            })
            .collect();
        Dataset::new(samples, "abc".into(), 42, 3).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset();
        write_dataset(&d, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(), dir.path()).unwrap();
        let p = dir.path().join(SAMPLES_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() - 20]).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        // cut on a line boundary
        let keep: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        fs::write(&p, keep).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn tampered_content_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(), dir.path()).unwrap();
        let p = dir.path().join(SAMPLES_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("3.25", "3.5");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DataError::Integrity(_))
        ));
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut d = dataset();
        d.samples[0].views[0][0] = f64::NAN;
        assert!(Dataset::new(d.samples, "x".into(), 0, 0).is_err());
    }
}
