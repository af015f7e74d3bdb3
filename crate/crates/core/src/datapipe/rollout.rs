use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::rng::{derive_rng, tag};
use crate::worldsim::{normalize_angle, step, RobotState, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedState {
    pub t: f64,
    pub pose: RobotState,
    /// Command applied from this state to the next.
    pub v: f64,
    pub omega: f64,
}

/// Executed path plus the IPT window logged at every tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<TimedState>,
    pub ipt_log: Vec<Vec<f64>>,
    /// The policy tried to leave the world or enter an obstacle.
    pub truncated: bool,
    pub seed: u64,
}

impl Trajectory {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| s.pose.xy()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    /// Piecewise-constant random commands, resampled every `hold_ticks`,
    /// steering back toward the world centre within `margin` of the border.
    RandomWalk {
        v_min: f64,
        v_max: f64,
        omega_max: f64,
        hold_ticks: usize,
        margin: f64,
    },
    FixedArc {
        v: f64,
        omega: f64,
    },
    /// Proportional heading control through a waypoint list.
    WaypointFollow {
        waypoints: Vec<[f64; 2]>,
        v: f64,
        gain: f64,
        tolerance: f64,
    },
}

impl Policy {
    pub fn random_walk() -> Self {
        Policy::RandomWalk {
            v_min: 0.3,
            v_max: 1.0,
            omega_max: 0.8,
            hold_ticks: 10,
            margin: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub start: RobotState,
    pub duration: f64,
    pub dt: f64,
}

pub fn record_rollout(
    world: &World,
    policy: &Policy,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Trajectory, DataError> {
    if !(cfg.duration > 0.0) {
        return Err(DataError::Invalid(format!(
            "rollout duration must be positive, got {}",
            cfg.duration
        )));
    }
    if !(cfg.dt > 0.0) {
        return Err(DataError::Invalid(format!(
            "rollout dt must be positive, got {}",
            cfg.dt
        )));
    }
    if world.collides(cfg.start.x, cfg.start.y) {
        return Err(DataError::Invalid(
            "rollout start is outside the world or blocked".into(),
        ));
    }
    let ticks = (cfg.duration / cfg.dt).round().max(1.0) as usize;
    let mut policy_rng = derive_rng(seed, tag("policy"));
    let mut ipt_rng = derive_rng(seed, tag("ipt"));
    let mut states = Vec::with_capacity(ticks + 1);
    let mut ipt_log = Vec::with_capacity(ticks + 1);
    let mut pose = cfg.start;
    let mut held = (0.0, 0.0);
    let mut waypoint = 0usize;
    let mut truncated = false;
    for tick in 0..=ticks {
        let (v, omega) = if tick == ticks {
            (0.0, 0.0)
        } else {
            match policy {
                Policy::FixedArc { v, omega } => (*v, *omega),
                Policy::RandomWalk {
                    v_min,
                    v_max,
                    omega_max,
                    hold_ticks,
                    margin,
                } => {
                    if tick % (*hold_ticks).max(1) == 0 {
                        held = (
                            policy_rng.random_range(*v_min..=*v_max),
                            policy_rng.random_range(-*omega_max..=*omega_max),
                        );
                    }
                    let near_edge = pose.x < *margin
                        || pose.y < *margin
                        || pose.x > world.width_m() - margin
                        || pose.y > world.height_m() - margin;
                    if near_edge {
                        let to_centre =
                            (world.height_m() / 2.0 - pose.y).atan2(world.width_m() / 2.0 - pose.x);
                        let err = normalize_angle(to_centre - pose.theta);
                        (held.0, (2.0 * err).clamp(-2.0 * omega_max, 2.0 * omega_max))
                    } else {
                        held
                    }
                }
                Policy::WaypointFollow {
                    waypoints,
                    v,
                    gain,
                    tolerance,
                } => {
                    while waypoint < waypoints.len()
                        && pose.distance_to(waypoints[waypoint]) < *tolerance
                    {
                        waypoint += 1;
                    }
                    match waypoints.get(waypoint) {
                        Some(wp) => {
                            let heading = (wp[1] - pose.y).atan2(wp[0] - pose.x);
                            (*v, gain * normalize_angle(heading - pose.theta))
                        }
                        None => (0.0, 0.0),
                    }
                }
            }
        };
        ipt_log.push(world.sense_ipt(&pose, &mut ipt_rng)?);
        states.push(TimedState {
            t: tick as f64 * cfg.dt,
            pose,
            v,
            omega,
        });
        if tick == ticks {
            break;
        }
        let next = step(&pose, v, omega, cfg.dt)?;
        if world.collides(next.x, next.y) {
            truncated = true;
            if let Some(last) = states.last_mut() {
                last.v = 0.0;
                last.omega = 0.0;
            }
            break;
        }
        pose = next;
    }
    Ok(Trajectory {
        states,
        ipt_log,
        truncated,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{TerrainModel, WorldConfig};

    fn world(ids: Vec<u32>, w: usize, h: usize) -> World {
        let mut uniq = ids.clone();
        uniq.sort();
        uniq.dedup();
        let terrains = uniq
            .into_iter()
            .map(|id| TerrainModel {
                id,
                label: format!("t{id}"),
                visual_prototype: vec![id as f64, 1.0],
                visual_spread: 0.1,
                ipt_prototype: vec![0.1; 33],
                ipt_spread: 0.2,
                oracle_rank: id,
            })
            .collect();
        World::new(
            WorldConfig {
                width: w,
                height: h,
                grid: ids,
                cell_size: 1.0,
                obstacles: vec![],
                rng_seed: 0,
                ipt_sample_rate: 32.0,
                ipt_window: 2.0,
                sensing_range: 2.5,
            },
            terrains,
        )
        .unwrap()
    }

    fn cfg(duration: f64) -> RolloutConfig {
        RolloutConfig {
            start: RobotState::new(1.0, 1.0, 0.0),
            duration,
            dt: 0.1,
        }
    }

    #[test]
    fn zero_duration_is_an_error() {
        let w = world(vec![0; 100], 10, 10);
        assert!(record_rollout(&w, &Policy::random_walk(), &cfg(0.0), 1).is_err());
    }

    #[test]
    fn straight_on_uniform_terrain_keeps_one_label() {
        let w = world(vec![0; 20], 10, 2);
        let t = record_rollout(&w, &Policy::FixedArc { v: 1.0, omega: 0.0 }, &cfg(5.0), 1).unwrap();
        assert!(!t.truncated);
        assert_eq!(t.states.len(), 51);
        let ids: std::collections::BTreeSet<u32> = t
            .states
            .iter()
            .map(|s| w.terrain_at(s.pose.x, s.pose.y).unwrap())
            .collect();
        assert_eq!(ids.len(), 1);
        assert!((t.states.last().unwrap().pose.x - 6.0).abs() < 1e-9);
        assert!(t.states.windows(2).all(|p| p[1].t > p[0].t));
    }

    #[test]
    fn random_walk_is_deterministic() {
        let w = world(vec![0; 100], 10, 10);
        let a = record_rollout(&w, &Policy::random_walk(), &cfg(20.0), 9).unwrap();
        let b = record_rollout(&w, &Policy::random_walk(), &cfg(20.0), 9).unwrap();
        assert_eq!(a, b);
        let c = record_rollout(&w, &Policy::random_walk(), &cfg(20.0), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn leaving_the_world_truncates() {
        let w = world(vec![0; 4], 4, 1);
        let c = RolloutConfig {
            start: RobotState::new(0.5, 0.5, 0.0),
            duration: 10.0,
            dt: 0.1,
        };
        let t = record_rollout(&w, &Policy::FixedArc { v: 1.0, omega: 0.0 }, &c, 1).unwrap();
        assert!(t.truncated);
        assert!(t.states.iter().all(|s| w.in_bounds(s.pose.x, s.pose.y)));
    }

    #[test]
    fn waypoints_are_followed() {
        let w = world(vec![0; 100], 10, 10);
        let p = Policy::WaypointFollow {
            waypoints: vec![[5.0, 1.0], [5.0, 5.0]],
            v: 0.8,
            gain: 2.0,
            tolerance: 0.2,
        };
        let t = record_rollout(&w, &p, &cfg(15.0), 1).unwrap();
        let end = t.states.last().unwrap().pose;
        assert!(end.distance_to([5.0, 5.0]) < 0.5, "{end:?}");
    }
}
