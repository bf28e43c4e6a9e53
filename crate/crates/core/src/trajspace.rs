//! Waypoint and action representations of a planned trajectory.
//!
//! An action is the displacement between consecutive waypoints; the first
//! action is the first waypoint itself (displacement from the ego origin).
//! Summing actions recovers the waypoints.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::PlanError;

/// Number of future waypoints.
pub const HORIZON: usize = 8;
/// Seconds between consecutive waypoints.
pub const STEP_DT: f64 = 0.5;
/// Sanity bound on waypoint coordinates, in meters.
pub const COORD_BOUND: f64 = 200.0;

pub type Waypoint = Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: [Waypoint; HORIZON],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub actions: [Vec2; HORIZON],
}

impl Trajectory {
    pub fn new(waypoints: [Waypoint; HORIZON]) -> Result<Self, PlanError> {
        let t = Self { waypoints };
        t.validate()?;
        Ok(t)
    }

    pub fn from_fn(f: impl FnMut(usize) -> Waypoint) -> Self {
        Self {
            waypoints: std::array::from_fn(f),
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for (k, p) in self.waypoints.iter().enumerate() {
            if !p.is_finite() || p.x.abs() > COORD_BOUND || p.y.abs() > COORD_BOUND {
                return Err(PlanError::InvalidTrajectory(format!("waypoint {k} = ({}, {})", p.x, p.y)));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        HORIZON as f64 * STEP_DT
    }

    /// Waypoints preceded by the ego origin.
    pub fn with_origin(&self) -> [Vec2; HORIZON + 1] {
        let mut out = [Vec2::ZERO; HORIZON + 1];
        out[1..].copy_from_slice(&self.waypoints);
        out
    }

    pub fn final_point(&self) -> Vec2 {
        self.waypoints[HORIZON - 1]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self::from_fn(|k| self.waypoints[k] * a)
    }
}

impl ActionSequence {
    pub fn from_fn(f: impl FnMut(usize) -> Vec2) -> Self {
        Self {
            actions: std::array::from_fn(f),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.actions.iter().all(|a| a.is_finite())
    }

    /// Row-major `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> [f64; 2 * HORIZON] {
        let mut out = [0.0; 2 * HORIZON];
        for (k, a) in self.actions.iter().enumerate() {
            out[2 * k] = a.x;
            out[2 * k + 1] = a.y;
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 2 * HORIZON);
        Self::from_fn(|k| Vec2::new(v[2 * k], v[2 * k + 1]))
    }
}

pub fn to_actions(traj: &Trajectory) -> ActionSequence {
    let w = &traj.waypoints;
    ActionSequence::from_fn(|k| if k == 0 { w[0] } else { w[k] - w[k - 1] })
}

pub fn to_trajectory(actions: &ActionSequence) -> Trajectory {
    let mut acc = Vec2::ZERO;
    Trajectory::from_fn(|k| {
        acc += actions.actions[k];
        acc
    })
}
