use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Circular obstacle whose center loops through `waypoints` at constant speed.
///
/// The loop closes from the last waypoint back to the first and takes `period`
/// seconds. A single waypoint gives a static obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObstacleTrack {
    pub waypoints: Vec<Vec<f64>>,
    pub period: f64,
    pub radius: f64,
}

impl ObstacleTrack {
    pub fn new(waypoints: Vec<Vec<f64>>, period: f64, radius: f64) -> Result<Self> {
        let track = Self {
            waypoints,
            period,
            radius,
        };
        track.validate(None)?;
        Ok(track)
    }

    pub fn stationary(center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::new(vec![center], 1.0, radius)
    }

    pub(crate) fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "obstacle period must be positive, got {}",
                self.period
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "obstacle radius must be positive, got {}",
                self.radius
            )));
        }
        let first = self
            .waypoints
            .first()
            .ok_or_else(|| Error::InvalidInput("obstacle track needs at least one waypoint".into()))?;
        let d = dim.unwrap_or(first.len());
        if d == 0
            || self
                .waypoints
                .iter()
                .any(|w| w.len() != d || w.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "obstacle waypoints must all be finite {d}-dimensional points"
            )));
        }
        Ok(())
    }

    fn segments(&self) -> impl Iterator<Item = (&[f64], &[f64], f64)> {
        let n = self.waypoints.len();
        (0..n).map(move |i| {
            let a = &self.waypoints[i];
            let b = &self.waypoints[(i + 1) % n];
            (a.as_slice(), b.as_slice(), dist(a, b))
        })
    }

    fn loop_length(&self) -> f64 {
        if self.waypoints.len() < 2 {
            return 0.0;
        }
        self.segments().map(|(_, _, l)| l).sum()
    }

    /// Center position and velocity at time `t`.
    pub fn state_at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let total = self.loop_length();
        let dim = self.waypoints[0].len();
        if total == 0.0 {
            return (self.waypoints[0].clone(), vec![0.0; dim]);
        }
        let speed = total / self.period;
        let phase = t.rem_euclid(self.period) / self.period;
        let mut remaining = phase * total;
        for (a, b, len) in self.segments() {
            if len == 0.0 {
                continue;
            }
            if remaining <= len {
                let s = remaining / len;
                let pos = a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect();
                let vel = a.iter().zip(b).map(|(x, y)| (y - x) / len * speed).collect();
                return (pos, vel);
            }
            remaining -= len;
        }
        // Rounding can leave a sliver past the final segment; that point is the start.
        let (a, b, len) = self.segments().find(|s| s.2 > 0.0).unwrap();
        let vel = a.iter().zip(b).map(|(x, y)| (y - x) / len * speed).collect();
        (self.waypoints[0].clone(), vel)
    }

    pub fn position_at(&self, t: f64) -> Vec<f64> {
        self.state_at(t).0
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> ObstacleTrack {
        ObstacleTrack::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]],
            4.0,
            0.3,
        )
        .unwrap()
    }

    #[test]
    fn moves_at_constant_speed_around_the_loop() {
        let track = square();
        let (p, v) = track.state_at(0.5);
        assert!((p[0] - 0.5).abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        let (p, v) = track.state_at(2.5);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        assert!((v[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn position_is_periodic() {
        let track = square();
        for i in 0..200 {
            let t = i as f64 * 0.137;
            let a = track.position_at(t);
            let b = track.position_at(t + track.period);
            assert!(dist(&a, &b) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn stationary_obstacle_does_not_move() {
        let track = ObstacleTrack::stationary(vec![2.0], 0.5).unwrap();
        assert_eq!(track.state_at(3.3), (vec![2.0], vec![0.0]));
    }

    #[test]
    fn invalid_tracks_are_rejected() {
        assert!(ObstacleTrack::new(vec![vec![0.0]], 0.0, 1.0).is_err());
        assert!(ObstacleTrack::new(vec![vec![0.0]], 1.0, -1.0).is_err());
        assert!(ObstacleTrack::new(vec![], 1.0, 1.0).is_err());
        assert!(ObstacleTrack::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0, 1.0).is_err());
    }
}
