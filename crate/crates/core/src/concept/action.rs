use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::direction::RelativeDirection;
use crate::error::{Error, Result};

/// Atomic action vocabulary, plus `Stop` for the stop candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionConcept {
    #[serde(rename = "go up")]
    GoUp,
    #[serde(rename = "go down")]
    GoDown,
    #[serde(rename = "go forward")]
    GoForward,
    #[serde(rename = "go back")]
    GoBack,
    #[serde(rename = "turn right")]
    TurnRight,
    #[serde(rename = "turn left")]
    TurnLeft,
    #[serde(rename = "stop")]
    Stop,
}

impl ActionConcept {
    pub const ALL: [ActionConcept; 7] = [
        ActionConcept::GoUp,
        ActionConcept::GoDown,
        ActionConcept::GoForward,
        ActionConcept::GoBack,
        ActionConcept::TurnRight,
        ActionConcept::TurnLeft,
        ActionConcept::Stop,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            ActionConcept::GoUp => "go up",
            ActionConcept::GoDown => "go down",
            ActionConcept::GoForward => "go forward",
            ActionConcept::GoBack => "go back",
            ActionConcept::TurnRight => "turn right",
            ActionConcept::TurnLeft => "turn left",
            ActionConcept::Stop => "stop",
        }
    }

    pub fn index(self) -> usize {
        ActionConcept::ALL.iter().position(|a| *a == self).unwrap()
    }

    pub fn from_phrase(s: &str) -> Option<Self> {
        ActionConcept::ALL.into_iter().find(|a| a.phrase() == s)
    }
}

impl fmt::Display for ActionConcept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

/// Differences this close to a table boundary are snapped onto it, so that
/// headings built from the same constants classify identically after
/// subtraction round-off.
pub const BOUNDARY_SNAP: f64 = 1e-9;

fn snap_heading(d: f64) -> f64 {
    for k in -4i32..=4 {
        let b = f64::from(k) * FRAC_PI_2;
        if (d - b).abs() < BOUNDARY_SNAP {
            return b;
        }
    }
    d
}

/// Atomic action concept of a relative direction.
///
/// Elevation decides first (`> 0` up, `< 0` down); otherwise the heading
/// difference is read off the range table over `(−2π, 2π)`:
///
/// | dψ | action |
/// |---|---|
/// | (−2π, −3π/2] | turn right |
/// | (−3π/2, −π/2) | go back |
/// | [−π/2, 0) | turn left |
/// | 0 | go forward |
/// | (0, π/2] | turn right |
/// | (π/2, 3π/2) | go back |
/// | [3π/2, 2π) | turn left |
pub fn map_action_concept(r: RelativeDirection) -> Result<ActionConcept> {
    let RelativeDirection { d_heading, d_elevation } = r;
    if !d_heading.is_finite() || !d_elevation.is_finite() {
        return Err(Error::NonFinite(format!("relative direction {r:?}")));
    }
    let dth = if d_elevation.abs() < BOUNDARY_SNAP { 0.0 } else { d_elevation };
    let dpsi = snap_heading(d_heading);
    if !(dpsi > -TAU && dpsi < TAU) || !(-PI..=PI).contains(&dth) {
        return Err(Error::invalid(format!(
            "relative direction ({d_heading}, {d_elevation}) outside (-2pi, 2pi) x [-pi, pi]"
        )));
    }
    if dth > 0.0 {
        return Ok(ActionConcept::GoUp);
    }
    if dth < 0.0 {
        return Ok(ActionConcept::GoDown);
    }
    let three_half = 3.0 * FRAC_PI_2;
    let a = if dpsi <= -three_half {
        ActionConcept::TurnRight
    } else if dpsi < -FRAC_PI_2 {
        ActionConcept::GoBack
    } else if dpsi < 0.0 {
        ActionConcept::TurnLeft
    } else if dpsi == 0.0 {
        ActionConcept::GoForward
    } else if dpsi <= FRAC_PI_2 {
        ActionConcept::TurnRight
    } else if dpsi < three_half {
        ActionConcept::GoBack
    } else {
        ActionConcept::TurnLeft
    };
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::direction::{relative_direction, Direction};
    use std::f64::consts::FRAC_PI_4;

    fn map(dpsi: f64, dth: f64) -> ActionConcept {
        map_action_concept(RelativeDirection::new(dpsi, dth)).unwrap()
    }

    #[test]
    fn table_rows() {
        assert_eq!(map(FRAC_PI_4, 0.0), ActionConcept::TurnRight);
        assert_eq!(map(PI, 0.3), ActionConcept::GoUp);
        assert_eq!(map(0.0, 0.0), ActionConcept::GoForward);
        assert_eq!(map(-7.0 * FRAC_PI_4, 0.0), ActionConcept::TurnRight);
        assert_eq!(map(-FRAC_PI_2, 0.0), ActionConcept::TurnLeft);
        assert_eq!(map(FRAC_PI_2, 0.0), ActionConcept::TurnRight);
        assert_eq!(map(PI, 0.0), ActionConcept::GoBack);
        assert_eq!(map(-PI, 0.0), ActionConcept::GoBack);
        assert_eq!(map(3.0 * FRAC_PI_2, 0.0), ActionConcept::TurnLeft);
        assert_eq!(map(-3.0 * FRAC_PI_2, 0.0), ActionConcept::TurnRight);
        assert_eq!(map(0.0, -0.1), ActionConcept::GoDown);
    }

    #[test]
    fn out_of_domain_is_error() {
        assert!(map_action_concept(RelativeDirection::new(TAU, 0.0)).is_err());
        assert!(map_action_concept(RelativeDirection::new(0.0, 4.0)).is_err());
        assert!(map_action_concept(RelativeDirection::new(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn compass_headings_classify_like_integer_offsets() {
        // headings k·π/4 — the subtraction must agree with the exact integer offset
        for k in 0..8 {
            for j in 0..8 {
                let a = Direction::horizontal(f64::from(k) * FRAC_PI_4);
                let p = Direction::horizontal(f64::from(j) * FRAC_PI_4);
                let got = map_action_concept(relative_direction(a, p)).unwrap();
                let exact = map(f64::from(k - j) * FRAC_PI_4, 0.0);
                assert_eq!(got, exact, "k={k} j={j}");
            }
        }
    }

    #[test]
    fn phrases_round_trip() {
        for a in ActionConcept::ALL {
            assert_eq!(ActionConcept::from_phrase(a.phrase()), Some(a));
            assert_eq!(ActionConcept::ALL[a.index()], a);
        }
    }
}
