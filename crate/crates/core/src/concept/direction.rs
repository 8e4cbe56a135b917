use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute viewing direction: heading in `[0, 2π)`, elevation in `[−π/2, π/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    heading: f64,
    elevation: f64,
}

impl Direction {
    /// Normalises the heading modulo 2π; rejects elevations outside `[−π/2, π/2]`.
    pub fn new(heading: f64, elevation: f64) -> Result<Self> {
        if !heading.is_finite() || !elevation.is_finite() {
            return Err(Error::NonFinite(format!("direction ({heading}, {elevation})")));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&elevation) {
            return Err(Error::invalid(format!("elevation {elevation} outside [-pi/2, pi/2]")));
        }
        let mut h = heading.rem_euclid(TAU);
        if h >= TAU {
            h = 0.0;
        }
        Ok(Direction { heading: h, elevation })
    }

    pub fn horizontal(heading: f64) -> Self {
        Direction::new(heading, 0.0).expect("finite heading")
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }
}

/// Difference of two [`Direction`]s; heading is deliberately not wrapped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeDirection {
    pub d_heading: f64,
    pub d_elevation: f64,
}

impl RelativeDirection {
    pub fn new(d_heading: f64, d_elevation: f64) -> Self {
        RelativeDirection { d_heading, d_elevation }
    }

    pub fn in_domain(&self) -> bool {
        self.d_heading > -TAU && self.d_heading < TAU && (-PI..=PI).contains(&self.d_elevation)
    }
}

/// `(ψ − ψ_prev, θ − θ_prev)`.
pub fn relative_direction(a: Direction, prev: Direction) -> RelativeDirection {
    RelativeDirection {
        d_heading: a.heading - prev.heading,
        d_elevation: a.elevation - prev.elevation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heading_is_normalised() {
        assert!((Direction::new(-FRAC_PI_2, 0.0).unwrap().heading() - 3.0 * FRAC_PI_2).abs() < 1e-12);
        assert!((Direction::new(TAU + 1.0, 0.0).unwrap().heading() - 1.0).abs() < 1e-12);
        assert_eq!(Direction::new(TAU, 0.0).unwrap().heading(), 0.0);
        assert!(Direction::new(0.0, 2.0).is_err());
    }

    #[test]
    fn relative_cases() {
        let r = relative_direction(Direction::horizontal(FRAC_PI_2), Direction::horizontal(0.0));
        assert_eq!(r, RelativeDirection::new(FRAC_PI_2, 0.0));
        let r = relative_direction(Direction::horizontal(0.0), Direction::horizontal(3.0 * FRAC_PI_2));
        assert_eq!(r, RelativeDirection::new(-3.0 * FRAC_PI_2, 0.0));
        let d = Direction::new(1.0, 0.3).unwrap();
        assert_eq!(relative_direction(d, d), RelativeDirection::new(0.0, 0.0));
    }
}
