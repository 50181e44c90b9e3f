//! Parameter vectors and the compact box they are kept in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned compact box `[lower, upper]` in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidBox(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() {
            return Err(Error::InvalidBox("box has dimension zero".into()));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidBox(format!("bound {i} is not finite")));
            }
            if lo >= hi {
                return Err(Error::InvalidBox(format!(
                    "coordinate {i}: lower {lo} is not below upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
    }

    /// Clamp `theta` coordinate-wise into the box. Returns true if any
    /// coordinate moved.
    pub fn clamp_in_place(&self, theta: &mut [f64]) -> bool {
        let mut hit = false;
        for (t, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = t.clamp(*lo, *hi);
            if c != *t {
                hit = true;
                *t = c;
            }
        }
        hit
    }
}

/// A parameter vector together with the box it is projected into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub theta: Vec<f64>,
    pub bounds: ParamBox,
}

impl ParameterPoint {
    pub fn new(theta: Vec<f64>, bounds: ParamBox) -> Result<Self> {
        if theta.len() != bounds.dim() {
            return Err(Error::Dimension {
                context: "parameter point",
                expected: bounds.dim(),
                actual: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("parameter point"));
        }
        Ok(Self { theta, bounds })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_inside(&self) -> bool {
        self.bounds.contains(&self.theta)
    }
}

/// Coordinate-wise clamp of `p.theta` into `p.bounds`. Idempotent.
pub fn project_to_box(p: &ParameterPoint) -> ParameterPoint {
    let mut out = p.clone();
    out.bounds.clamp_in_place(&mut out.theta);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(theta: &[f64], lo: &[f64], hi: &[f64]) -> ParameterPoint {
        ParameterPoint::new(theta.to_vec(), ParamBox::new(lo.to_vec(), hi.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn interior_point_is_fixed() {
        let p = point(&[0.5], &[0.0], &[1.0]);
        assert_eq!(project_to_box(&p).theta, vec![0.5]);
    }

    #[test]
    fn clamps_to_upper_face() {
        let p = point(&[1.7], &[0.0], &[1.0]);
        assert_eq!(project_to_box(&p).theta, vec![1.0]);
    }

    #[test]
    fn clamps_per_coordinate() {
        let p = point(&[-2.0, 0.3], &[-1.0, -1.0], &[1.0, 1.0]);
        assert_eq!(project_to_box(&p).theta, vec![-1.0, 0.3]);
    }

    #[test]
    fn rejects_inverted_or_empty_box() {
        assert!(ParamBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(ParamBox::new(vec![2.0], vec![1.0]).is_err());
        assert!(ParamBox::new(vec![], vec![]).is_err());
        assert!(ParamBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn rejects_wrong_dimension() {
        let b = ParamBox::new(vec![0.0], vec![1.0]).unwrap();
        assert!(ParameterPoint::new(vec![0.1, 0.2], b).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_lands_inside(
            theta in prop::collection::vec(-10.0f64..10.0, 3),
            lo in prop::collection::vec(-3.0f64..0.0, 3),
            width in prop::collection::vec(0.01f64..4.0, 3),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
            let p = point(&theta, &lo, &hi);
            let once = project_to_box(&p);
            let twice = project_to_box(&once);
            prop_assert!(once.is_inside());
            prop_assert_eq!(once, twice);
        }
    }
}
