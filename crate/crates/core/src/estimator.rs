//! Online estimation of per-vehicle acceleration bounds and forward occupancy
//! prediction by exact polytope reachability.
//!
//! Bounds are the running min/max of every acceleration observed so far, so
//! the estimated input set only ever grows and stays inside the worst-case
//! friction interval whenever the observations do. Reachable sets live in
//! (position, velocity) space and are clipped to admissible speeds each step;
//! occupancies are the position projection inflated by the vehicle footprint.

use crate::models::{SvState, VehicleGeometry};
use crate::polytope::Polytope2;
use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("information set must be nonempty")]
    EmptyInformationSet,
    #[error("observed acceleration must be finite, got {0}")]
    NonFiniteObservation(f64),
    #[error("bounds require a_min <= a_max, got [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("friction parameters must be positive")]
    InvalidFriction,
}

/// Estimated acceleration interval of one surrounding vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelBounds {
    pub a_min: f64,
    pub a_max: f64,
}

impl AccelBounds {
    pub fn new(a_min: f64, a_max: f64) -> Result<Self, EstimatorError> {
        if !a_min.is_finite() || !a_max.is_finite() || a_min > a_max {
            return Err(EstimatorError::InvalidBounds(a_min, a_max));
        }
        Ok(Self { a_min, a_max })
    }

    pub fn singleton(a: f64) -> Self {
        Self { a_min: a, a_max: a }
    }

    /// Recursive update: the interval can only widen.
    pub fn update(self, observed: f64) -> Result<Self, EstimatorError> {
        if !observed.is_finite() {
            return Err(EstimatorError::NonFiniteObservation(observed));
        }
        Ok(Self {
            a_min: self.a_min.min(observed),
            a_max: self.a_max.max(observed),
        })
    }

    pub fn contains(&self, a: f64, tol: f64) -> bool {
        a >= self.a_min - tol && a <= self.a_max + tol
    }

    pub fn contains_interval(&self, other: &AccelBounds) -> bool {
        self.a_min <= other.a_min && self.a_max >= other.a_max
    }

    pub fn width(&self) -> f64 {
        self.a_max - self.a_min
    }
}

/// Multiset of observed accelerations. Kept in full only so studies can
/// control the initial sample count; the running bounds never rescan it.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationSet {
    samples: Vec<f64>,
}

impl InformationSet {
    pub fn new(samples: Vec<f64>) -> Result<Self, EstimatorError> {
        if samples.is_empty() {
            return Err(EstimatorError::EmptyInformationSet);
        }
        if let Some(&bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(EstimatorError::NonFiniteObservation(bad));
        }
        Ok(Self { samples })
    }

    pub fn push(&mut self, observed: f64) -> Result<(), EstimatorError> {
        if !observed.is_finite() {
            return Err(EstimatorError::NonFiniteObservation(observed));
        }
        self.samples.push(observed);
        Ok(())
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Initial bounds: min and max of the information set.
pub fn init_bounds(info: &InformationSet) -> AccelBounds {
    let a_min = info.samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let a_max = info
        .samples
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    AccelBounds { a_min, a_max }
}

/// Friction-limited worst case covering every admissible control action.
pub fn worst_case_bounds(mu: f64, g: f64) -> Result<AccelBounds, EstimatorError> {
    if mu <= 0.0 || g <= 0.0 {
        return Err(EstimatorError::InvalidFriction);
    }
    Ok(AccelBounds {
        a_min: -mu * g,
        a_max: mu * g,
    })
}

/// Forward reachable sets in (position, velocity) space.
///
/// Each step maps the set through the double integrator, sweeps it by the
/// input segment, and clips velocities to `[0, v_adm]`. The input interval is
/// first intersected with the accelerations a speed-saturating vehicle can
/// actually realize from the set's velocity range, so the recursion never
/// empties at the speed limits and still covers a simulator that saturates
/// acceleration to stay admissible. Away from the limits this is exactly the
/// plain interval. Position is not clipped below zero: the scenarios run far
/// from the origin and the velocity clip is what bounds growth.
pub fn predict_reachable(
    x: &SvState,
    bounds: &AccelBounds,
    n: usize,
    v_adm: f64,
    t: f64,
) -> Vec<Polytope2> {
    assert!(n >= 1, "need at least one prediction step");
    assert!(t > 0.0 && v_adm > 0.0);
    let a_mat = Matrix2::new(1.0, t, 0.0, 1.0);
    let b = Vector2::new(0.5 * t * t, t);
    let saturate = |a: f64, v: f64| a.clamp(-v / t, (v_adm - v) / t);
    let mut current =
        Polytope2::from_vertices(&[Vector2::new(x.p_x, x.v_x)]).expect("finite state");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (v_lo, v_hi) = current.project_axis(1);
        let eff_lo = saturate(bounds.a_min, v_lo).min(saturate(bounds.a_min, v_hi));
        let eff_hi = saturate(bounds.a_max, v_lo)
            .max(saturate(bounds.a_max, v_hi))
            .max(eff_lo);
        let mapped = current.affine_image(&a_mat);
        let swept = if eff_hi - eff_lo > 0.0 {
            let seg = Polytope2::from_vertices(&[b * eff_lo, b * eff_hi]).expect("finite segment");
            mapped.minkowski_sum(&seg)
        } else {
            mapped.translate(&(b * eff_lo))
        };
        let clipped = swept
            .intersect_halfspace(&Vector2::new(0.0, 1.0), v_adm)
            .expect("unit normal")
            .and_then(|p| {
                p.intersect_halfspace(&Vector2::new(0.0, -1.0), 0.0)
                    .expect("unit normal")
            })
            .expect("saturated step set meets the admissible speed window");
        out.push(clipped.clone());
        current = clipped;
    }
    out
}

/// Position-space occupancies: the longitudinal extent of each reachable set
/// inflated by half the vehicle footprint, laterally anchored at the lane
/// center the vehicle drives in.
pub fn predict_occupancy(
    reachable: &[Polytope2],
    geom: &VehicleGeometry,
    lateral_center: f64,
) -> Vec<Polytope2> {
    assert!(!reachable.is_empty());
    reachable
        .iter()
        .map(|set| {
            let (lo, hi) = set.project_axis(0);
            Polytope2::from_box(
                &Vector2::new(0.5 * (lo + hi), lateral_center),
                &Vector2::new(0.5 * (hi - lo) + geom.half_length(), geom.half_width()),
            )
            .expect("nonnegative half-widths")
        })
        .collect()
}

/// Reachable sets plus their occupancies for one vehicle over a horizon.
#[derive(Debug, Clone)]
pub struct OccupancyPrediction {
    pub reachable: Vec<Polytope2>,
    pub occupancy: Vec<Polytope2>,
}

impl OccupancyPrediction {
    pub fn predict(
        x: &SvState,
        bounds: &AccelBounds,
        n: usize,
        v_adm: f64,
        t: f64,
        geom: &VehicleGeometry,
        lateral_center: f64,
    ) -> Self {
        let reachable = predict_reachable(x, bounds, n, v_adm, t);
        let occupancy = predict_occupancy(&reachable, geom, lateral_center);
        Self {
            reachable,
            occupancy,
        }
    }
}
