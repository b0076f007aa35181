//! Hypersphere primitives: normalization, inner products, random directions,
//! and the class posterior induced by von Mises-Fisher class-conditionals.
//!
//! Everything here is a pure function of its inputs; RNGs are passed
//! explicitly so callers own all sources of randomness.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{HypoError, Result};

/// Norm threshold below which normalization is rejected rather than clamped.
pub const EPS_NORM: f64 = 1e-12;

/// Absolute tolerance on the unit-norm invariant of [`UnitVector`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// An L2-normalized embedding on the unit sphere S^{d-1}, d >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    coords: Array1<f64>,
}

impl UnitVector {
    /// Wraps a vector that is already unit norm (within [`UNIT_NORM_TOL`]).
    pub fn new(coords: Array1<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(HypoError::DimensionMismatch(format!(
                "unit vectors need d >= 2, got d = {}",
                coords.len()
            )));
        }
        let norm = l2_norm(&coords);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(HypoError::InvalidConfig(format!(
                "vector norm {norm} is not within {UNIT_NORM_TOL:.0e} of 1"
            )));
        }
        Ok(UnitVector { coords })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(Array1::from(coords.to_vec()))
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &Array1<f64> {
        &self.coords
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.coords.dot(&other.coords)
    }

    /// Inner product against an arbitrary direction.
    pub fn dot_raw(&self, other: &Array1<f64>) -> f64 {
        self.coords.dot(other)
    }
}

/// A pre-normalization encoder output h(x). Normalization is only permitted
/// while the norm stays above [`EPS_NORM`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawVector {
    pub coords: Array1<f64>,
}

impl RawVector {
    pub fn new(coords: Array1<f64>) -> Self {
        RawVector { coords }
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        RawVector {
            coords: Array1::from(coords.to_vec()),
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.coords)
    }
}

pub(crate) fn l2_norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Projects a raw vector onto the unit sphere, preserving its direction.
///
/// Inputs with norm <= [`EPS_NORM`] are rejected: a near-zero encoder output
/// means the representation has collapsed and must surface as an error.
pub fn normalize(v: &RawVector) -> Result<UnitVector> {
    let norm = v.norm();
    if norm <= EPS_NORM || !norm.is_finite() {
        return Err(HypoError::degenerate(norm, EPS_NORM));
    }
    Ok(UnitVector {
        coords: &v.coords / norm,
    })
}

/// Class posterior p(y = c | z) under von Mises-Fisher class-conditionals
/// with shared concentration 1/tau: a temperature softmax over prototype
/// similarities. The vMF normalizer cancels between numerator and
/// denominator, so the posterior is exact without ever computing it.
///
/// Computed with max-subtraction so low temperatures stay stable.
pub fn vmf_posterior(z: &UnitVector, prototypes: &[UnitVector], tau: f64) -> Vec<f64> {
    let log_p = vmf_log_posterior(z, prototypes, tau);
    log_p.iter().map(|lp| lp.exp()).collect()
}

/// Log of [`vmf_posterior`]; preferred inside losses to avoid re-exponentiating.
pub fn vmf_log_posterior(z: &UnitVector, prototypes: &[UnitVector], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    assert!(!prototypes.is_empty(), "need at least one prototype");
    let scores: Vec<f64> = prototypes.iter().map(|mu| z.dot(mu) / tau).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|s| s - log_norm).collect()
}

/// Unnormalized vMF log-density log p(z | mu, kappa) + log Z_d(kappa).
///
/// The additive normalizer log Z_d(kappa) involves Bessel functions and is
/// deliberately not computed; it cancels everywhere this crate needs it.
pub fn vmf_log_density_unnormalized(z: &UnitVector, mu: &UnitVector, kappa: f64) -> f64 {
    assert!(kappa >= 0.0, "concentration must be nonnegative");
    kappa * z.dot(mu)
}

/// Uniform random direction on S^{d-1}: a standard Gaussian draw, normalized.
pub fn random_unit_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> UnitVector {
    assert!(d >= 2, "spheres below S^1 are out of scope");
    loop {
        let coords: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.sample(StandardNormal)));
        // Resampling on a degenerate draw keeps the output exactly uniform.
        if let Ok(u) = normalize(&RawVector::new(coords)) {
            return u;
        }
    }
}
