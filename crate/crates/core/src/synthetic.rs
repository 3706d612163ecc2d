//! Reference systems: the two-state toy model and seeded random stable systems.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::system::{ContinuousBilinearSystem, DiscreteBilinearSystem};

/// Two-state bilinear system with
/// `A = diag(0.9, 0.8)`, `N = [0.1 0.2; 0.3 0.4]`, `B = [1; 0]`, `C = [1 1]`.
pub fn toy_system() -> DiscreteBilinearSystem {
    DiscreteBilinearSystem::new(
        dmatrix![0.9, 0.0; 0.0, 0.8],
        dmatrix![0.1, 0.2; 0.3, 0.4],
        dvector![1.0, 0.0],
        dvector![1.0, 1.0],
    )
    .expect("toy operators are consistent")
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

fn with_spectral_norm(m: DMatrix<f64>, norm: f64) -> DMatrix<f64> {
    let current = m.singular_values().max();
    if current > 0.0 {
        m * (norm / current)
    } else {
        m
    }
}

/// Shape parameters for [`random_stable_discrete`].
#[derive(Debug, Clone, Copy)]
pub struct RandomSystemSpec {
    /// Spectral norm of `A`.
    pub a_norm: f64,
    /// Spectral norm of `N`.
    pub n_norm: f64,
}

impl Default for RandomSystemSpec {
    fn default() -> Self {
        RandomSystemSpec {
            a_norm: 0.8,
            n_norm: 0.3,
        }
    }
}

/// Random discrete system with `‖A‖₂ + ‖N‖₂ < 1` under the default spec, so the
/// state stays bounded for inputs of magnitude up to about `(1 - ‖A‖)/‖N‖`.
/// `B` and `C` are scaled so that `C B` is of order one.
pub fn random_stable_discrete<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    spec: RandomSystemSpec,
) -> DiscreteBilinearSystem {
    let a = with_spectral_norm(gaussian_matrix(rng, dim, dim), spec.a_norm);
    let n = with_spectral_norm(gaussian_matrix(rng, dim, dim), spec.n_norm);
    let scale = (dim as f64).powf(-0.25);
    let b = gaussian_vector(rng, dim) * scale;
    let c = gaussian_vector(rng, dim) * scale;
    DiscreteBilinearSystem::new(a, n, b, c).expect("random operators are consistent")
}

/// Random continuous system whose `𝒜` has a negative definite symmetric part.
pub fn random_stable_continuous<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
) -> ContinuousBilinearSystem {
    let m = gaussian_matrix(rng, dim, dim);
    let s = gaussian_matrix(rng, dim, dim);
    let a = -(&m * m.transpose()) / dim as f64 - DMatrix::identity(dim, dim) * 0.5
        + (&s - s.transpose()) * 0.5;
    let n = gaussian_matrix(rng, dim, dim) * 0.5;
    let b = gaussian_vector(rng, dim);
    let c = gaussian_vector(rng, dim);
    ContinuousBilinearSystem::new(a, n, b, c).expect("random operators are consistent")
}
