//! SISO bilinear systems in discrete and continuous time.
//!
//! Discrete dynamics:
//!
//! ```text
//! x_{k+1} = A x_k + N x_k u_k + B u_k + drift
//! y_k     = C x_k + D u_k + y_offset
//! ```
//!
//! The continuous type carries the same fields and only exists as the image of
//! [`undiscretize`] and as a serialization target.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::markov::{markov_len, MarkovSequence};

/// States whose magnitude exceeds this are treated as a diverged simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

fn check_finite_matrix(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("operator {name}")))
    }
}

fn check_vector(name: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!(
            "{name} has length {}, state dimension is {n}",
            v.len()
        )));
    }
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("operator {name}")))
    }
}

macro_rules! bilinear_system {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            a: DMatrix<f64>,
            n: DMatrix<f64>,
            b: DVector<f64>,
            c: DVector<f64>,
            d: f64,
            drift: Option<DVector<f64>>,
            y_offset: f64,
            x0: DVector<f64>,
        }

        impl $name {
            /// Builds a system with `D = 0`, zero initial state, no drift and no
            /// output offset. `c` holds the entries of the output row.
            pub fn new(
                a: DMatrix<f64>,
                n: DMatrix<f64>,
                b: DVector<f64>,
                c: DVector<f64>,
            ) -> Result<Self> {
                let dim = a.nrows();
                if dim == 0 {
                    return Err(Error::Dimension("state dimension must be positive".into()));
                }
                for (name, m) in [("A", &a), ("N", &n)] {
                    if m.shape() != (dim, dim) {
                        return Err(Error::Dimension(format!(
                            "{name} is {}x{}, expected {dim}x{dim}",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                    check_finite_matrix(name, m)?;
                }
                check_vector("B", &b, dim)?;
                check_vector("C", &c, dim)?;
                Ok($name {
                    a,
                    n,
                    b,
                    c,
                    d: 0.0,
                    drift: None,
                    y_offset: 0.0,
                    x0: DVector::zeros(dim),
                })
            }

            pub fn with_d(mut self, d: f64) -> Result<Self> {
                if !d.is_finite() {
                    return Err(Error::NonFinite("operator D".into()));
                }
                self.d = d;
                Ok(self)
            }

            pub fn with_drift(mut self, drift: Option<DVector<f64>>) -> Result<Self> {
                if let Some(v) = &drift {
                    check_vector("drift", v, self.dim())?;
                }
                self.drift = drift;
                Ok(self)
            }

            pub fn with_y_offset(mut self, y_offset: f64) -> Result<Self> {
                if !y_offset.is_finite() {
                    return Err(Error::NonFinite("output offset".into()));
                }
                self.y_offset = y_offset;
                Ok(self)
            }

            pub fn with_x0(mut self, x0: DVector<f64>) -> Result<Self> {
                check_vector("x0", &x0, self.dim())?;
                self.x0 = x0;
                Ok(self)
            }

            /// State dimension.
            pub fn dim(&self) -> usize {
                self.a.nrows()
            }

            pub fn a(&self) -> &DMatrix<f64> {
                &self.a
            }

            pub fn n(&self) -> &DMatrix<f64> {
                &self.n
            }

            pub fn b(&self) -> &DVector<f64> {
                &self.b
            }

            /// Output row, stored as a column vector.
            pub fn c(&self) -> &DVector<f64> {
                &self.c
            }

            pub fn d(&self) -> f64 {
                self.d
            }

            pub fn drift(&self) -> Option<&DVector<f64>> {
                self.drift.as_ref()
            }

            pub fn y_offset(&self) -> f64 {
                self.y_offset
            }

            pub fn x0(&self) -> &DVector<f64> {
                &self.x0
            }

            /// True when neither a drift nor an output offset is present.
            pub fn is_homogeneous(&self) -> bool {
                self.drift.is_none() && self.y_offset == 0.0
            }
        }
    };
}

bilinear_system!(
    /// Discrete-time SISO bilinear system.
    DiscreteBilinearSystem
);

bilinear_system!(
    /// Continuous-time SISO bilinear system `ẋ = 𝒜x + 𝒩xu + ℬu + drift`.
    ContinuousBilinearSystem
);

impl DiscreteBilinearSystem {
    /// Simulates from `x0`. Entry `k` of the result is the output after the
    /// `k`-th state update, `C x_{k+1} + D u_k + y_offset`, so the first output
    /// already responds to `u[0]`.
    pub fn simulate(&self, u: &[f64]) -> Result<Vec<f64>> {
        if let Some(pos) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input sample {pos}")));
        }
        let mut x = self.x0.clone();
        let mut next = DVector::zeros(self.dim());
        let mut y = Vec::with_capacity(u.len());
        for (k, &uk) in u.iter().enumerate() {
            self.step_into(&x, uk, &mut next);
            std::mem::swap(&mut x, &mut next);
            if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::Divergence { step: k });
            }
            y.push(self.c.dot(&x) + self.d * uk + self.y_offset);
        }
        Ok(y)
    }

    fn step_into(&self, x: &DVector<f64>, u: f64, out: &mut DVector<f64>) {
        // out = A x + u (N x + B) + drift
        out.gemv(1.0, &self.a, x, 0.0);
        out.gemv(u, &self.n, x, 1.0);
        out.axpy(u, &self.b, 1.0);
        if let Some(drift) = &self.drift {
            *out += drift;
        }
    }

    /// `[R_1 … R_q]` with `R_1 = B` and `R_j = [A R_{j-1}, N R_{j-1}]`.
    pub fn reachability(&self, q: usize) -> DMatrix<f64> {
        assert!(q >= 1, "reachability depth must be at least 1");
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, markov_len(q));
        out.set_column(0, &self.b);
        for j in 2..=q {
            let half = 1usize << (j - 2);
            let prev_start = half - 1;
            let start = 2 * half - 1;
            let prev = out.columns(prev_start, half).into_owned();
            out.columns_mut(start, half).copy_from(&(&self.a * &prev));
            out.columns_mut(start + half, half)
                .copy_from(&(&self.n * &prev));
        }
        out
    }

    /// Rows `O_1 … O_p` stacked, `O_1 = C`, `O_j = [O_{j-1} A; O_{j-1} N]`.
    pub fn observability(&self, p: usize) -> DMatrix<f64> {
        assert!(p >= 1, "observability depth must be at least 1");
        let dim = self.dim();
        let mut out = DMatrix::zeros(markov_len(p), dim);
        out.set_row(0, &self.c.transpose());
        for j in 2..=p {
            let half = 1usize << (j - 2);
            let prev_start = half - 1;
            let start = 2 * half - 1;
            let prev = out.rows(prev_start, half).into_owned();
            out.rows_mut(start, half).copy_from(&(&prev * &self.a));
            out.rows_mut(start + half, half)
                .copy_from(&(&prev * &self.n));
        }
        out
    }

    /// Exact Markov parameters `w_j = C R_j`, `j = 1..=depth`.
    pub fn markov_oracle(&self, depth: usize) -> MarkovSequence {
        assert!(depth >= 1, "Markov depth must be at least 1");
        let flat = (self.reachability(depth).transpose() * &self.c)
            .iter()
            .copied()
            .collect();
        MarkovSequence::from_flat(flat).expect("reachability has 2^L - 1 columns")
    }

    /// State-space change of basis `x = T z`. The input/output map is preserved.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Result<Self> {
        let dim = self.dim();
        if t.shape() != (dim, dim) {
            return Err(Error::Dimension(format!(
                "transform is {}x{}, expected {dim}x{dim}",
                t.nrows(),
                t.ncols()
            )));
        }
        let lu = t.clone().lu();
        let t_inv = lu.try_inverse().ok_or(Error::Singular {
            what: "similarity transform",
            condition: f64::INFINITY,
        })?;
        let sys = DiscreteBilinearSystem::new(
            &t_inv * &self.a * t,
            &t_inv * &self.n * t,
            &t_inv * &self.b,
            t.transpose() * &self.c,
        )?
        .with_d(self.d)?
        .with_drift(self.drift.as_ref().map(|v| &t_inv * v))?
        .with_y_offset(self.y_offset)?
        .with_x0(&t_inv * &self.x0)?;
        Ok(sys)
    }
}

/// Inverse of `m` after checking its conditioning with an SVD.
fn checked_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(min > m.nrows() as f64 * f64::EPSILON * max) {
        return Err(Error::Singular { what, condition });
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Singular { what, condition })
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("sampling time must be positive, got {dt}")))
    }
}

/// Backward-Euler map: `A = (I - dt𝒜)^{-1}`, `N = dt A 𝒩`, `B = dt A ℬ`,
/// `C = 𝒞`. A drift is mapped like `B`.
pub fn discretize_backward_euler(
    csys: &ContinuousBilinearSystem,
    dt: f64,
) -> Result<DiscreteBilinearSystem> {
    check_dt(dt)?;
    let dim = csys.dim();
    let m = DMatrix::identity(dim, dim) - csys.a() * dt;
    let a = checked_inverse(&m, "I - dt A")?;
    let scaled = &a * dt;
    DiscreteBilinearSystem::new(
        a.clone(),
        &scaled * csys.n(),
        &scaled * csys.b(),
        csys.c().clone(),
    )?
    .with_d(csys.d())?
    .with_drift(csys.drift().map(|v| &scaled * v))?
    .with_y_offset(csys.y_offset())?
    .with_x0(csys.x0().clone())
}

/// Algebraic inverse of [`discretize_backward_euler`].
pub fn undiscretize(dsys: &DiscreteBilinearSystem, dt: f64) -> Result<ContinuousBilinearSystem> {
    check_dt(dt)?;
    let dim = dsys.dim();
    let a_inv = checked_inverse(dsys.a(), "A")?;
    let a = (DMatrix::identity(dim, dim) - &a_inv) / dt;
    let scaled = a_inv / dt;
    ContinuousBilinearSystem::new(
        a,
        &scaled * dsys.n(),
        &scaled * dsys.b(),
        dsys.c().clone(),
    )?
    .with_d(dsys.d())?
    .with_drift(dsys.drift().map(|v| &scaled * v))?
    .with_y_offset(dsys.y_offset())?
    .with_x0(dsys.x0().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::toy_system;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn zero_input_gives_zero_output() {
        let y = toy_system().simulate(&[0.0; 20]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_output_is_cb() {
        assert_eq!(toy_system().simulate(&[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn drift_and_offset_enter_every_step() {
        let sys = DiscreteBilinearSystem::new(
            dmatrix![0.5],
            dmatrix![0.0],
            dvector![1.0],
            dvector![2.0],
        )
        .unwrap()
        .with_drift(Some(dvector![1.0]))
        .unwrap()
        .with_y_offset(3.0)
        .unwrap();
        // x1 = 1, x2 = 1.5
        assert_eq!(sys.simulate(&[0.0, 0.0]).unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn divergence_reports_step() {
        let sys = DiscreteBilinearSystem::new(
            dmatrix![10.0],
            dmatrix![0.0],
            dvector![1.0],
            dvector![1.0],
        )
        .unwrap();
        match sys.simulate(&[1.0; 40]) {
            Err(Error::Divergence { step }) => assert_eq!(step, 12),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            DiscreteBilinearSystem::new(
                dmatrix![1.0, 0.0; 0.0, 1.0],
                dmatrix![1.0],
                dvector![1.0, 0.0],
                dvector![1.0, 0.0],
            ),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            DiscreteBilinearSystem::new(
                dmatrix![f64::NAN],
                dmatrix![1.0],
                dvector![1.0],
                dvector![1.0],
            ),
            Err(Error::NonFinite(_))
        ));
        assert!(toy_system().with_x0(dvector![1.0]).is_err());
    }

    #[test]
    fn toy_reachability_depth_two() {
        let r = toy_system().reachability(2);
        let expected = dmatrix![1.0, 0.9, 0.1; 0.0, 0.0, 0.3];
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
        assert_eq!(toy_system().reachability(1), dmatrix![1.0; 0.0]);
    }

    #[test]
    fn toy_observability_depth_two() {
        let o = toy_system().observability(2);
        let expected = dmatrix![1.0, 1.0; 0.9, 0.8; 0.4, 0.6];
        assert_abs_diff_eq!(o, expected, epsilon = 1e-15);
        assert_eq!(o.rank(1e-12), 2);
        assert_eq!(toy_system().observability(1), dmatrix![1.0, 1.0]);
    }

    #[test]
    fn toy_markov_values() {
        let w = toy_system().markov_oracle(4);
        let golden = [
            1.0, 0.9, 0.4, 0.81, 0.33, 0.36, 0.22, 0.729, 0.273, 0.297, 0.183, 0.324, 0.18,
            0.198, 0.118,
        ];
        for (got, want) in w.flat().iter().zip(golden) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_eq!(toy_system().markov_oracle(1).flat(), &[1.0]);
    }

    #[test]
    fn scalar_backward_euler() {
        let csys = ContinuousBilinearSystem::new(
            dmatrix![-1.0],
            dmatrix![1.0],
            dvector![1.0],
            dvector![1.0],
        )
        .unwrap();
        let dsys = discretize_backward_euler(&csys, 0.1).unwrap();
        assert_abs_diff_eq!(dsys.a()[0], 1.0 / 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(dsys.n()[0], 0.1 / 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(dsys.b()[0], 0.1 / 1.1, epsilon = 1e-15);
    }

    #[test]
    fn zero_continuous_drift_matrix_is_identity_case() {
        let m = dmatrix![0.2, -0.4; 1.0, 0.3];
        let b = dvector![1.5, -2.0];
        let csys = ContinuousBilinearSystem::new(
            DMatrix::zeros(2, 2),
            m.clone(),
            b.clone(),
            dvector![1.0, 1.0],
        )
        .unwrap();
        let dt = 0.25;
        let dsys = discretize_backward_euler(&csys, dt).unwrap();
        assert_eq!(dsys.a(), &DMatrix::identity(2, 2));
        assert_abs_diff_eq!(dsys.n(), &(&m * dt), epsilon = 1e-15);
        assert_abs_diff_eq!(dsys.b(), &(&b * dt), epsilon = 1e-15);

        let back = undiscretize(&dsys, dt).unwrap();
        assert_abs_diff_eq!(back.a(), &DMatrix::zeros(2, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(back.n(), &m, epsilon = 1e-15);
        assert_abs_diff_eq!(back.b(), &b, epsilon = 1e-15);
    }

    #[test]
    fn singular_maps_are_rejected() {
        let csys = ContinuousBilinearSystem::new(
            dmatrix![10.0],
            dmatrix![0.0],
            dvector![1.0],
            dvector![1.0],
        )
        .unwrap();
        assert!(matches!(
            discretize_backward_euler(&csys, 0.1),
            Err(Error::Singular { .. })
        ));
        let dsys = DiscreteBilinearSystem::new(
            dmatrix![1.0, 0.0; 0.0, 0.0],
            dmatrix![0.0, 0.0; 0.0, 0.0],
            dvector![1.0, 1.0],
            dvector![1.0, 1.0],
        )
        .unwrap();
        assert!(matches!(undiscretize(&dsys, 0.1), Err(Error::Singular { .. })));
        assert!(matches!(undiscretize(&dsys, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn drift_maps_like_b() {
        let csys = ContinuousBilinearSystem::new(
            dmatrix![-1.0, 0.5; 0.0, -2.0],
            dmatrix![0.1, 0.0; 0.2, 0.3],
            dvector![1.0, 2.0],
            dvector![1.0, -1.0],
        )
        .unwrap()
        .with_drift(Some(dvector![1.0, 2.0]))
        .unwrap();
        let dsys = discretize_backward_euler(&csys, 0.1).unwrap();
        assert_abs_diff_eq!(dsys.drift().unwrap(), dsys.b(), epsilon = 1e-15);
    }
}
