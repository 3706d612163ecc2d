//! Bilinear Hankel matrix and SVD-based realization.
//!
//! Rows of the Hankel matrix follow the observability stacking
//! `O_j = [O_{j-1} A; O_{j-1} N]` and columns the reachability ordering
//! `R_j = [A R_{j-1}, N R_{j-1}]`, so `H = O_p R_q` holds exactly. Entry
//! `(ρ, γ)` is the Markov value of the concatenated word `ργ`; the shifted
//! matrices `S^A`, `S^N` hold the values of `ρAγ` and `ρNγ`.

use faer::Mat;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{markov_len, split_flat, Letter, MarkovSequence, Word};
use crate::system::DiscreteBilinearSystem;

/// Default relative singular value threshold for order selection.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

/// Code (leftmost letter = MSB) and length of the word labelling Hankel row `i`.
fn row_code(i: usize) -> (usize, usize) {
    let (block, offset) = split_flat(i);
    let len = block - 1;
    // The stacking appends letters on the right, so the most recent letter
    // selects the half: the offset's LSB is the leftmost letter.
    let mut code = 0;
    for k in 0..len {
        code = (code << 1) | ((offset >> k) & 1);
    }
    (code, len)
}

fn col_code(k: usize) -> (usize, usize) {
    let (block, offset) = split_flat(k);
    (offset, block - 1)
}

/// Word labelling Hankel row `i`.
pub fn row_word(i: usize) -> Word {
    let (code, len) = row_code(i);
    Word::from_code(code, len)
}

/// Word labelling Hankel column `k`.
pub fn col_word(k: usize) -> Word {
    Word::from_flat(k)
}

/// Flat Markov position of `row · middle · col`.
fn joined_flat(row: (usize, usize), middle: Option<Letter>, col: (usize, usize)) -> usize {
    let (mut code, mut len) = row;
    if let Some(letter) = middle {
        code = (code << 1) | usize::from(letter == Letter::N);
        len += 1;
    }
    code = (code << col.1) | col.0;
    len += col.1;
    markov_len(len) + code
}

fn fill(w: &MarkovSequence, p: usize, q: usize, middle: Option<Letter>) -> DMatrix<f64> {
    let flat = w.flat();
    DMatrix::from_fn(markov_len(p), markov_len(q), |i, k| {
        flat[joined_flat(row_code(i), middle, col_code(k))]
    })
}

fn check_levels(p: usize, q: usize) -> Result<()> {
    if p == 0 || q == 0 {
        return Err(Error::Contract(format!(
            "Hankel levels must be positive, got p = {p}, q = {q}"
        )));
    }
    Ok(())
}

/// The `(2^p - 1) × (2^q - 1)` Hankel matrix alone; needs depth `p + q - 1`.
pub fn hankel_matrix(w: &MarkovSequence, p: usize, q: usize) -> Result<DMatrix<f64>> {
    check_levels(p, q)?;
    let required = p + q - 1;
    if w.depth() < required {
        return Err(Error::InsufficientDepth {
            required,
            available: w.depth(),
        });
    }
    Ok(fill(w, p, q, None))
}

/// Hankel matrix with its `A`- and `N`-shifted partitions, all of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    p: usize,
    q: usize,
    h: DMatrix<f64>,
    sa: DMatrix<f64>,
    sn: DMatrix<f64>,
}

impl HankelSet {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn sa(&self) -> &DMatrix<f64> {
        &self.sa
    }

    pub fn sn(&self) -> &DMatrix<f64> {
        &self.sn
    }

    /// Markov depth consumed, `p + q`.
    pub fn depth_used(&self) -> usize {
        self.p + self.q
    }

    /// Singular values of `H`, nonincreasing.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut sv = match faer_of(&self.h).singular_values() {
            Ok(sv) => sv,
            Err(_) => self.h.singular_values().iter().copied().collect(),
        };
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }
}

fn faer_of(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Builds `H`, `S^A` and `S^N` at `p` row levels and `q` column levels. The
/// shifted matrices need words of length `p + q - 1`, so `W` must have depth
/// at least `p + q`.
pub fn build_hankel(w: &MarkovSequence, p: usize, q: usize) -> Result<HankelSet> {
    check_levels(p, q)?;
    let required = p + q;
    if w.depth() < required {
        return Err(Error::InsufficientDepth {
            required,
            available: w.depth(),
        });
    }
    Ok(HankelSet {
        p,
        q,
        h: fill(w, p, q, None),
        sa: fill(w, p, q, Some(Letter::A)),
        sn: fill(w, p, q, Some(Letter::N)),
    })
}

/// Largest `r` with `σ_r / σ_1 > tol`.
pub fn select_order(singular_values: &[f64], tol: f64) -> Result<usize> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Contract(format!("tolerance must lie in (0, 1), got {tol}")));
    }
    let first = *singular_values
        .first()
        .ok_or_else(|| Error::Degenerate("empty singular spectrum".into()))?;
    if singular_values.windows(2).any(|w| w[1] > w[0]) || singular_values.iter().any(|&s| s < 0.0)
    {
        return Err(Error::Contract(
            "singular values must be nonnegative and nonincreasing".into(),
        ));
    }
    if !(first > 0.0) {
        return Err(Error::Degenerate("all singular values are zero".into()));
    }
    Ok(singular_values
        .iter()
        .take_while(|&&s| s / first > tol)
        .count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizationResult {
    pub system: DiscreteBilinearSystem,
    /// Full spectrum of `H`, nonincreasing.
    pub singular_values: Vec<f64>,
    pub order: usize,
    /// Relative threshold that chose the order, if it was not fixed by hand.
    pub tolerance_used: Option<f64>,
}

impl RealizationResult {
    /// `σ_i / σ_1` for every singular value.
    pub fn normalized_spectrum(&self) -> Vec<f64> {
        let first = self.singular_values.first().copied().unwrap_or(1.0);
        self.singular_values.iter().map(|s| s / first).collect()
    }
}

/// Order-`r` quadruple from the truncated SVD `H ≈ U Σ Vᵀ`:
/// `A_r = Σ^{-1/2} Uᵀ S^A V Σ^{-1/2}`, `N_r` likewise from `S^N`,
/// `B_r` the first column of `Σ^{1/2} Vᵀ` and `C_r` the first row of `U Σ^{1/2}`.
pub fn realize(hs: &HankelSet, order: usize) -> Result<RealizationResult> {
    let (m, n) = hs.h.shape();
    if order == 0 {
        return Err(Error::Contract("realization order must be positive".into()));
    }
    // faer's SVD; nalgebra's loses digits on nearly rank-one Hankel matrices.
    let svd = faer_of(&hs.h)
        .thin_svd()
        .map_err(|e| Error::Degenerate(format!("SVD of the Hankel matrix failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let sigma = DVector::from_fn(s.nrows(), |i, _| s[i]);
    let (fu, fv) = (svd.U(), svd.V());
    let u = DMatrix::from_fn(fu.nrows(), fu.ncols(), |i, j| fu[(i, j)]);
    let v_t = DMatrix::from_fn(fv.ncols(), fv.nrows(), |i, j| fv[(j, i)]);
    let first = sigma.max();
    if order > sigma.len() {
        return Err(Error::RankDeficient {
            rank: sigma.len(),
            required: order,
        });
    }
    let tol = m.max(n) as f64 * f64::EPSILON * first;
    let rank = sigma.iter().filter(|&&s| s > tol).count();
    if order > rank {
        return Err(Error::RankDeficient {
            rank,
            required: order,
        });
    }
    let sigma_r = sigma[order - 1];
    if !(sigma_r > 0.0) {
        return Err(Error::Degenerate(format!(
            "singular value {order} is zero; cannot truncate there"
        )));
    }

    let u_r = u.columns(0, order);
    let v_r = v_t.rows(0, order).transpose();
    let inv_sqrt = DVector::from_fn(order, |i, _| sigma[i].sqrt().recip());
    let sqrt = DVector::from_fn(order, |i, _| sigma[i].sqrt());
    let left = u_r.transpose();
    let shift = |s: &DMatrix<f64>| {
        let mut core = &left * s * &v_r;
        for i in 0..order {
            for j in 0..order {
                core[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        core
    };
    let a_r = shift(&hs.sa);
    let n_r = shift(&hs.sn);
    let b_r = DVector::from_fn(order, |i, _| sqrt[i] * v_t[(i, 0)]);
    let c_r = DVector::from_fn(order, |i, _| u[(0, i)] * sqrt[i]);

    let mut singular_values: Vec<f64> = sigma.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    // nalgebra sorts the decomposition, so the leading triples are the top r.
    debug_assert!(sigma.iter().zip(&singular_values).all(|(a, b)| a == b));
    Ok(RealizationResult {
        system: DiscreteBilinearSystem::new(a_r, n_r, b_r, c_r)?,
        singular_values,
        order,
        tolerance_used: None,
    })
}

/// How the realization order is picked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderChoice {
    /// Largest `r` with `σ_r / σ_1 > tol`.
    Tolerance(f64),
    /// Fixed order.
    Fixed(usize),
}

impl Default for OrderChoice {
    fn default() -> Self {
        OrderChoice::Tolerance(DEFAULT_TOLERANCE)
    }
}

/// Hankel levels used for a sequence of the given depth: `p = ⌊depth/2⌋`,
/// `q = depth - p`.
pub fn default_levels(depth: usize) -> (usize, usize) {
    let p = depth / 2;
    (p, depth - p)
}

/// Builds the Hankel set at [`default_levels`], selects the order and realizes.
pub fn identify_from_markov(w: &MarkovSequence, tol: f64) -> Result<RealizationResult> {
    identify_from_markov_with(w, OrderChoice::Tolerance(tol))
}

pub fn identify_from_markov_with(
    w: &MarkovSequence,
    choice: OrderChoice,
) -> Result<RealizationResult> {
    if w.depth() < 2 {
        return Err(Error::InsufficientDepth {
            required: 2,
            available: w.depth(),
        });
    }
    let (p, q) = default_levels(w.depth());
    let hs = build_hankel(w, p, q)?;
    let (order, tol) = match choice {
        OrderChoice::Tolerance(tol) => (select_order(&hs.singular_values(), tol)?, Some(tol)),
        OrderChoice::Fixed(r) => (r, None),
    };
    let mut result = realize(&hs, order)?;
    result.tolerance_used = tol;
    log::debug!(
        "realized order {order} from a {}x{} Hankel matrix",
        hs.h.nrows(),
        hs.h.ncols()
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::toy_system;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn toy_w() -> MarkovSequence {
        MarkovSequence::from_flat(vec![
            1.0, 0.9, 0.4, 0.81, 0.33, 0.36, 0.22, 0.729, 0.273, 0.297, 0.183, 0.324, 0.18,
            0.198, 0.118,
        ])
        .unwrap()
    }

    #[test]
    fn row_words_follow_observability_stacking() {
        let words: Vec<String> = (0..7).map(|i| row_word(i).to_string()).collect();
        assert_eq!(words, ["ε", "A", "N", "AA", "NA", "AN", "NN"]);
        let cols: Vec<String> = (0..7).map(|k| col_word(k).to_string()).collect();
        assert_eq!(cols, ["ε", "A", "N", "AA", "AN", "NA", "NN"]);
    }

    #[test]
    fn first_row_is_the_markov_prefix() {
        let h = hankel_matrix(&toy_w(), 2, 3).unwrap();
        let row: Vec<f64> = h.row(0).iter().copied().collect();
        assert_eq!(row, toy_w().flat()[..7]);
    }

    #[test]
    fn single_entry_hankel() {
        let h = hankel_matrix(&toy_w(), 1, 1).unwrap();
        assert_eq!(h, dmatrix![1.0]);
    }

    #[test]
    fn insufficient_depth_names_requirement() {
        match build_hankel(&toy_w(), 2, 3) {
            Err(Error::InsufficientDepth { required, available }) => {
                assert_eq!((required, available), (5, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(hankel_matrix(&toy_w(), 3, 3).is_err());
    }

    #[test]
    fn select_order_boundaries() {
        assert_eq!(select_order(&[1.0, 1e-13, 1e-14], 1e-12).unwrap(), 1);
        assert_eq!(select_order(&[1.0, 0.5, 5.2501e-17], 1e-12).unwrap(), 2);
        // A value sitting exactly at the threshold is cut.
        assert_eq!(select_order(&[1.0, 1e-12], 1e-12).unwrap(), 1);
        assert!(matches!(
            select_order(&[0.0, 0.0], 1e-12),
            Err(Error::Degenerate(_))
        ));
        assert!(select_order(&[1.0, 2.0], 1e-12).is_err());
    }

    #[test]
    fn select_order_eighteen() {
        let mut sv: Vec<f64> = (0..18).map(|i| 10f64.powf(-0.6 * i as f64)).collect();
        sv.push(1.18e-12);
        sv.extend((0..12).map(|i| 1e-13 * 0.5f64.powi(i)));
        // Strict inequality: 1.18e-12 still clears 1e-12, so σ_19 is kept
        // unless the threshold reaches it.
        assert_eq!(select_order(&sv, 1e-12).unwrap(), 19);
        assert_eq!(select_order(&sv, 1.18e-12).unwrap(), 18);
        assert_eq!(select_order(&sv, 1.2e-12).unwrap(), 18);
    }

    #[test]
    fn realization_reproduces_toy_markov() {
        let hs = build_hankel(&toy_w(), 2, 2).unwrap();
        let res = realize(&hs, 2).unwrap();
        let w = res.system.markov_oracle(4);
        assert!(w.max_abs_diff(&toy_w()) < 1e-10);
        assert_eq!(res.system.d(), 0.0);
        assert!(res.system.x0().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn order_above_rank_is_refused() {
        let hs = build_hankel(&toy_w(), 2, 2).unwrap();
        assert!(matches!(realize(&hs, 3), Err(Error::RankDeficient { .. })));
        assert!(realize(&hs, 0).is_err());
    }

    #[test]
    fn scalar_linear_system() {
        let (a, b, c) = (0.7, 1.5, -0.4);
        let sys = DiscreteBilinearSystem::new(
            dmatrix![a],
            dmatrix![0.0],
            nalgebra::dvector![b],
            nalgebra::dvector![c],
        )
        .unwrap();
        let w = sys.markov_oracle(2);
        let hs = build_hankel(&w, 1, 1).unwrap();
        let res = realize(&hs, 1).unwrap();
        let s = &res.system;
        assert_abs_diff_eq!(s.c().dot(s.b()), c * b, epsilon = 1e-12);
        assert_abs_diff_eq!(s.c().dot(&(s.a() * s.b())), c * a * b, epsilon = 1e-12);
    }

    #[test]
    fn rank_one_truncation_of_toy() {
        // Best rank-1 approximation of H: its (1,1) entry is σ₁ u₁₁ v₁₁,
        // computed here from an independent symmetric eigen-decomposition of HᵀH.
        let hs = build_hankel(&toy_w(), 2, 2).unwrap();
        let res = realize(&hs, 1).unwrap();
        let got = res.system.c().dot(res.system.b());

        let h = hs.h();
        let gram = h.transpose() * h;
        let eig = gram.symmetric_eigen();
        let (imax, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let v1 = eig.eigenvectors.column(imax);
        let expected = (h * v1)[0] * v1[0];
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn identify_toy_at_default_tolerance() {
        let res = identify_from_markov(&toy_w(), DEFAULT_TOLERANCE).unwrap();
        assert_eq!(res.order, 2);
        assert_eq!(res.tolerance_used, Some(DEFAULT_TOLERANCE));
        let u: Vec<f64> = (0..50).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        let y_true = toy_system().simulate(&u).unwrap();
        let y_id = res.system.simulate(&u).unwrap();
        for (a, b) in y_true.iter().zip(&y_id) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn minimal_depth_identification() {
        let w = toy_system().markov_oracle(2);
        let res = identify_from_markov(&w, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(res.order, 1);
        assert_eq!(res.singular_values.len(), 1);
        assert!(identify_from_markov(&toy_system().markov_oracle(1), 1e-12).is_err());
    }
}
