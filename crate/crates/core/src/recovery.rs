//! Recovery of bilinear Markov parameters from batches of excitation
//! experiments.
//!
//! Every experiment contributes `L` equations `y_t = Σ_j u_j(t - j)ᵀ w_j`
//! through its lifted input matrix; stacking `d` experiments gives the
//! over-determined system `Û 𝒲 = Ŷ`.

use faer::linalg::solvers::Qr;
use faer::{Mat, MatRef};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{markov_len, MarkovSequence};
use crate::system::DiscreteBilinearSystem;

/// Anything that maps an input sequence to an output sequence of equal length,
/// deterministically.
pub trait IoSource: Sync {
    fn respond(&self, u: &[f64]) -> Result<Vec<f64>>;
}

impl<F> IoSource for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    fn respond(&self, u: &[f64]) -> Result<Vec<f64>> {
        self(u)
    }
}

impl IoSource for DiscreteBilinearSystem {
    fn respond(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.simulate(u)
    }
}

/// Writes `u_j(h)` (length `2^(j-1)`) into `out`.
fn lifted_block(u: &[f64], j: usize, h: usize, out: &mut [f64]) {
    out[0] = u[h];
    let mut len = 1;
    for i in 2..=j {
        let factor = u[h + i - 1];
        let (head, tail) = out.split_at_mut(len);
        for (dst, src) in tail[..len].iter_mut().zip(head.iter()) {
            *dst = src * factor;
        }
        len *= 2;
    }
}

/// Row `t` (1-based) of the lifted input matrix, first `2^t - 1` entries.
fn lifted_row(u: &[f64], t: usize, out: &mut [f64]) {
    for j in 1..=t {
        let start = (1usize << (j - 1)) - 1;
        lifted_block(u, j, t - j, &mut out[start..start + (1 << (j - 1))]);
    }
}

/// Lower block-triangular matrix mapping the Markov parameters to the outputs
/// of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedInputMatrix {
    data: DMatrix<f64>,
}

impl LiftedInputMatrix {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }
}

/// Row `t` is `[u_1ᵀ(t-1), u_2ᵀ(t-2), …, u_tᵀ(0), 0, …]` where
/// `u_1(h) = u(h)` and `u_j(h) = [u_{j-1}(h); u_{j-1}(h) u(h+j-1)]`.
pub fn lift_input(u: &[f64]) -> Result<LiftedInputMatrix> {
    let len = u.len();
    if len == 0 {
        return Err(Error::Contract("cannot lift an empty input".into()));
    }
    if len >= usize::BITS as usize - 1 {
        return Err(Error::Contract(format!("input of length {len} is too long to lift")));
    }
    if let Some(pos) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input sample {pos}")));
    }
    let cols = markov_len(len);
    let mut data = DMatrix::zeros(len, cols);
    let mut row = vec![0.0; cols];
    for t in 1..=len {
        let width = markov_len(t);
        lifted_row(u, t, &mut row[..width]);
        for (c, v) in row[..width].iter().enumerate() {
            data[(t - 1, c)] = *v;
        }
    }
    Ok(LiftedInputMatrix { data })
}

/// How experiment inputs are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Excitation {
    /// i.i.d. normal samples.
    Gaussian { mean: f64, std: f64 },
    /// Inputs given verbatim, one experiment per row.
    Prescribed {
        #[serde(skip)]
        inputs: DMatrix<f64>,
    },
}

impl Excitation {
    pub fn standard() -> Self {
        Excitation::Gaussian { mean: 0.0, std: 1.0 }
    }
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation::standard()
    }
}

/// Provenance stored with a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMeta {
    pub seed: Option<u64>,
    pub excitation: Excitation,
}

/// `d` input/output experiments of length `L`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentBatch {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    meta: Option<BatchMeta>,
}

impl ExperimentBatch {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.shape() != outputs.shape() {
            return Err(Error::Dimension(format!(
                "inputs are {}x{} but outputs are {}x{}",
                inputs.nrows(),
                inputs.ncols(),
                outputs.nrows(),
                outputs.ncols()
            )));
        }
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::Contract("batch must hold at least one sample".into()));
        }
        for (name, m) in [("input", &inputs), ("output", &outputs)] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                let (r, c) = (pos % m.nrows(), pos / m.nrows());
                return Err(Error::Contract(format!(
                    "non-finite {name} in experiment {r} at step {c}"
                )));
            }
        }
        Ok(ExperimentBatch {
            inputs,
            outputs,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: BatchMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    /// Number of experiments `d`.
    pub fn count(&self) -> usize {
        self.inputs.nrows()
    }

    /// Experiment length `L`.
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn meta(&self) -> Option<&BatchMeta> {
        self.meta.as_ref()
    }

    fn input_row(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().copied().collect()
    }

    /// Dense `(Û, Ŷ)` with experiment-major row order.
    pub fn stacked_system(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let len = self.len();
        let cols = markov_len(len);
        let mut u_hat = DMatrix::zeros(self.count() * len, cols);
        let mut y_hat = DVector::zeros(self.count() * len);
        for i in 0..self.count() {
            let lifted = lift_input(&self.input_row(i))?;
            u_hat.rows_mut(i * len, len).copy_from(lifted.matrix());
            for t in 0..len {
                y_hat[i * len + t] = self.outputs[(i, t)];
            }
        }
        Ok((u_hat, y_hat))
    }
}

/// Default experiment count `2^(L-1)`.
pub fn default_experiment_count(len: usize) -> usize {
    1usize << (len.saturating_sub(1))
}

/// Runs `count` experiments of length `len` against `source`.
///
/// Gaussian inputs for experiment `i` come from ChaCha stream `i` of `seed`,
/// so the batch does not depend on how experiments are scheduled.
pub fn generate_experiments<S: IoSource + ?Sized>(
    source: &S,
    count: usize,
    len: usize,
    excitation: &Excitation,
    seed: u64,
) -> Result<ExperimentBatch> {
    if count == 0 || len == 0 {
        return Err(Error::Contract(format!(
            "need at least one experiment of positive length, got d = {count}, L = {len}"
        )));
    }
    let inputs = match excitation {
        Excitation::Gaussian { mean, std } => {
            let normal = Normal::new(*mean, *std).map_err(|e| {
                Error::Contract(format!("invalid Gaussian excitation: {e}"))
            })?;
            let rows: Vec<Vec<f64>> = (0..count)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                })
                .collect();
            DMatrix::from_fn(count, len, |r, c| rows[r][c])
        }
        Excitation::Prescribed { inputs } => {
            if inputs.shape() != (count, len) {
                return Err(Error::Dimension(format!(
                    "prescribed inputs are {}x{}, expected {count}x{len}",
                    inputs.nrows(),
                    inputs.ncols()
                )));
            }
            inputs.clone()
        }
    };

    let responses: Vec<Result<Vec<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let u: Vec<f64> = inputs.row(i).iter().copied().collect();
            let y = source.respond(&u)?;
            if y.len() != len {
                return Err(Error::Dimension(format!(
                    "source returned {} outputs for {len} inputs",
                    y.len()
                )));
            }
            Ok(y)
        })
        .collect();

    let mut outputs = DMatrix::zeros(count, len);
    for (i, response) in responses.into_iter().enumerate() {
        let y = response.map_err(|e| Error::Experiment {
            index: i,
            source: Box::new(e),
        })?;
        for (t, v) in y.into_iter().enumerate() {
            outputs[(i, t)] = v;
        }
    }
    let excitation = match excitation {
        Excitation::Gaussian { .. } => excitation.clone(),
        Excitation::Prescribed { .. } => Excitation::Prescribed {
            inputs: DMatrix::zeros(0, 0),
        },
    };
    Ok(ExperimentBatch::new(inputs, outputs)?.with_meta(BatchMeta {
        seed: Some(seed),
        excitation,
    }))
}

/// Least-squares backend for [`recover_markov_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstsqMethod {
    /// Dense SVD up to depth [`DENSE_DEPTH_LIMIT`], staged QR beyond.
    #[default]
    Auto,
    /// Minimum-norm solution from an SVD of the full stacked matrix.
    DenseSvd,
    /// Block elimination by time step, exploiting the triangular structure.
    Staged,
}

/// Largest depth solved by dense SVD under [`LstsqMethod::Auto`].
pub const DENSE_DEPTH_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDiagnostics {
    /// Numerical rank of `Û`.
    pub rank: usize,
    /// Number of unknowns, `2^L - 1`.
    pub unknowns: usize,
    /// Number of stacked equations, `d L`.
    pub equations: usize,
    /// `‖Û 𝒲 - Ŷ‖₂`.
    pub residual: f64,
    /// Estimate of `σ_max / σ_min` of `Û`.
    pub condition: f64,
    pub method: LstsqMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovRecovery {
    pub markov: MarkovSequence,
    pub diagnostics: RecoveryDiagnostics,
}

pub fn recover_markov(batch: &ExperimentBatch) -> Result<MarkovRecovery> {
    recover_markov_with(batch, LstsqMethod::Auto)
}

pub fn recover_markov_with(batch: &ExperimentBatch, method: LstsqMethod) -> Result<MarkovRecovery> {
    let len = batch.len();
    if len >= 24 {
        return Err(Error::Contract(format!(
            "experiment length {len} implies 2^{len} - 1 unknowns; too large"
        )));
    }
    let method = match method {
        LstsqMethod::Auto if len <= DENSE_DEPTH_LIMIT => LstsqMethod::DenseSvd,
        LstsqMethod::Auto => LstsqMethod::Staged,
        m => m,
    };
    let (flat, rank, condition) = match method {
        LstsqMethod::DenseSvd => solve_dense(batch)?,
        _ => solve_staged(batch)?,
    };
    let residual = residual_norm(batch, &flat);
    if !residual.is_finite() {
        return Err(Error::NonFinite("least-squares residual".into()));
    }
    let markov = MarkovSequence::from_flat(flat)?;
    log::debug!(
        "recovered depth-{len} Markov sequence from {} experiments: rank {rank}, residual {residual:.3e}, condition {condition:.3e}",
        batch.count()
    );
    Ok(MarkovRecovery {
        markov,
        diagnostics: RecoveryDiagnostics {
            rank,
            unknowns: markov_len(len),
            equations: batch.count() * len,
            residual,
            condition,
            method,
        },
    })
}

fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

fn residual_norm(batch: &ExperimentBatch, flat: &[f64]) -> f64 {
    let len = batch.len();
    let mut row = vec![0.0; markov_len(len)];
    let mut sum = 0.0;
    for i in 0..batch.count() {
        let u = batch.input_row(i);
        for t in 1..=len {
            let width = markov_len(t);
            lifted_row(&u, t, &mut row[..width]);
            let pred: f64 = row[..width].iter().zip(flat).map(|(a, b)| a * b).sum();
            let r = pred - batch.outputs[(i, t - 1)];
            sum += r * r;
        }
    }
    sum.sqrt()
}

fn solve_dense(batch: &ExperimentBatch) -> Result<(Vec<f64>, usize, f64)> {
    let len = batch.len();
    let cols = markov_len(len);
    let rows = batch.count() * len;
    let mut u_hat = Mat::<f64>::zeros(rows, cols);
    let mut row = vec![0.0; cols];
    for i in 0..batch.count() {
        let u = batch.input_row(i);
        for t in 1..=len {
            let width = markov_len(t);
            lifted_row(&u, t, &mut row[..width]);
            for (c, v) in row[..width].iter().enumerate() {
                u_hat[(i * len + t - 1, c)] = *v;
            }
        }
    }
    let svd = u_hat
        .thin_svd()
        .map_err(|e| Error::Degenerate(format!("SVD of the stacked input matrix failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let sigma: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let tol = rank_tolerance(rows, cols, sigma_max);
    let rank = sigma.iter().filter(|&&v| v > tol).count();
    if rank < cols {
        return Err(Error::RankDeficient {
            rank,
            required: cols,
        });
    }
    let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);

    let (u, v) = (svd.U(), svd.V());
    let mut coeff = vec![0.0; sigma.len()];
    for (k, c) in coeff.iter_mut().enumerate() {
        if sigma[k] > tol {
            let mut dot = 0.0;
            for i in 0..batch.count() {
                for t in 0..len {
                    dot += u[(i * len + t, k)] * batch.outputs[(i, t)];
                }
            }
            *c = dot / sigma[k];
        }
    }
    let flat = (0..cols)
        .map(|r| coeff.iter().enumerate().map(|(k, c)| v[(r, k)] * c).sum())
        .collect();
    Ok((flat, rank, sigma_max / sigma_min))
}

struct Stage {
    /// Upper-triangular factor for block `j`.
    r: Mat<f64>,
    /// Coupling to blocks `1..j`.
    coupling: Mat<f64>,
    rhs: Vec<f64>,
}

/// Block elimination over time steps, from the last block to the first.
///
/// Block `w_j` only appears in equations with `t ≥ j`. At stage `j` the
/// equations for `t = j` are stacked under the reduced equations carried from
/// stage `j + 1`, the block-`j` columns are triangularised by Householder QR,
/// and the trailing rows of `R`, free of block `j`, become the next carry.
/// The result is the exact least-squares solution of the full stacked system.
fn solve_staged(batch: &ExperimentBatch) -> Result<(Vec<f64>, usize, f64)> {
    let len = batch.len();
    let count = batch.count();
    let unknowns = markov_len(len);
    let inputs: Vec<Vec<f64>> = (0..count).map(|i| batch.input_row(i)).collect();

    // Carry rows, columns = blocks 1..j in natural order, then the rhs.
    let mut carry = Mat::<f64>::zeros(0, unknowns + 1);
    let mut stages: Vec<Stage> = Vec::with_capacity(len);
    let mut row = vec![0.0; unknowns];

    for j in (1..=len).rev() {
        let width = 1usize << (j - 1);
        let before = width - 1;
        let rows = carry.nrows() + count;
        let mut m = Mat::<f64>::zeros(rows, width + before + 1);
        let col_of = |c: usize| if c >= before { c - before } else { c + width };
        for r in 0..carry.nrows() {
            for c in 0..before + width {
                m[(r, col_of(c))] = carry[(r, c)];
            }
            m[(r, width + before)] = carry[(r, before + width)];
        }
        for (i, u) in inputs.iter().enumerate() {
            let r = carry.nrows() + i;
            lifted_row(u, j, &mut row[..before + width]);
            for c in 0..before + width {
                m[(r, col_of(c))] = row[c];
            }
            m[(r, width + before)] = batch.outputs[(i, j - 1)];
        }

        let qr = Qr::new(m.as_ref());
        let r_full: MatRef<'_, f64> = qr.thin_R();
        let kept = width.min(r_full.nrows());
        let mut r = Mat::<f64>::zeros(width, width);
        let mut coupling = Mat::<f64>::zeros(width, before);
        let mut rhs = vec![0.0; width];
        for a in 0..kept {
            for c in a..width {
                r[(a, c)] = r_full[(a, c)];
            }
            for c in 0..before {
                coupling[(a, c)] = r_full[(a, width + c)];
            }
            rhs[a] = r_full[(a, width + before)];
        }
        let tail = r_full.nrows().saturating_sub(width);
        carry = Mat::<f64>::zeros(tail, before + 1);
        for a in 0..tail {
            for c in 0..=before {
                carry[(a, c)] = r_full[(width + a, width + c)];
            }
        }
        stages.push(Stage { r, coupling, rhs });
    }
    stages.reverse();

    // Rank and conditioning from the diagonal blocks of the block-triangular R.
    let mut spectra = Vec::with_capacity(len);
    for stage in &stages {
        let sv = stage
            .r
            .singular_values()
            .map_err(|e| Error::Degenerate(format!("SVD of a triangular block failed: {e:?}")))?;
        spectra.push(sv);
    }
    let sigma_max = spectra.iter().flatten().copied().fold(0.0, f64::max);
    let sigma_min = spectra
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let tol = rank_tolerance(count * len, unknowns, sigma_max);
    let rank: usize = spectra
        .iter()
        .map(|sv| sv.iter().filter(|&&v| v > tol).count())
        .sum();
    if rank < unknowns {
        return Err(Error::RankDeficient {
            rank,
            required: unknowns,
        });
    }

    let mut flat = vec![0.0; unknowns];
    for (idx, stage) in stages.iter().enumerate() {
        let j = idx + 1;
        let width = 1usize << (j - 1);
        let before = width - 1;
        let mut z = stage.rhs.clone();
        for (a, za) in z.iter_mut().enumerate() {
            let s: f64 = (0..before).map(|c| stage.coupling[(a, c)] * flat[c]).sum();
            *za -= s;
        }
        for a in (0..width).rev() {
            let s: f64 = (a + 1..width).map(|c| stage.r[(a, c)] * z[c]).sum();
            z[a] = (z[a] - s) / stage.r[(a, a)];
        }
        flat[before..before + width].copy_from_slice(&z);
    }
    Ok((flat, rank, sigma_max / sigma_min))
}
