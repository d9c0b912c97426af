//! Randomized estimation of `tr f(E)` for symmetric `E`: Lanczos
//! approximation of `f(E)z` with full reorthogonalization, Hutchinson and
//! stochastic Lanczos quadrature, and the leave-one-out Nyström estimator.
//!
//! Probe `i` is always drawn from its own substream, so an estimate with `N`
//! samples is, up to rounding, the prefix of any larger run with the same seed.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{pinv_symmetric, symmetrize, tridiagonal_eigen, EigenvectorRows, Matrix, Vector};
use crate::operators::LinearOperator;
use crate::rng::{gaussian_vector, rademacher_vector, stream_rng, Purpose};

/// Relative threshold for the Nyström core pseudo-inverse.
pub const NYSTROM_PINV_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFunction {
    /// `log x`, for SPD operators.
    Log,
    /// `log |x|`, for nonsingular symmetric indefinite operators.
    LogAbs,
}

impl MatrixFunction {
    /// Applies `f` to the Ritz values, rejecting values outside the domain.
    fn eval_all(self, values: &[f64]) -> Result<Vec<f64>> {
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        values
            .iter()
            .map(|&v| match self {
                MatrixFunction::Log if v <= 0.0 => Err(Error::NotPositiveDefinite(format!(
                    "nonpositive Ritz value {v:.3e}"
                ))),
                MatrixFunction::Log => Ok(v.ln()),
                MatrixFunction::LogAbs if v.abs() <= 1e-14 * scale => Err(Error::Singular(format!(
                    "Ritz value {v:.3e} against scale {scale:.3e}"
                ))),
                MatrixFunction::LogAbs => Ok(v.abs().ln()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Relative change of `tr f(T_j)` between consecutive iterations.
    TraceChange,
    /// Relative change of the quadrature value `e₁ᵀ f(T_j) e₁`.
    QuadratureChange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanczosOptions {
    pub rel_tol: f64,
    /// Defaults to `min(d, 2000)`.
    pub max_iter: Option<usize>,
    pub stop_rule: StopRule,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: None,
            stop_rule: StopRule::QuadratureChange,
        }
    }
}

impl LanczosOptions {
    pub fn max_iter_for(&self, d: usize) -> usize {
        self.max_iter.unwrap_or(d.min(2000)).clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    /// The Krylov space became invariant; the result is exact.
    InvariantSubspace,
    MaxIterations,
}

/// One Lanczos run from `v₁ = z/‖z‖`.
#[derive(Debug, Clone)]
pub struct LanczosRun {
    /// Orthonormal Lanczos vectors, `d × iterations`.
    pub basis: Matrix,
    pub alpha: Vec<f64>,
    /// `beta[j]` couples `v_{j+1}` and `v_{j+2}`; the last entry is the
    /// residual norm after the final step.
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub z_norm: f64,
}

impl LanczosRun {
    pub fn tridiagonal(&self) -> Matrix {
        let n = self.iterations;
        let mut t = Matrix::zeros(n, n);
        for j in 0..n {
            t[(j, j)] = self.alpha[j];
            if j + 1 < n {
                t[(j, j + 1)] = self.beta[j];
                t[(j + 1, j)] = self.beta[j];
            }
        }
        t
    }

    fn offdiag(&self) -> &[f64] {
        &self.beta[..self.iterations.saturating_sub(1)]
    }

    /// `‖z‖² e₁ᵀ f(T) e₁`, the Gauss quadrature estimate of `zᵀ f(E) z`.
    pub fn quadrature(&self, f: MatrixFunction) -> Result<f64> {
        let eig = tridiagonal_eigen(&self.alpha, self.offdiag(), EigenvectorRows::First)?;
        let fv = f.eval_all(&eig.values)?;
        let e1f: f64 = fv
            .iter()
            .enumerate()
            .map(|(i, v)| v * eig.vectors[(0, i)].powi(2))
            .sum();
        Ok(self.z_norm * self.z_norm * e1f)
    }

    /// `‖z‖ V f(T) e₁ ≈ f(E) z`.
    pub fn apply_f(&self, f: MatrixFunction) -> Result<Vector> {
        let eig = tridiagonal_eigen(&self.alpha, self.offdiag(), EigenvectorRows::All)?;
        let fv = f.eval_all(&eig.values)?;
        let n = self.iterations;
        let mut s = Vector::zeros(n);
        for (i, v) in fv.iter().enumerate() {
            let c = v * eig.vectors[(0, i)];
            s.axpy(c, &eig.vectors.column(i), 1.0);
        }
        Ok(&self.basis.columns(0, n) * s * self.z_norm)
    }
}

struct ColumnState {
    basis: Matrix,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    z_norm: f64,
    scale: f64,
    pivot: f64,
    pivot_logdet: f64,
    pivots_reliable: bool,
    previous: Option<f64>,
    done: Option<StopReason>,
}

impl ColumnState {
    fn new(z: &Vector, max_iter: usize) -> Self {
        let z_norm = z.norm();
        let mut basis = Matrix::zeros(z.len(), max_iter.min(64));
        basis.set_column(0, &(z / z_norm));
        Self {
            basis,
            alpha: Vec::new(),
            beta: Vec::new(),
            z_norm,
            scale: 0.0,
            pivot: 0.0,
            pivot_logdet: 0.0,
            pivots_reliable: true,
            previous: None,
            done: None,
        }
    }

    fn j(&self) -> usize {
        self.alpha.len()
    }

    /// `tr f(T_j)`, from LDLᵀ pivots when they are safe, otherwise from QL.
    fn trace_f(&mut self, f: MatrixFunction) -> Result<f64> {
        let j = self.j();
        let a = self.alpha[j - 1];
        let piv = if j == 1 {
            a
        } else {
            a - self.beta[j - 2].powi(2) / self.pivot
        };
        self.pivot = piv;
        if piv.abs() <= 1e-12 * self.scale || (f == MatrixFunction::Log && piv <= 0.0) {
            self.pivots_reliable = false;
        }
        if self.pivots_reliable {
            self.pivot_logdet += piv.abs().ln();
            return Ok(self.pivot_logdet);
        }
        let eig = tridiagonal_eigen(&self.alpha, &self.beta[..j - 1], EigenvectorRows::None)?;
        if f == MatrixFunction::Log {
            return Ok(f.eval_all(&eig.values)?.iter().sum());
        }
        // Intermediate Ritz values of an indefinite operator may come close
        // to zero; only the final ones are checked.
        Ok(eig.values.iter().map(|v| v.abs().ln()).sum())
    }

    fn quadrature_f(&self, f: MatrixFunction) -> Result<f64> {
        let j = self.j();
        let eig = tridiagonal_eigen(&self.alpha, &self.beta[..j - 1], EigenvectorRows::First)?;
        let fv: Vec<f64> = match f {
            MatrixFunction::Log => f.eval_all(&eig.values)?,
            // Intermediate Ritz values of an indefinite operator may come
            // close to zero; only the final ones are checked.
            MatrixFunction::LogAbs => eig.values.iter().map(|v| v.abs().ln()).collect(),
        };
        Ok(fv.iter().enumerate().map(|(i, v)| v * eig.vectors[(0, i)].powi(2)).sum())
    }

    fn into_run(self) -> LanczosRun {
        let n = self.alpha.len();
        LanczosRun {
            basis: self.basis.columns(0, n).into_owned(),
            alpha: self.alpha,
            beta: self.beta,
            iterations: n,
            stop_reason: self.done.unwrap_or(StopReason::MaxIterations),
            z_norm: self.z_norm,
        }
    }
}

/// Lanczos on every column of `z` in lockstep, one block application of the
/// operator per iteration. Each column stops on its own criterion.
pub fn lanczos_block(
    op: &dyn LinearOperator,
    z: &Matrix,
    f: MatrixFunction,
    opts: &LanczosOptions,
) -> Result<Vec<LanczosRun>> {
    let d = op.rows();
    check_dim("Lanczos operator must be square", d, op.cols())?;
    check_dim("Lanczos start vectors", d, z.nrows())?;
    let max_iter = opts.max_iter_for(d);
    let mut states = Vec::with_capacity(z.ncols());
    for (c, col) in z.column_iter().enumerate() {
        let col = col.into_owned();
        if !(col.norm() > 0.0) {
            return Err(Error::InSample {
                index: c,
                source: Box::new(Error::InvalidArgument("zero start vector".into())),
            });
        }
        states.push(ColumnState::new(&col, max_iter));
    }
    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&c| states[c].done.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut w_block = Matrix::zeros(d, active.len());
        for (slot, &c) in active.iter().enumerate() {
            let j = states[c].j();
            w_block.set_column(slot, &states[c].basis.column(j));
        }
        let ew = op.apply_block(&w_block);
        for (slot, &c) in active.iter().enumerate() {
            let st = &mut states[c];
            let j = st.j();
            let v = st.basis.column(j).into_owned();
            let mut w = ew.column(slot).into_owned();
            let a = v.dot(&w);
            w.axpy(-a, &v, 1.0);
            if j > 0 {
                w.axpy(-st.beta[j - 1], &st.basis.column(j - 1), 1.0);
            }
            let basis = st.basis.columns(0, j + 1);
            for _ in 0..2 {
                let coeffs = basis.tr_mul(&w);
                w -= &basis * coeffs;
            }
            let b = w.norm();
            st.alpha.push(a);
            st.beta.push(b);
            st.scale = st.scale.max(a.abs()).max(b);
            let current = match opts.stop_rule {
                StopRule::TraceChange => st.trace_f(f),
                StopRule::QuadratureChange => st.quadrature_f(f),
            }
            .map_err(|e| Error::InSample {
                index: c,
                source: Box::new(e),
            })?;
            let n = j + 1;
            if b <= 1e-14 * st.scale || n >= d {
                st.done = Some(StopReason::InvariantSubspace);
            } else if st
                .previous
                .is_some_and(|p| (current - p).abs() <= opts.rel_tol * current.abs())
            {
                st.done = Some(StopReason::Converged);
            } else if n >= max_iter {
                st.done = Some(StopReason::MaxIterations);
            }
            st.previous = Some(current);
            if st.done.is_none() {
                if st.basis.ncols() <= n {
                    let grown = (2 * st.basis.ncols()).min(max_iter.max(n + 1));
                    st.basis = std::mem::replace(&mut st.basis, Matrix::zeros(0, 0))
                        .resize_horizontally(grown, 0.0);
                }
                st.basis.set_column(n, &(w / b));
            }
        }
    }
    Ok(states.into_iter().map(ColumnState::into_run).collect())
}

pub fn lanczos(
    op: &dyn LinearOperator,
    z: &Vector,
    f: MatrixFunction,
    opts: &LanczosOptions,
) -> Result<LanczosRun> {
    let z = Matrix::from_column_slice(z.len(), 1, z.as_slice());
    lanczos_block(op, &z, f, opts)
        .map(|mut runs| runs.pop().expect("one column"))
        .map_err(|e| match e {
            Error::InSample { source, .. } => *source,
            other => other,
        })
}

/// `f(E) z` by Lanczos.
pub fn lanczos_apply_f(
    op: &dyn LinearOperator,
    z: &Vector,
    f: MatrixFunction,
    opts: &LanczosOptions,
) -> Result<(Vector, LanczosRun)> {
    let run = lanczos(op, z, f, opts)?;
    Ok((run.apply_f(f)?, run))
}

/// `f(E) Z` column by column, in lockstep.
pub fn lanczos_apply_f_block(
    op: &dyn LinearOperator,
    z: &Matrix,
    f: MatrixFunction,
    opts: &LanczosOptions,
) -> Result<(Matrix, Vec<usize>)> {
    let runs = lanczos_block(op, z, f, opts)?;
    let mut out = Matrix::zeros(z.nrows(), z.ncols());
    let mut iterations = Vec::with_capacity(runs.len());
    for (c, run) in runs.iter().enumerate() {
        let col = run.apply_f(f).map_err(|e| Error::InSample {
            index: c,
            source: Box::new(e),
        })?;
        out.set_column(c, &col);
        iterations.push(run.iterations);
    }
    Ok((out, iterations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Hutchinson,
    Slq,
    XNysTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEstimate {
    pub estimator: Estimator,
    pub value: f64,
    pub n_samples: usize,
    /// Per-probe terms whose mean is `value`.
    pub per_sample: Vec<f64>,
    /// Lanczos iterations per probe (empty when no Lanczos was run).
    pub iterations: Vec<usize>,
    pub std_dev: f64,
    pub seed: u64,
}

impl TraceEstimate {
    fn from_terms(estimator: Estimator, per_sample: Vec<f64>, iterations: Vec<usize>, seed: u64) -> Self {
        let n = per_sample.len();
        let value = per_sample.iter().sum::<f64>() / n as f64;
        let std_dev = if n > 1 {
            (per_sample.iter().map(|x| (x - value).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            estimator,
            value,
            n_samples: n,
            per_sample,
            iterations,
            std_dev,
            seed,
        }
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            0.0
        } else {
            self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
        }
    }

    /// The estimate restricted to its first `n` probes.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_samples {
            return Err(Error::InvalidArgument(format!(
                "prefix {n} of {} samples",
                self.n_samples
            )));
        }
        if self.estimator == Estimator::XNysTrace {
            return Err(Error::InvalidArgument(
                "leave-one-out terms depend on the full test matrix".into(),
            ));
        }
        let iterations = self.iterations.iter().take(n).copied().collect();
        Ok(Self::from_terms(
            self.estimator,
            self.per_sample[..n].to_vec(),
            iterations,
            self.seed,
        ))
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("at least one sample is required".into()))
    } else {
        Ok(())
    }
}

/// Rademacher probes `z_0 … z_{n-1}` as columns.
pub fn rademacher_probes(d: usize, n: usize, seed: u64) -> Matrix {
    let mut z = Matrix::zeros(d, n);
    for i in 0..n {
        z.set_column(i, &rademacher_vector(&mut stream_rng(seed, Purpose::Probe, i as u64), d));
    }
    z
}

/// Gaussian test matrix with columns from per-column substreams.
pub fn gaussian_test_matrix(d: usize, n: usize, seed: u64) -> Matrix {
    let mut z = Matrix::zeros(d, n);
    for i in 0..n {
        z.set_column(i, &gaussian_vector(&mut stream_rng(seed, Purpose::NystromTest, i as u64), d));
    }
    z
}

/// Hutchinson's estimator on an operator whose action is already `Ψ`.
pub fn hutchinson(psi: &dyn LinearOperator, n: usize, seed: u64) -> Result<TraceEstimate> {
    check_samples(n)?;
    let d = psi.rows();
    check_dim("Hutchinson operator must be square", d, psi.cols())?;
    let z = rademacher_probes(d, n, seed);
    let pz = psi.apply_block(&z);
    let terms = (0..n).map(|i| z.column(i).dot(&pz.column(i))).collect();
    Ok(TraceEstimate::from_terms(Estimator::Hutchinson, terms, Vec::new(), seed))
}

/// Stochastic Lanczos quadrature: `(d/N) Σ e₁ᵀ f(T_ℓ) e₁` over Rademacher probes.
pub fn slq_trace(
    op: &dyn LinearOperator,
    f: MatrixFunction,
    n: usize,
    seed: u64,
    opts: &LanczosOptions,
) -> Result<TraceEstimate> {
    check_samples(n)?;
    let z = rademacher_probes(op.rows(), n, seed);
    let runs = lanczos_block(op, &z, f, opts)?;
    let mut terms = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    for (i, run) in runs.iter().enumerate() {
        terms.push(run.quadrature(f).map_err(|e| Error::InSample {
            index: i,
            source: Box::new(e),
        })?);
        iterations.push(run.iterations);
    }
    Ok(TraceEstimate::from_terms(Estimator::Slq, terms, iterations, seed))
}

/// Leave-one-out Nyström trace terms from a test matrix `Ω` and `Y = ΨΩ`:
/// `tr Ψ⟨Ω₋ⱼ⟩ + ω_jᵀ(Ψ − Ψ⟨Ω₋ⱼ⟩)ω_j` for each column `j`.
pub fn xnystrace_terms(omega: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
    let (d, n) = omega.shape();
    check_dim("sketch rows", d, y.nrows())?;
    check_dim("sketch columns", n, y.ncols())?;
    if n < 2 {
        return Err(Error::InvalidArgument("the Nyström estimator needs at least two columns".into()));
    }
    if n > d {
        return Err(Error::InvalidArgument(format!("{n} test vectors exceed dimension {d}")));
    }
    let core = symmetrize(&omega.tr_mul(y));
    let gram = y.tr_mul(y);
    let mut terms = Vec::with_capacity(n);
    for j in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&i| i != j).collect();
        let h = core.select_rows(&keep).select_columns(&keep);
        let g = gram.select_rows(&keep).select_columns(&keep);
        let hp = pinv_symmetric(&h, NYSTROM_PINV_THRESHOLD);
        let b = core.column(j).select_rows(&keep);
        let nystrom_trace = (&hp * g).trace();
        let residual = omega.column(j).dot(&y.column(j)) - b.dot(&(&hp * &b));
        terms.push(nystrom_trace + residual);
    }
    Ok(terms)
}

/// Nyström estimator on an operator whose action is already `Ψ` (PSD).
pub fn xnystrace(psi: &dyn LinearOperator, n: usize, seed: u64) -> Result<TraceEstimate> {
    let omega = gaussian_test_matrix(psi.rows(), n, seed);
    let y = psi.apply_block(&omega);
    let terms = xnystrace_terms(&omega, &y)?;
    Ok(TraceEstimate::from_terms(Estimator::XNysTrace, terms, Vec::new(), seed))
}

/// Nyström estimate of `logdet E` for SPD `E = I + AAᵀ`, with `Ψ = log E`
/// applied to the test matrix by Lanczos.
pub fn xnystrace_logdet(
    e: &dyn LinearOperator,
    n: usize,
    seed: u64,
    opts: &LanczosOptions,
) -> Result<TraceEstimate> {
    let d = e.rows();
    if n < 2 || n > d {
        return Err(Error::InvalidArgument(format!(
            "need 2 ≤ N ≤ d for the Nyström estimator, got N = {n}, d = {d}"
        )));
    }
    let omega = gaussian_test_matrix(d, n, seed);
    let (y, iterations) = lanczos_apply_f_block(e, &omega, MatrixFunction::Log, opts)?;
    let terms = xnystrace_terms(&omega, &y)?;
    Ok(TraceEstimate::from_terms(Estimator::XNysTrace, terms, iterations, seed))
}

/// `Ψ⟨X⟩ = (ΨX)(XᵀΨX)⁺(ΨX)ᵀ`, dense.
pub fn nystrom_approximation(x: &Matrix, psi_x: &Matrix) -> Matrix {
    let core = pinv_symmetric(&symmetrize(&x.tr_mul(psi_x)), NYSTROM_PINV_THRESHOLD);
    psi_x * core * psi_x.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use crate::operators::{DenseOperator, IdentityOperator};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn dense_f(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
        let eig = SymmetricEigen::new(m.clone());
        let fv = eig.eigenvalues.map(f);
        &eig.eigenvectors * Matrix::from_diagonal(&fv) * eig.eigenvectors.transpose()
    }

    fn random_spd(d: usize, seed: u64) -> Matrix {
        let g = crate::rng::gaussian_matrix(&mut stream_rng(seed, Purpose::Instance, 0), d, d);
        Matrix::identity(d, d) + &g * g.transpose() / d as f64
    }

    fn random_indefinite(d: usize, seed: u64) -> Matrix {
        let g = crate::rng::gaussian_matrix(&mut stream_rng(seed, Purpose::Instance, 1), d, d);
        let q = crate::linalg::orthonormalize(&g);
        let ev = Vector::from_fn(d, |i, _| if i % 2 == 0 { 1.0 + i as f64 } else { -0.5 - i as f64 });
        &q * Matrix::from_diagonal(&ev) * q.transpose()
    }

    #[test]
    fn identity_gives_zero_in_one_iteration() {
        let op = IdentityOperator { n: 7 };
        let z = Vector::from_element(7, 1.0);
        let (fz, run) = lanczos_apply_f(&op, &z, MatrixFunction::Log, &LanczosOptions::default()).unwrap();
        assert_eq!(run.iterations, 1);
        assert!(fz.amax() < 1e-14);
    }

    #[test]
    fn diagonal_exponentials() {
        let e = std::f64::consts::E;
        let op = DenseOperator::new(Matrix::from_diagonal(&Vector::from_vec(vec![e, e * e, e * e * e])));
        let z = Vector::from_element(3, 1.0 / 3f64.sqrt());
        let (fz, run) = lanczos_apply_f(&op, &z, MatrixFunction::Log, &LanczosOptions::default()).unwrap();
        assert!(run.iterations <= 3);
        let expect = Vector::from_vec(vec![1.0, 2.0, 3.0]) / 3f64.sqrt();
        assert!((fz - expect).amax() < 1e-10);
    }

    #[test]
    fn log_abs_matches_dense_on_indefinite() {
        let m = random_indefinite(30, 4);
        let op = DenseOperator::new(m.clone());
        let z = gaussian_vector(&mut stream_rng(1, Purpose::Probe, 0), 30);
        let (fz, _) = lanczos_apply_f(&op, &z, MatrixFunction::LogAbs, &LanczosOptions::default()).unwrap();
        let expect = dense_f(&m, |x| x.abs().ln()) * &z;
        assert!((fz - &expect).norm() <= 1e-6 * expect.norm());
    }

    #[test]
    fn log_rejects_indefinite() {
        let m = random_indefinite(10, 2);
        let z = Vector::from_element(10, 1.0);
        let err = lanczos(&DenseOperator::new(m), &z, MatrixFunction::Log, &LanczosOptions::default());
        assert!(matches!(err, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn log_abs_rejects_singular() {
        let mut m = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, -1.0, 3.0, 0.0]));
        m[(0, 3)] = 0.0;
        let z = Vector::from_element(4, 1.0);
        let run = lanczos(&DenseOperator::new(m), &z, MatrixFunction::LogAbs, &LanczosOptions::default()).unwrap();
        assert!(matches!(run.quadrature(MatrixFunction::LogAbs), Err(Error::Singular(_))));
    }

    #[test]
    fn basis_orthonormal_and_recurrence_holds() {
        let m = random_spd(60, 3);
        let op = DenseOperator::new(m.clone());
        let z = gaussian_vector(&mut stream_rng(3, Purpose::Probe, 0), 60);
        let opts = LanczosOptions {
            rel_tol: 0.0,
            max_iter: Some(25),
            ..Default::default()
        };
        let run = lanczos(&op, &z, MatrixFunction::Log, &opts).unwrap();
        assert_eq!(run.iterations, 25);
        assert_eq!(run.stop_reason, StopReason::MaxIterations);
        let v = &run.basis;
        assert!((v.tr_mul(v) - Matrix::identity(25, 25)).amax() <= 1e-10);
        let mut resid = &m * v - v * run.tridiagonal();
        // Last column carries β v_{n+1}; remove it by its norm.
        let last = resid.column(24).norm();
        assert!((last - run.beta[24]).abs() <= 1e-8 * m.norm());
        resid.column_mut(24).fill(0.0);
        assert!(resid.amax() <= 1e-8 * m.norm());
    }

    #[test]
    fn full_krylov_quadrature_is_exact() {
        let m = random_spd(12, 5);
        let op = DenseOperator::new(m.clone());
        let z = rademacher_vector(&mut stream_rng(5, Purpose::Probe, 0), 12);
        let opts = LanczosOptions {
            rel_tol: 0.0,
            ..Default::default()
        };
        let run = lanczos(&op, &z, MatrixFunction::Log, &opts).unwrap();
        let exact = z.dot(&(dense_f(&m, f64::ln) * &z));
        assert!((run.quadrature(MatrixFunction::Log).unwrap() - exact).abs() <= 1e-10 * exact.abs());
    }

    #[test]
    fn both_stop_rules_converge_to_same_value() {
        let m = random_spd(80, 6);
        let op = DenseOperator::new(m);
        let z = rademacher_vector(&mut stream_rng(6, Purpose::Probe, 0), 80);
        let a = lanczos(&op, &z, MatrixFunction::Log, &LanczosOptions::default()).unwrap();
        let b = lanczos(
            &op,
            &z,
            MatrixFunction::Log,
            &LanczosOptions {
                stop_rule: StopRule::TraceChange,
                ..Default::default()
            },
        )
        .unwrap();
        let qa = a.quadrature(MatrixFunction::Log).unwrap();
        let qb = b.quadrature(MatrixFunction::Log).unwrap();
        assert!((qa - qb).abs() <= 1e-8 * qa.abs());
    }

    #[test]
    fn more_iterations_do_not_move_a_converged_value() {
        let m = random_spd(100, 8);
        let op = DenseOperator::new(m);
        let opts = LanczosOptions {
            max_iter: Some(60),
            ..Default::default()
        };
        let a = slq_trace(&op, MatrixFunction::Log, 3, 2, &opts).unwrap();
        let b = slq_trace(&op, MatrixFunction::Log, 3, 2, &LanczosOptions::default()).unwrap();
        assert!(a.iterations.iter().all(|&n| n <= 60));
        if a.iterations.iter().all(|&n| n < 60) {
            assert!((a.value - b.value).abs() <= 10.0 * 1e-10 * b.value.abs());
        }
    }

    #[test]
    fn constant_operator_has_zero_variance() {
        let c = 3.5f64;
        let op = DenseOperator::new(Matrix::identity(9, 9) * c);
        let est = slq_trace(&op, MatrixFunction::Log, 5, 1, &LanczosOptions::default()).unwrap();
        for t in &est.per_sample {
            assert!((t - 9.0 * c.ln()).abs() < 1e-12);
        }
        assert!(est.std_dev < 1e-12);
    }

    #[test]
    fn slq_is_deterministic_and_prefix_stable() {
        let op = DenseOperator::new(random_spd(40, 9));
        let opts = LanczosOptions::default();
        let a = slq_trace(&op, MatrixFunction::Log, 6, 11, &opts).unwrap();
        let b = slq_trace(&op, MatrixFunction::Log, 6, 11, &opts).unwrap();
        assert_eq!(a, b);
        let c = slq_trace(&op, MatrixFunction::Log, 3, 11, &opts).unwrap();
        // Same probes; block width only changes the summation order.
        let p = a.prefix(3).unwrap();
        assert_eq!(p.iterations, c.iterations);
        assert!((p.value - c.value).abs() <= 1e-12 * c.value.abs());
        let mean: f64 = a.per_sample.iter().sum::<f64>() / 6.0;
        assert!((a.value - mean).abs() < 1e-12);
    }

    #[test]
    fn hutchinson_is_unbiased_on_exact_log() {
        let m = random_spd(15, 12);
        let psi = dense_f(&m, f64::ln);
        let exact = psi.trace();
        let n = 100_000;
        let est = hutchinson(&DenseOperator::new(psi), n, 5).unwrap();
        let se = est.std_dev / (n as f64).sqrt();
        assert!((est.value - exact).abs() <= 3.0 * se);
    }

    #[test]
    fn nystrom_zero_and_small_cases() {
        let psi = DenseOperator::new(Matrix::zeros(10, 10));
        assert_eq!(xnystrace(&psi, 4, 1).unwrap().value, 0.0);
        assert!(xnystrace(&psi, 11, 1).is_err());
        assert!(xnystrace(&psi, 1, 1).is_err());
        let e = IdentityOperator { n: 10 };
        assert!(xnystrace_logdet(&e, 3, 1, &LanczosOptions::default()).unwrap().value.abs() < 1e-14);
    }

    #[test]
    fn nystrom_is_below_psi() {
        let m = random_spd(25, 13);
        let psi = dense_f(&m, f64::ln);
        let x = gaussian_test_matrix(25, 6, 2);
        let approx = nystrom_approximation(&x, &(&psi * &x));
        assert!(symmetric_eigenvalues(&(&psi - &approx)).min() >= -1e-8);
        assert!(approx.trace() <= psi.trace() + 1e-10);
    }

    #[test]
    fn nystrom_exact_on_low_rank() {
        // Rank-3 Ψ is captured exactly by every leave-one-out sketch of width ≥ 3.
        let g = crate::rng::gaussian_matrix(&mut stream_rng(3, Purpose::Instance, 0), 20, 3);
        let psi = &g * g.transpose();
        let est = xnystrace(&DenseOperator::new(psi.clone()), 5, 4).unwrap();
        assert!((est.value - psi.trace()).abs() <= 1e-8 * psi.trace());
    }

    #[test]
    fn nystrom_beats_hutchinson_on_decaying_spectrum() {
        let d = 20;
        let g = crate::rng::gaussian_matrix(&mut stream_rng(14, Purpose::Instance, 0), d, d);
        let q = crate::linalg::orthonormalize(&g);
        let ev = Vector::from_fn(d, |i, _| 0.6f64.powi(i as i32));
        let psi = &q * Matrix::from_diagonal(&ev) * q.transpose();
        let exact = psi.trace();
        let op = DenseOperator::new(psi);
        let (mut err_h, mut err_x) = (0.0, 0.0);
        for seed in 0..100 {
            err_h += (hutchinson(&op, 8, seed).unwrap().value - exact).abs();
            err_x += (xnystrace(&op, 8, seed).unwrap().value - exact).abs();
        }
        assert!(err_x < err_h);
    }

    #[test]
    fn lanczos_nystrom_matches_dense_nystrom() {
        let m = random_spd(30, 15);
        let psi = dense_f(&m, f64::ln);
        let opts = LanczosOptions {
            rel_tol: 1e-15,
            ..Default::default()
        };
        let via_lanczos = xnystrace_logdet(&DenseOperator::new(m), 6, 3, &opts).unwrap();
        let dense = xnystrace(&DenseOperator::new(psi), 6, 3).unwrap();
        let rel = (via_lanczos.value - dense.value).abs() / dense.value.abs();
        assert!(rel <= 1e-8, "{rel:e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn slq_exact_when_krylov_space_is_full(seed in 0u64..1000, d in 2usize..10) {
            let m = random_spd(d, seed);
            let op = DenseOperator::new(m.clone());
            let opts = LanczosOptions { rel_tol: 0.0, ..Default::default() };
            let est = slq_trace(&op, MatrixFunction::Log, 2, seed, &opts).unwrap();
            let psi = dense_f(&m, f64::ln);
            let z = rademacher_probes(d, 2, seed);
            for i in 0..2 {
                let exact = z.column(i).dot(&(&psi * z.column(i)));
                prop_assert!((est.per_sample[i] - exact).abs() <= 1e-10 * exact.abs().max(1.0));
            }
        }
    }
}
