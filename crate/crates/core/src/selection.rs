//! Sensor selection: column subset selection on the reshaped criterion matrix
//! (deterministic and sketched, adjoint-free), greedy, exhaustive and random
//! baselines, and the near-optimality bound.

use std::sync::Arc;

use rand::seq::index;

use crate::assimilation::DAProblem;
use crate::covariance::{AuditedCovariance, Capabilities, CovarianceAction, CovarianceOperator};
use crate::criteria::{criterion_selected, GramEvaluator};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{cpqr_pivots, orthonormalize, tridiagonal_eigen, EigenvectorRows, Matrix, Vector};
use crate::operators::{CouplingDirection, LinearOperator, SensorDesign};
use crate::rng::{gaussian_matrix, gaussian_vector, stream_rng, Purpose};

/// Default number of designs exhaustive search may enumerate.
pub const DEFAULT_EXHAUSTIVE_BUDGET: u128 = 200_000;

/// `Φ` for a design given by sorted, distinct indices.
pub trait DesignEvaluator {
    fn n_s(&self) -> usize;
    fn evaluate_indices(&self, indices: &[usize]) -> Result<f64>;
}

impl DesignEvaluator for GramEvaluator {
    fn n_s(&self) -> usize {
        GramEvaluator::n_s(self)
    }
    fn evaluate_indices(&self, indices: &[usize]) -> Result<f64> {
        GramEvaluator::evaluate_indices(self, indices)
    }
}

/// Evaluates every design from scratch with the dense exact criterion.
pub struct ExactEvaluator<'a> {
    pub problem: &'a DAProblem,
}

impl DesignEvaluator for ExactEvaluator<'_> {
    fn n_s(&self) -> usize {
        self.problem.dims().n_s()
    }
    fn evaluate_indices(&self, indices: &[usize]) -> Result<f64> {
        let design = SensorDesign::new(self.n_s(), indices.to_vec())?;
        Ok(criterion_selected(self.problem, &design, None)?.value)
    }
}

/// Permutes `A = [A_0 … A_{n_T}]` (blocks of `n_s` columns) into
/// `A_R` with `n_s` columns, column `s` stacking column `s` of every block.
pub fn reshape_blocks(a: &Matrix, n_s: usize, n_blocks: usize) -> Result<Matrix> {
    check_dim("reshape columns", n_s * n_blocks, a.ncols())?;
    let r = a.nrows();
    let mut out = Matrix::zeros(r * n_blocks, n_s);
    for l in 0..n_blocks {
        out.view_mut((l * r, 0), (r, n_s))
            .copy_from(&a.columns(l * n_s, n_s));
    }
    Ok(out)
}

/// Matrix-free `A_R` over a matrix-free `A`.
pub struct ReshapedOperator {
    a: Arc<dyn LinearOperator>,
    n_s: usize,
    n_blocks: usize,
}

impl ReshapedOperator {
    pub fn new(a: Arc<dyn LinearOperator>, n_s: usize, n_blocks: usize) -> Result<Self> {
        check_dim("reshape columns", n_s * n_blocks, a.cols())?;
        Ok(Self { a, n_s, n_blocks })
    }
}

impl LinearOperator for ReshapedOperator {
    fn rows(&self) -> usize {
        self.a.rows() * self.n_blocks
    }
    fn cols(&self) -> usize {
        self.n_s
    }
    fn apply(&self, x: &Vector) -> Vector {
        let m = Matrix::from_column_slice(x.len(), 1, x.as_slice());
        self.apply_block(&m).column(0).into_owned()
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        let m = Matrix::from_column_slice(y.len(), 1, y.as_slice());
        self.apply_transpose_block(&m).column(0).into_owned()
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        let r = self.a.rows();
        let mut out = Matrix::zeros(r * self.n_blocks, x.ncols());
        for l in 0..self.n_blocks {
            let mut z = Matrix::zeros(self.a.cols(), x.ncols());
            z.view_mut((l * self.n_s, 0), (self.n_s, x.ncols())).copy_from(x);
            out.view_mut((l * r, 0), (r, x.ncols()))
                .copy_from(&self.a.apply_block(&z));
        }
        out
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let r = self.a.rows();
        let mut out = Matrix::zeros(self.n_s, y.ncols());
        for l in 0..self.n_blocks {
            let z = self.a.apply_transpose_block(&y.rows(l * r, r).into_owned());
            out += z.rows(l * self.n_s, self.n_s);
        }
        out
    }
}

/// Leading singular triplets' values and right vectors (`cols × rank`).
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub values: Vec<f64>,
    pub v: Matrix,
}

/// Dense SVD with singular values sorted descending.
pub fn dense_svd(m: &Matrix, rank: usize) -> TruncatedSvd {
    let n = m.ncols();
    if m.nrows() == 0 || n == 0 {
        return TruncatedSvd {
            values: vec![0.0; rank.min(n)],
            v: Matrix::zeros(n, rank.min(n)),
        };
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let r = rank.min(order.len());
    let mut v = Matrix::zeros(n, r);
    let mut values = Vec::with_capacity(r);
    for (c, &i) in order.iter().take(r).enumerate() {
        values.push(svd.singular_values[i]);
        v.set_column(c, &v_t.row(i).transpose());
    }
    TruncatedSvd { values, v }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SvdMethod {
    /// Range finder with `power_iterations` subspace iterations.
    Randomized { oversampling: usize, power_iterations: usize, seed: u64 },
    /// Golub–Kahan–Lanczos bidiagonalization with full reorthogonalization.
    GolubKahan { extra_steps: usize, seed: u64 },
}

impl Default for SvdMethod {
    fn default() -> Self {
        SvdMethod::Randomized {
            oversampling: 10,
            power_iterations: 2,
            seed: 0,
        }
    }
}

pub fn truncated_svd(op: &dyn LinearOperator, rank: usize, method: &SvdMethod) -> Result<TruncatedSvd> {
    let (m, n) = (op.rows(), op.cols());
    if rank == 0 || rank > n.min(m) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} for a {m}×{n} operator"
        )));
    }
    match *method {
        SvdMethod::Randomized {
            oversampling,
            power_iterations,
            seed,
        } => {
            let width = (rank + oversampling).min(n).min(m);
            let omega = gaussian_matrix(&mut stream_rng(seed, Purpose::RandomizedSvd, 0), n, width);
            let mut q = orthonormalize(&op.apply_block(&omega));
            for _ in 0..power_iterations {
                let z = orthonormalize(&op.apply_transpose_block(&q));
                q = orthonormalize(&op.apply_block(&z));
            }
            // B = Qᵀ A, formed as (Aᵀ Q)ᵀ.
            let b = op.apply_transpose_block(&q).transpose();
            Ok(dense_svd(&b, rank))
        }
        SvdMethod::GolubKahan { extra_steps, seed } => {
            let steps = (rank + extra_steps).min(n).min(m);
            let mut v_basis = Matrix::zeros(n, steps);
            let mut u_basis = Matrix::zeros(m, steps);
            let mut alpha: Vec<f64> = Vec::with_capacity(steps);
            let mut beta: Vec<f64> = Vec::with_capacity(steps);
            let mut v = gaussian_vector(&mut stream_rng(seed, Purpose::RandomizedSvd, 1), n);
            v /= v.norm();
            let mut done = 0;
            for j in 0..steps {
                v_basis.set_column(j, &v);
                let mut u = op.apply(&v);
                if j > 0 {
                    u.axpy(-beta[j - 1], &u_basis.column(j - 1), 1.0);
                }
                for _ in 0..2 {
                    let basis = u_basis.columns(0, j);
                    let c = basis.tr_mul(&u);
                    u -= &basis * c;
                }
                let a = u.norm();
                alpha.push(a);
                done = j + 1;
                if a <= 1e-14 * alpha[0].max(1e-300) {
                    break;
                }
                u /= a;
                u_basis.set_column(j, &u);
                if j + 1 == steps {
                    break;
                }
                let mut w = op.apply_transpose(&u);
                w.axpy(-a, &v, 1.0);
                for _ in 0..2 {
                    let basis = v_basis.columns(0, j + 1);
                    let c = basis.tr_mul(&w);
                    w -= &basis * c;
                }
                let b = w.norm();
                beta.push(b);
                if b <= 1e-14 * a {
                    break;
                }
                v = w / b;
            }
            // Right vectors of the upper bidiagonal B from the eigenvectors of BᵀB.
            let k = done;
            let mut diag = vec![0.0; k];
            let mut off = vec![0.0; k.saturating_sub(1)];
            for i in 0..k {
                diag[i] = alpha[i].powi(2) + if i > 0 { beta[i - 1].powi(2) } else { 0.0 };
                if i + 1 < k {
                    off[i] = alpha[i] * beta[i];
                }
            }
            let eig = tridiagonal_eigen(&diag, &off, EigenvectorRows::All)?;
            let r = rank.min(k);
            let mut values = Vec::with_capacity(r);
            let mut right = Matrix::zeros(k, r);
            for c in 0..r {
                let i = k - 1 - c;
                values.push(eig.values[i].max(0.0).sqrt());
                right.set_column(c, &eig.vectors.column(i));
            }
            Ok(TruncatedSvd {
                values,
                v: v_basis.columns(0, k) * right,
            })
        }
    }
}

/// A design picked by column subset selection.
#[derive(Debug, Clone)]
pub struct SubsetSelection {
    pub design: SensorDesign,
    /// Leading singular values of the reshaped matrix.
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
}

/// CPQR on the leading right singular vectors of `A_R`.
pub fn select_columns(a_r: &dyn LinearOperator, k: usize, svd_rank: usize, method: &SvdMethod) -> Result<SubsetSelection> {
    let n_s = a_r.cols();
    if k == 0 || k > n_s {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {n_s} sensors")));
    }
    let rank = svd_rank.max(k).min(n_s).min(a_r.rows());
    if rank < k {
        return Err(Error::InvalidArgument(format!(
            "reshaped matrix has only {} rows for {k} sensors",
            a_r.rows()
        )));
    }
    let svd = truncated_svd(a_r, rank, method)?;
    let top = svd.values.first().copied().unwrap_or(0.0);
    let numerical_rank = svd.values.iter().filter(|&&s| s > 1e-12 * top).count();
    let used = numerical_rank.clamp(1, k);
    let vt = svd.v.columns(0, used).transpose();
    let mut pivots = cpqr_pivots(&vt, k);
    pivots.sort_unstable();
    Ok(SubsetSelection {
        design: SensorDesign::new(n_s, pivots)?,
        singular_values: svd.values,
        numerical_rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GksOptions {
    /// Number of right singular vectors; defaults to `k`.
    pub svd_rank: Option<usize>,
    pub svd: SvdMethod,
}

impl Default for GksOptions {
    fn default() -> Self {
        Self {
            svd_rank: None,
            svd: SvdMethod::default(),
        }
    }
}

/// Column subset selection on `A_R` for the criterion matrix `A`.
pub fn gks_select(
    a: Arc<dyn LinearOperator>,
    n_s: usize,
    n_blocks: usize,
    k: usize,
    opts: &GksOptions,
) -> Result<SubsetSelection> {
    let a_r = ReshapedOperator::new(a, n_s, n_blocks)?;
    select_columns(&a_r, k, opts.svd_rank.unwrap_or(k), &opts.svd)
}

/// `logdet(I + Σ_K²/ζ²) ≤ Φ(S) ≤ logdet(I + Σ_K²)` with `K = (n_T+1)k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GksBound {
    pub lower: f64,
    pub upper: f64,
    /// `1/σ_min(V_Kᵀ(I⊗S))`; infinite when the selected block is singular.
    pub zeta: f64,
    /// CPQR constant `√(n_s − k)·2^k`.
    pub cpqr_factor: f64,
}

pub fn gks_bound(a: &Matrix, n_s: usize, n_blocks: usize, design: &SensorDesign) -> Result<GksBound> {
    check_dim("bound columns", n_s * n_blocks, a.ncols())?;
    let k = design.k();
    let big_k = n_blocks * k;
    if big_k > 2000 {
        return Err(Error::TooLarge { size: big_k, limit: 2000 });
    }
    if big_k > a.ncols().min(a.nrows()) {
        return Err(Error::InvalidArgument("K exceeds the rank bound of A".into()));
    }
    let svd = dense_svd(a, big_k);
    let idx = design.stacked_indices(n_blocks);
    let sub = Matrix::from_fn(big_k, big_k, |i, j| svd.v[(idx[j], i)]);
    let smin = crate::linalg::singular_values(&sub).iter().copied().fold(f64::INFINITY, f64::min);
    let zeta = if smin > 0.0 { 1.0 / smin } else { f64::INFINITY };
    let upper: f64 = svd.values.iter().map(|s| (1.0 + s * s).ln()).sum();
    let lower: f64 = if zeta.is_finite() {
        svd.values.iter().map(|s| (1.0 + (s / zeta).powi(2)).ln()).sum()
    } else {
        0.0
    };
    Ok(GksBound {
        lower,
        upper,
        zeta,
        cpqr_factor: ((n_s - k) as f64).sqrt() * 2f64.powi(k as i32),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RafOptions {
    pub oversampling: usize,
    /// Overrides `D = n_T·k + p`.
    pub sketch_rows: Option<usize>,
    pub seed: u64,
    pub svd: SvdMethod,
}

impl Default for RafOptions {
    fn default() -> Self {
        Self {
            oversampling: 20,
            sketch_rows: None,
            seed: 0,
            svd: SvdMethod::default(),
        }
    }
}

impl RafOptions {
    pub fn sketch_rows_for(&self, n_t: usize, k: usize) -> usize {
        self.sketch_rows.unwrap_or(n_t * k + self.oversampling)
    }
}

/// Result of the sketched selection, with the sketch for diagnostics.
#[derive(Debug, Clone)]
pub struct RafSelection {
    pub selection: SubsetSelection,
    /// `Y = ΩA`, `D × N_m`.
    pub sketch: Matrix,
    pub sketch_rows: usize,
    /// Evolution transpose applications made during selection.
    pub transpose_applications: usize,
}

/// `Yᵀ = G_R⁻¹ O L⁻¹ G Ωᵀ` with Gaussian `Ω` (entries `N(0, 1/D)`),
/// using only forward applications of the evolution family.
pub fn adjoint_free_sketch(problem: &DAProblem, sketch_rows: usize, seed: u64) -> Result<Matrix> {
    let model = Arc::new(AuditedCovariance::new(
        Arc::new(problem.prior_model().covariance),
        Capabilities::FACTOR,
        "sketch model covariance",
    ));
    let noise = Arc::new(AuditedCovariance::new(
        Arc::new(problem.noise().clone()),
        Capabilities::WHITEN,
        "sketch noise covariance",
    ));
    let factor = CovarianceOperator::new(model, CovarianceAction::Factor);
    let whiten = CovarianceOperator::new(noise, CovarianceAction::Whiten);
    let omega_t = gaussian_matrix(
        &mut stream_rng(seed, Purpose::Sketch, 0),
        factor.cols(),
        sketch_rows,
    ) / (sketch_rows as f64).sqrt();
    let pushed = factor.apply_block(&omega_t);
    let traj = problem.coupling(CouplingDirection::Inverse).apply_block(&pushed);
    let obs = problem.observation().apply_block(&traj);
    Ok(whiten.apply_block(&obs).transpose())
}

/// Randomized adjoint-free selection: GKS on the reshaped sketch `Y_R`.
pub fn raf_select(problem: &DAProblem, k: usize, opts: &RafOptions) -> Result<RafSelection> {
    let dims = problem.dims();
    let d = opts.sketch_rows_for(dims.n_t(), k);
    if d < k {
        return Err(Error::InvalidArgument(format!("sketch size {d} is below k = {k}")));
    }
    let before = problem.evolution().transpose_count();
    let y = adjoint_free_sketch(problem, d, opts.seed)?;
    let y_r = reshape_blocks(&y, dims.n_s(), dims.n_blocks())?;
    let selection = select_columns(&crate::operators::DenseOperator::new(y_r), k, k, &opts.svd)?;
    let transpose_applications = problem.evolution().transpose_count() - before;
    assert_eq!(transpose_applications, 0, "sketched selection applied an evolution adjoint");
    Ok(RafSelection {
        selection,
        sketch: y,
        sketch_rows: d,
        transpose_applications,
    })
}

/// Greedy design and the marginal gain of each step.
#[derive(Debug, Clone)]
pub struct GreedyResult {
    pub design: SensorDesign,
    pub value: f64,
    pub gains: Vec<f64>,
}

pub fn greedy_select(evaluator: &dyn DesignEvaluator, k: usize) -> Result<GreedyResult> {
    let n_s = evaluator.n_s();
    if k > n_s {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {n_s} sensors")));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut value = 0.0;
    let mut gains = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n_s).filter(|j| !chosen.contains(j)) {
            let mut trial = chosen.clone();
            trial.push(j);
            trial.sort_unstable();
            let v = evaluator.evaluate_indices(&trial)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let (j, v) = best.expect("a candidate remains");
        gains.push(v - value);
        value = v;
        chosen.push(j);
    }
    chosen.sort_unstable();
    Ok(GreedyResult {
        design: SensorDesign::new(n_s, chosen)?,
        value,
        gains,
    })
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Calls `visit` on every k-subset in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut visit: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx)?;
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            if idx[i] < n - k + i {
                break;
            }
            if i == 0 {
                return Ok(());
            }
        }
        if idx[i] >= n - k + i {
            return Ok(());
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `Φ` of every k-subset, in lexicographic order.
pub fn enumerate_designs(evaluator: &dyn DesignEvaluator, k: usize, budget: u128) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = evaluator.n_s();
    let count = binomial(n, k);
    if count > budget {
        return Err(Error::BudgetExceeded { count, budget });
    }
    let mut out = Vec::with_capacity(count as usize);
    for_each_subset(n, k, |s| {
        out.push((s.to_vec(), evaluator.evaluate_indices(s)?));
        Ok(())
    })?;
    Ok(out)
}

/// Best k-subset; ties go to the lexicographically smallest.
pub fn exhaustive_select(evaluator: &dyn DesignEvaluator, k: usize, budget: u128) -> Result<(SensorDesign, f64)> {
    let n = evaluator.n_s();
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {n} sensors")));
    }
    let count = binomial(n, k);
    if count > budget {
        return Err(Error::BudgetExceeded { count, budget });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_subset(n, k, |s| {
        let v = evaluator.evaluate_indices(s)?;
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((s.to_vec(), v));
        }
        Ok(())
    })?;
    let (idx, v) = best.expect("at least one subset");
    Ok((SensorDesign::new(n, idx)?, v))
}

/// `count` uniform k-subsets, draw `i` from its own substream.
pub fn random_designs(n_s: usize, k: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k > n_s {
        return Err(Error::InvalidArgument(format!("cannot draw {k} of {n_s} sensors")));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, Purpose::Designs, i as u64);
            let mut s = index::sample(&mut rng, n_s, k).into_vec();
            s.sort_unstable();
            s
        })
        .collect())
}

/// Random designs with their criterion values.
pub fn random_design_sample(
    evaluator: &dyn DesignEvaluator,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    if count == 0 {
        return Err(Error::InvalidArgument("at least one random design is required".into()));
    }
    random_designs(evaluator.n_s(), k, count, seed)?
        .into_iter()
        .map(|s| {
            let v = evaluator.evaluate_indices(&s)?;
            Ok((s, v))
        })
        .collect()
}

/// `100 · #{other designs with Φ < value} / #{other designs}`, rounded to
/// 0.1; draws identical to `candidate` are not counted.
pub fn percentile(population: &[(Vec<usize>, f64)], candidate: &[usize], value: f64) -> f64 {
    let others: Vec<f64> = population
        .iter()
        .filter(|(s, _)| s.as_slice() != candidate)
        .map(|(_, v)| *v)
        .collect();
    if others.is_empty() {
        return 100.0;
    }
    let below = others.iter().filter(|&&v| v < value).count();
    (1000.0 * below as f64 / others.len() as f64).round() / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{dense_criterion_factor, GramEvaluator};
    use crate::models::random_instance;
    use crate::operators::{densify, DenseOperator};
    use proptest::prelude::*;

    #[test]
    fn reshape_is_a_permutation() {
        let a = Matrix::from_fn(3, 8, |i, j| (10 * i + j) as f64);
        let r = reshape_blocks(&a, 4, 2).unwrap();
        assert_eq!(r.shape(), (6, 4));
        for s in 0..4 {
            for l in 0..2 {
                for i in 0..3 {
                    assert_eq!(r[(l * 3 + i, s)], a[(i, l * 4 + s)]);
                }
            }
        }
        let op = ReshapedOperator::new(Arc::new(DenseOperator::new(a.clone())), 4, 2).unwrap();
        assert_eq!(densify(&op), r);
        assert!(crate::operators::adjoint_defect(&op, 1) < 1e-12);
    }

    #[test]
    fn orthogonal_columns_pick_largest_norms() {
        let norms = [0.5, 3.0, 1.0, 2.5, 0.1];
        let mut a = Matrix::zeros(6, 5);
        for (j, n) in norms.iter().enumerate() {
            a[(j, j)] = *n;
        }
        let sel = select_columns(&DenseOperator::new(a), 2, 2, &SvdMethod::default()).unwrap();
        assert_eq!(sel.design.indices(), &[1, 3]);
    }

    #[test]
    fn svd_methods_agree_with_dense() {
        let m = gaussian_matrix(&mut stream_rng(1, Purpose::Instance, 0), 40, 12);
        let dense = dense_svd(&m, 4);
        for method in [
            SvdMethod::Randomized {
                oversampling: 8,
                power_iterations: 2,
                seed: 3,
            },
            SvdMethod::GolubKahan {
                extra_steps: 8,
                seed: 3,
            },
        ] {
            let t = truncated_svd(&DenseOperator::new(m.clone()), 4, &method).unwrap();
            for (a, b) in t.values.iter().zip(&dense.values) {
                assert!((a - b).abs() <= 1e-8 * b, "{method:?}");
            }
            let overlap = t.v.tr_mul(&dense.v).abs();
            for i in 0..4 {
                assert!((overlap[(i, i)] - 1.0).abs() < 1e-6, "{method:?}");
            }
        }
    }

    #[test]
    fn greedy_first_pick_is_best_single() {
        let p = random_instance(4, 2, 6, 2);
        let g = GramEvaluator::new(&p).unwrap();
        let r = greedy_select(&g, 1).unwrap();
        let best = (0..6)
            .map(|j| (j, g.evaluate_indices(&[j]).unwrap()))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert_eq!(r.design.indices(), &[best.0]);
    }

    #[test]
    fn greedy_gains_decrease() {
        for seed in 0..5 {
            let p = random_instance(4, 2, 6, seed);
            let g = GramEvaluator::new(&p).unwrap();
            let r = greedy_select(&g, 6).unwrap();
            for w in r.gains.windows(2) {
                assert!(w[1] <= w[0] + 1e-10);
            }
        }
    }

    #[test]
    fn exhaustive_matches_independent_enumeration() {
        let p = random_instance(3, 2, 5, 4);
        let g = GramEvaluator::new(&p).unwrap();
        let exact = ExactEvaluator { problem: &p };
        let (design, value) = exhaustive_select(&g, 2, DEFAULT_EXHAUSTIVE_BUDGET).unwrap();
        let mut best = (vec![], f64::MIN);
        for i in 0..5 {
            for j in i + 1..5 {
                let v = exact.evaluate_indices(&[i, j]).unwrap();
                if v > best.1 {
                    best = (vec![i, j], v);
                }
            }
        }
        assert_eq!(design.indices(), best.0.as_slice());
        assert!((value - best.1).abs() <= 1e-10 * value);
        let greedy = greedy_select(&g, 2).unwrap();
        assert!(value >= greedy.value && greedy.value >= 0.0);
        let (full, _) = exhaustive_select(&g, 5, 10).unwrap();
        assert_eq!(full.k(), 5);
        assert!(matches!(
            exhaustive_select(&g, 2, 5),
            Err(Error::BudgetExceeded { count: 10, budget: 5 })
        ));
    }

    #[test]
    fn enumeration_is_lexicographic_and_complete() {
        struct Count(usize);
        impl DesignEvaluator for Count {
            fn n_s(&self) -> usize {
                self.0
            }
            fn evaluate_indices(&self, _: &[usize]) -> Result<f64> {
                Ok(0.0)
            }
        }
        let all = enumerate_designs(&Count(6), 3, 100).unwrap();
        assert_eq!(all.len(), 20);
        assert_eq!(all[0].0, vec![0, 1, 2]);
        assert_eq!(all[19].0, vec![3, 4, 5]);
        assert!(all.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(binomial(28, 5), 98_280);
        assert_eq!(enumerate_designs(&Count(4), 0, 10).unwrap().len(), 1);
    }

    #[test]
    fn percentile_conventions() {
        let pop = vec![(vec![0], 1.0), (vec![1], 2.0), (vec![2], 3.0), (vec![3], 3.0)];
        assert_eq!(percentile(&pop, &[2], 3.0), 66.7);
        assert_eq!(percentile(&pop, &[9], 3.5), 100.0);
        let p = random_instance(3, 1, 5, 6);
        let g = GramEvaluator::new(&p).unwrap();
        let all = enumerate_designs(&g, 2, 100).unwrap();
        let (best, v) = exhaustive_select(&g, 2, 100).unwrap();
        assert_eq!(percentile(&all, best.indices(), v), 100.0);
    }

    #[test]
    fn random_designs_are_reproducible() {
        let a = random_designs(28, 5, 3, 9).unwrap();
        assert_eq!(a, random_designs(28, 5, 3, 9).unwrap());
        assert_eq!(a[0], random_designs(28, 5, 1, 9).unwrap()[0]);
        for s in &a {
            assert_eq!(s.len(), 5);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn gks_within_bound_sandwich() {
        for seed in 0..5 {
            let p = random_instance(5, 2, 6, seed);
            let a = dense_criterion_factor(&p, &SensorDesign::full(6)).unwrap();
            let sel = gks_select(Arc::new(DenseOperator::new(a.clone())), 6, 3, 2, &GksOptions::default()).unwrap();
            let phi = GramEvaluator::from_factor(&a, 6, 3).evaluate(&sel.design).unwrap();
            let b = gks_bound(&a, 6, 3, &sel.design).unwrap();
            assert!(b.lower <= phi + 1e-10 && phi <= b.upper + 1e-10, "{b:?} {phi}");
        }
    }

    #[test]
    fn raf_with_large_sketch_matches_gks() {
        let p = random_instance(4, 2, 5, 3);
        let a = dense_criterion_factor(&p, &SensorDesign::full(5)).unwrap();
        let g = GramEvaluator::from_factor(&a, 5, 3);
        let gks = gks_select(Arc::new(DenseOperator::new(a.clone())), 5, 3, 2, &GksOptions::default()).unwrap();
        let opts = RafOptions {
            sketch_rows: Some(400),
            seed: 5,
            ..Default::default()
        };
        p.evolution().reset_counters();
        let raf = raf_select(&p, 2, &opts).unwrap();
        assert_eq!(p.evolution().transpose_count(), 0);
        assert!(p.evolution().forward_count() > 0);
        let (vg, vr) = (g.evaluate(&gks.design).unwrap(), g.evaluate(&raf.selection.design).unwrap());
        assert!((vg - vr).abs() <= 1e-6 * vg.abs());
    }

    #[test]
    fn raf_rejects_tiny_sketch_and_is_deterministic() {
        let p = random_instance(3, 2, 5, 1);
        let tiny = RafOptions {
            sketch_rows: Some(1),
            ..Default::default()
        };
        assert!(raf_select(&p, 2, &tiny).is_err());
        let a = raf_select(&p, 2, &RafOptions::default()).unwrap();
        let b = raf_select(&p, 2, &RafOptions::default()).unwrap();
        assert_eq!(a.selection.design, b.selection.design);
        assert_eq!(a.sketch, b.sketch);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn selectors_return_k_distinct(seed in 0u64..1000, k in 1usize..5) {
            let p = random_instance(4, 1, 5, seed);
            let g = GramEvaluator::new(&p).unwrap();
            let a = dense_criterion_factor(&p, &SensorDesign::full(5)).unwrap();
            let designs = [
                greedy_select(&g, k).unwrap().design,
                gks_select(Arc::new(DenseOperator::new(a)), 5, 2, k, &GksOptions::default()).unwrap().design,
                raf_select(&p, k, &RafOptions { seed, ..Default::default() }).unwrap().selection.design,
            ];
            for d in designs {
                prop_assert_eq!(d.k(), k);
            }
        }
    }
}
