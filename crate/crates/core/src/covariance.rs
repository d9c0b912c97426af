//! Gaussian covariance models for the background, model error and observation
//! noise, plus capability auditing of which actions a consumer may use.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::Cholesky;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{logdet_spd, spectral_norm_symmetric, Matrix, Vector};
use crate::operators::{EvolutionFamily, LinearOperator};
use crate::rng::{gaussian_vector, stream_rng, Purpose};

/// A covariance `Γ = G Gᵀ` accessed through its actions. `G` has `dim` rows and
/// `factor_cols` columns; `whiten` applies `G⁻¹` and is only defined for square factors.
pub trait CovarianceModel: Send + Sync {
    fn dim(&self) -> usize;
    fn factor_cols(&self) -> usize;
    fn apply(&self, x: &Vector) -> Vector;
    fn apply_inverse(&self, x: &Vector) -> Vector;
    fn apply_factor(&self, x: &Vector) -> Vector;
    fn apply_factor_transpose(&self, x: &Vector) -> Vector;
    fn whiten(&self, x: &Vector) -> Vector;
    fn whiten_transpose(&self, x: &Vector) -> Vector;
    fn logdet(&self) -> f64;

    /// Covariance of the sub-vector with the given entries.
    fn restrict(&self, _indices: &[usize]) -> Result<CovRef> {
        Err(Error::InvalidArgument(
            "this covariance model cannot be restricted".into(),
        ))
    }
}

pub type CovRef = Arc<dyn CovarianceModel>;

/// Which action of a covariance model an operator adapter exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceAction {
    Apply,
    Inverse,
    Factor,
    Whiten,
}

/// A covariance action viewed as a linear operator.
pub struct CovarianceOperator {
    model: CovRef,
    action: CovarianceAction,
}

impl CovarianceOperator {
    pub fn new(model: CovRef, action: CovarianceAction) -> Self {
        Self { model, action }
    }

    pub fn shared(model: CovRef, action: CovarianceAction) -> Arc<dyn LinearOperator> {
        Arc::new(Self::new(model, action))
    }
}

impl LinearOperator for CovarianceOperator {
    fn rows(&self) -> usize {
        self.model.dim()
    }
    fn cols(&self) -> usize {
        match self.action {
            CovarianceAction::Factor => self.model.factor_cols(),
            _ => self.model.dim(),
        }
    }
    fn apply(&self, x: &Vector) -> Vector {
        match self.action {
            CovarianceAction::Apply => self.model.apply(x),
            CovarianceAction::Inverse => self.model.apply_inverse(x),
            CovarianceAction::Factor => self.model.apply_factor(x),
            CovarianceAction::Whiten => self.model.whiten(x),
        }
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        match self.action {
            CovarianceAction::Apply => self.model.apply(y),
            CovarianceAction::Inverse => self.model.apply_inverse(y),
            CovarianceAction::Factor => self.model.apply_factor_transpose(y),
            CovarianceAction::Whiten => self.model.whiten_transpose(y),
        }
    }
}

pub fn dense_covariance_matrix(model: &dyn CovarianceModel) -> Matrix {
    let n = model.dim();
    let mut m = Matrix::zeros(n, n);
    let mut e = Vector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        m.set_column(j, &model.apply(&e));
        e[j] = 0.0;
    }
    m
}

#[derive(Debug, Clone)]
pub struct ScaledIdentityCovariance {
    dim: usize,
    variance: f64,
}

impl ScaledIdentityCovariance {
    pub fn new(dim: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("variance {variance}")));
        }
        Ok(Self { dim, variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl CovarianceModel for ScaledIdentityCovariance {
    fn dim(&self) -> usize {
        self.dim
    }
    fn factor_cols(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &Vector) -> Vector {
        x * self.variance
    }
    fn apply_inverse(&self, x: &Vector) -> Vector {
        x / self.variance
    }
    fn apply_factor(&self, x: &Vector) -> Vector {
        x * self.variance.sqrt()
    }
    fn apply_factor_transpose(&self, x: &Vector) -> Vector {
        x * self.variance.sqrt()
    }
    fn whiten(&self, x: &Vector) -> Vector {
        x / self.variance.sqrt()
    }
    fn whiten_transpose(&self, x: &Vector) -> Vector {
        x / self.variance.sqrt()
    }
    fn logdet(&self) -> f64 {
        self.dim as f64 * self.variance.ln()
    }
    fn restrict(&self, indices: &[usize]) -> Result<CovRef> {
        if indices.iter().any(|&i| i >= self.dim) {
            return Err(Error::InvalidArgument("restriction index out of range".into()));
        }
        Ok(Arc::new(Self::new(indices.len(), self.variance)?))
    }
}

#[derive(Debug, Clone)]
pub struct DiagonalCovariance {
    variances: Vector,
}

impl DiagonalCovariance {
    pub fn new(variances: Vector) -> Result<Self> {
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite("non-positive variance".into()));
        }
        Ok(Self { variances })
    }
}

impl CovarianceModel for DiagonalCovariance {
    fn dim(&self) -> usize {
        self.variances.len()
    }
    fn factor_cols(&self) -> usize {
        self.variances.len()
    }
    fn apply(&self, x: &Vector) -> Vector {
        x.component_mul(&self.variances)
    }
    fn apply_inverse(&self, x: &Vector) -> Vector {
        x.component_div(&self.variances)
    }
    fn apply_factor(&self, x: &Vector) -> Vector {
        x.component_mul(&self.variances.map(f64::sqrt))
    }
    fn apply_factor_transpose(&self, x: &Vector) -> Vector {
        self.apply_factor(x)
    }
    fn whiten(&self, x: &Vector) -> Vector {
        x.component_div(&self.variances.map(f64::sqrt))
    }
    fn whiten_transpose(&self, x: &Vector) -> Vector {
        self.whiten(x)
    }
    fn logdet(&self) -> f64 {
        self.variances.iter().map(|v| v.ln()).sum()
    }
    fn restrict(&self, indices: &[usize]) -> Result<CovRef> {
        if indices.iter().any(|&i| i >= self.dim()) {
            return Err(Error::InvalidArgument("restriction index out of range".into()));
        }
        Ok(Arc::new(Self::new(Vector::from_iterator(
            indices.len(),
            indices.iter().map(|&i| self.variances[i]),
        ))?))
    }
}

/// Explicit SPD matrix with its Cholesky factor as `G`.
#[derive(Debug, Clone)]
pub struct DenseCovariance {
    matrix: Matrix,
    chol: Cholesky<f64, nalgebra::Dyn>,
    lower: Matrix,
}

impl DenseCovariance {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidArgument("covariance must be square".into()));
        }
        let chol = Cholesky::new(matrix.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("dense covariance of size {}", matrix.nrows()))
        })?;
        let lower = chol.l();
        Ok(Self { matrix, chol, lower })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

impl CovarianceModel for DenseCovariance {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn factor_cols(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x
    }
    fn apply_inverse(&self, x: &Vector) -> Vector {
        self.chol.solve(x)
    }
    fn apply_factor(&self, x: &Vector) -> Vector {
        &self.lower * x
    }
    fn apply_factor_transpose(&self, x: &Vector) -> Vector {
        self.lower.tr_mul(x)
    }
    fn whiten(&self, x: &Vector) -> Vector {
        self.chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("Cholesky factor is nonsingular")
    }
    fn whiten_transpose(&self, x: &Vector) -> Vector {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(x)
            .expect("Cholesky factor is nonsingular")
    }
    fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }
    fn restrict(&self, indices: &[usize]) -> Result<CovRef> {
        if indices.iter().any(|&i| i >= self.dim()) {
            return Err(Error::InvalidArgument("restriction index out of range".into()));
        }
        let sub = Matrix::from_fn(indices.len(), indices.len(), |i, j| {
            self.matrix[(indices[i], indices[j])]
        });
        Ok(Arc::new(Self::new(sub)?))
    }
}

/// `Γ = P⁻¹ N P⁻¹` with `P = γK + δN`; factor `G = P⁻¹ C` where `N = C Cᵀ`.
#[derive(Debug, Clone)]
pub struct EllipticPriorCovariance {
    gamma: f64,
    delta: f64,
    mass: Matrix,
    operator: Matrix,
    operator_chol: Cholesky<f64, nalgebra::Dyn>,
    mass_chol: Cholesky<f64, nalgebra::Dyn>,
    mass_lower: Matrix,
}

impl EllipticPriorCovariance {
    pub fn new(gamma: f64, delta: f64, mass: Matrix, stiffness: Matrix) -> Result<Self> {
        check_dim("elliptic prior stiffness", mass.nrows(), stiffness.nrows())?;
        if !(gamma >= 0.0 && delta >= 0.0) {
            return Err(Error::InvalidArgument("γ and δ must be non-negative".into()));
        }
        let operator = &stiffness * gamma + &mass * delta;
        let operator_chol = Cholesky::new(operator.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("γK + δN".into()))?;
        let mass_chol =
            Cholesky::new(mass.clone()).ok_or_else(|| Error::NotPositiveDefinite("mass".into()))?;
        let mass_lower = mass_chol.l();
        Ok(Self {
            gamma,
            delta,
            mass,
            operator,
            operator_chol,
            mass_chol,
            mass_lower,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl CovarianceModel for EllipticPriorCovariance {
    fn dim(&self) -> usize {
        self.mass.nrows()
    }
    fn factor_cols(&self) -> usize {
        self.mass.nrows()
    }
    fn apply(&self, x: &Vector) -> Vector {
        let y = self.operator_chol.solve(x);
        self.operator_chol.solve(&(&self.mass * y))
    }
    fn apply_inverse(&self, x: &Vector) -> Vector {
        let y = &self.operator * x;
        &self.operator * self.mass_chol.solve(&y)
    }
    fn apply_factor(&self, x: &Vector) -> Vector {
        self.operator_chol.solve(&(&self.mass_lower * x))
    }
    fn apply_factor_transpose(&self, x: &Vector) -> Vector {
        self.mass_lower.tr_mul(&self.operator_chol.solve(x))
    }
    fn whiten(&self, x: &Vector) -> Vector {
        self.mass_chol
            .l_dirty()
            .solve_lower_triangular(&(&self.operator * x))
            .expect("mass factor is nonsingular")
    }
    fn whiten_transpose(&self, x: &Vector) -> Vector {
        let y = self
            .mass_chol
            .l_dirty()
            .tr_solve_lower_triangular(x)
            .expect("mass factor is nonsingular");
        &self.operator * y
    }
    fn logdet(&self) -> f64 {
        let ld = |c: &Cholesky<f64, nalgebra::Dyn>| {
            2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
        };
        ld(&self.mass_chol) - 2.0 * ld(&self.operator_chol)
    }
}

/// `blkdiag(Γ₁, …, Γ_n)`.
#[derive(Clone)]
pub struct BlockDiagCovariance {
    blocks: Vec<CovRef>,
}

impl BlockDiagCovariance {
    pub fn new(blocks: Vec<CovRef>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[CovRef] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Restricts every block to the same entries.
    pub fn restrict_each(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.restrict(indices))
                .collect::<Result<_>>()?,
        })
    }

    fn map_blocks(
        &self,
        x: &Vector,
        in_size: impl Fn(&CovRef) -> usize,
        out_size: impl Fn(&CovRef) -> usize,
        f: impl Fn(&CovRef, &Vector) -> Vector,
    ) -> Vector {
        let total: usize = self.blocks.iter().map(&out_size).sum();
        let mut out = Vector::zeros(total);
        let (mut i, mut o) = (0, 0);
        for b in &self.blocks {
            let (n_in, n_out) = (in_size(b), out_size(b));
            let xb = x.rows(i, n_in).into_owned();
            out.rows_mut(o, n_out).copy_from(&f(b, &xb));
            i += n_in;
            o += n_out;
        }
        out
    }
}

impl CovarianceModel for BlockDiagCovariance {
    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }
    fn factor_cols(&self) -> usize {
        self.blocks.iter().map(|b| b.factor_cols()).sum()
    }
    fn apply(&self, x: &Vector) -> Vector {
        self.map_blocks(x, |b| b.dim(), |b| b.dim(), |b, v| b.apply(v))
    }
    fn apply_inverse(&self, x: &Vector) -> Vector {
        self.map_blocks(x, |b| b.dim(), |b| b.dim(), |b, v| b.apply_inverse(v))
    }
    fn apply_factor(&self, x: &Vector) -> Vector {
        self.map_blocks(x, |b| b.factor_cols(), |b| b.dim(), |b, v| b.apply_factor(v))
    }
    fn apply_factor_transpose(&self, x: &Vector) -> Vector {
        self.map_blocks(
            x,
            |b| b.dim(),
            |b| b.factor_cols(),
            |b, v| b.apply_factor_transpose(v),
        )
    }
    fn whiten(&self, x: &Vector) -> Vector {
        self.map_blocks(x, |b| b.dim(), |b| b.factor_cols(), |b, v| b.whiten(v))
    }
    fn whiten_transpose(&self, x: &Vector) -> Vector {
        self.map_blocks(x, |b| b.factor_cols(), |b| b.dim(), |b, v| b.whiten_transpose(v))
    }
    fn logdet(&self) -> f64 {
        self.blocks.iter().map(|b| b.logdet()).sum()
    }
}

/// Set of covariance actions a consumer may call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub apply: bool,
    pub inverse: bool,
    pub factor: bool,
    pub whiten: bool,
}

impl Capabilities {
    pub const NONE: Self = Self {
        apply: false,
        inverse: false,
        factor: false,
        whiten: false,
    };
    pub const APPLY: Self = Self {
        apply: true,
        ..Self::NONE
    };
    pub const INVERSE: Self = Self {
        inverse: true,
        ..Self::NONE
    };
    pub const FACTOR: Self = Self {
        factor: true,
        ..Self::NONE
    };
    pub const WHITEN: Self = Self {
        whiten: true,
        ..Self::NONE
    };

    pub fn union(self, other: Self) -> Self {
        Self {
            apply: self.apply || other.apply,
            inverse: self.inverse || other.inverse,
            factor: self.factor || other.factor,
            whiten: self.whiten || other.whiten,
        }
    }

    pub fn contains(self, other: Self) -> bool {
        (!other.apply || self.apply)
            && (!other.inverse || self.inverse)
            && (!other.factor || self.factor)
            && (!other.whiten || self.whiten)
    }

    fn first_missing(self, other: Self) -> Option<&'static str> {
        if other.apply && !self.apply {
            Some("apply")
        } else if other.inverse && !self.inverse {
            Some("inverse")
        } else if other.factor && !self.factor {
            Some("factor")
        } else if other.whiten && !self.whiten {
            Some("whiten")
        } else {
            None
        }
    }
}

/// Number of calls made through an [`AuditedCovariance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallCounts {
    pub apply: usize,
    pub inverse: usize,
    pub factor: usize,
    pub whiten: usize,
}

/// Wraps a covariance model so that only granted actions can be called.
/// Calling anything else panics: it is a contract violation in the caller.
pub struct AuditedCovariance {
    inner: CovRef,
    granted: Capabilities,
    context: &'static str,
    calls: [AtomicUsize; 4],
}

impl AuditedCovariance {
    pub fn new(inner: CovRef, granted: Capabilities, context: &'static str) -> Self {
        Self {
            inner,
            granted,
            context,
            calls: Default::default(),
        }
    }

    /// Checks at construction time that `needed` is covered by the grant.
    pub fn request(&self, needed: Capabilities) -> Result<()> {
        match self.granted.first_missing(needed) {
            None => Ok(()),
            Some(capability) => Err(Error::ForbiddenCapability {
                capability,
                context: self.context,
            }),
        }
    }

    pub fn granted(&self) -> Capabilities {
        self.granted
    }

    pub fn call_counts(&self) -> CallCounts {
        CallCounts {
            apply: self.calls[0].load(Ordering::Relaxed),
            inverse: self.calls[1].load(Ordering::Relaxed),
            factor: self.calls[2].load(Ordering::Relaxed),
            whiten: self.calls[3].load(Ordering::Relaxed),
        }
    }

    fn check(&self, slot: usize, allowed: bool, name: &str) {
        assert!(
            allowed,
            "capability violation: `{name}` is not licensed for {}",
            self.context
        );
        self.calls[slot].fetch_add(1, Ordering::Relaxed);
    }
}

impl CovarianceModel for AuditedCovariance {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn factor_cols(&self) -> usize {
        self.inner.factor_cols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        self.check(0, self.granted.apply, "apply");
        self.inner.apply(x)
    }
    fn apply_inverse(&self, x: &Vector) -> Vector {
        self.check(1, self.granted.inverse, "inverse");
        self.inner.apply_inverse(x)
    }
    fn apply_factor(&self, x: &Vector) -> Vector {
        self.check(2, self.granted.factor, "factor");
        self.inner.apply_factor(x)
    }
    fn apply_factor_transpose(&self, x: &Vector) -> Vector {
        self.check(2, self.granted.factor, "factor");
        self.inner.apply_factor_transpose(x)
    }
    fn whiten(&self, x: &Vector) -> Vector {
        self.check(3, self.granted.whiten, "whiten");
        self.inner.whiten(x)
    }
    fn whiten_transpose(&self, x: &Vector) -> Vector {
        self.check(3, self.granted.whiten, "whiten");
        self.inner.whiten_transpose(x)
    }
    fn logdet(&self) -> f64 {
        self.inner.logdet()
    }
    fn restrict(&self, indices: &[usize]) -> Result<CovRef> {
        Ok(Arc::new(Self::new(
            self.inner.restrict(indices)?,
            self.granted,
            self.context,
        )))
    }
}

/// Law of the stacked variable `p = (u₀; η₁; …; η_{n_T})`: mean `(u₀ᵇ; 0)`,
/// covariance `Γ_mod = blkdiag(Γ_B, Q₁, …, Q_{n_T})`.
#[derive(Clone)]
pub struct PriorModel {
    pub mean: Vector,
    pub covariance: BlockDiagCovariance,
}

impl PriorModel {
    pub fn new(background_mean: &Vector, background: CovRef, model_error: &[CovRef]) -> Result<Self> {
        let d = background.dim();
        check_dim("background mean", d, background_mean.len())?;
        for q in model_error {
            check_dim("model-error block", d, q.dim())?;
        }
        let mut mean = Vector::zeros(d * (model_error.len() + 1));
        mean.rows_mut(0, d).copy_from(background_mean);
        let mut blocks = vec![background];
        blocks.extend(model_error.iter().cloned());
        Ok(Self {
            mean,
            covariance: BlockDiagCovariance::new(blocks),
        })
    }
}

/// Diagonal regularization `δ = 1e-12 + 1e-6 ‖Γ̃‖₂`.
pub fn nugget(sample_cov: &Matrix) -> f64 {
    1e-12 + 1e-6 * spectral_norm(sample_cov)
}

/// Spectral norm of a symmetric matrix: dense eigensolve up to size 500,
/// 50 power-iteration steps beyond.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    if n <= 500 {
        return spectral_norm_symmetric(m);
    }
    let mut v = Vector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = m * &v;
        lambda = w.norm();
        if lambda == 0.0 {
            return 0.0;
        }
        v = w / lambda;
    }
    lambda
}

/// Sample covariance with divisor `n − 1`.
pub fn sample_covariance(samples: &[Vector]) -> Result<Matrix> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vector::zeros(d), |acc, s| acc + s) / n;
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    Ok(cov)
}

/// Sample covariance of the given vectors plus the nugget.
pub fn nugget_covariance(samples: &[Vector]) -> Result<DenseCovariance> {
    let mut cov = sample_covariance(samples)?;
    let d = cov.nrows();
    let delta = nugget(&cov);
    for i in 0..d {
        cov[(i, i)] += delta;
    }
    DenseCovariance::new(cov)
}

/// Model-error covariances `Q₁, …, Q_{n_T}` from trajectory differences of
/// `n_samples` background draws evolved under both families.
pub fn sample_error_covariance(
    true_steps: &EvolutionFamily,
    approx_steps: &EvolutionFamily,
    background: &dyn CovarianceModel,
    background_mean: &Vector,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<CovRef>> {
    check_dim("true/approximate state size", true_steps.d_s(), approx_steps.d_s())?;
    check_dim("true/approximate windows", true_steps.n_t(), approx_steps.n_t())?;
    check_dim("background mean", true_steps.d_s(), background_mean.len())?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "sample covariance needs at least two samples, got {n_samples}"
        )));
    }
    let n_t = true_steps.n_t();
    let mut per_step: Vec<Vec<Vector>> = vec![Vec::with_capacity(n_samples); n_t];
    for i in 0..n_samples {
        let xi = gaussian_vector(
            &mut stream_rng(seed, Purpose::PriorSamples, i as u64),
            background.factor_cols(),
        );
        let u0 = background_mean + background.apply_factor(&xi);
        let (mut ut, mut ua) = (u0.clone(), u0);
        for l in 0..n_t {
            ut = true_steps.apply_step(l, &ut);
            ua = approx_steps.apply_step(l, &ua);
            per_step[l].push(&ut - &ua);
        }
    }
    per_step
        .iter()
        .map(|s| nugget_covariance(s).map(|c| Arc::new(c) as CovRef))
        .collect()
}

/// `log det` of a covariance from its dense form (oracle for tests).
pub fn dense_logdet(model: &dyn CovarianceModel) -> Result<f64> {
    logdet_spd(&dense_covariance_matrix(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{densify, DenseOperator, OpRef};
    use crate::rng::gaussian_matrix;

    fn check_model(model: &dyn CovarianceModel, seed: u64) {
        let n = model.dim();
        let x = gaussian_vector(&mut stream_rng(seed, Purpose::Instance, 0), n);
        let y = gaussian_vector(&mut stream_rng(seed, Purpose::Instance, 1), n);
        let gx = model.apply(&x);
        let scale = gx.norm() * y.norm();
        assert!((gx.dot(&y) - x.dot(&model.apply(&y))).abs() <= 1e-10 * scale);
        let via_factor = model.apply_factor(&model.apply_factor_transpose(&x));
        assert!((via_factor - &gx).norm() <= 1e-10 * gx.norm());
        let back = model.apply(&model.apply_inverse(&x));
        assert!((back - &x).norm() <= 1e-9 * x.norm());
        if model.factor_cols() == n {
            let w = model.whiten(&model.apply_factor(&x));
            assert!((w - &x).norm() <= 1e-9 * x.norm());
            let wt = model.apply_factor_transpose(&model.whiten_transpose(&x));
            assert!((wt - &x).norm() <= 1e-9 * x.norm());
        }
        let dense = dense_covariance_matrix(model);
        assert!((model.logdet() - logdet_spd(&dense).unwrap()).abs() < 1e-8 * (1.0 + model.logdet().abs()));
    }

    fn laplacian(n: usize) -> (Matrix, Matrix) {
        let h = 1.0 / (n + 1) as f64;
        let k = Matrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 2.0 / h,
            1 => -1.0 / h,
            _ => 0.0,
        });
        let m = Matrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 4.0 * h / 6.0,
            1 => h / 6.0,
            _ => 0.0,
        });
        (m, k)
    }

    #[test]
    fn scaled_identity_actions() {
        let c = ScaledIdentityCovariance::new(2, 4.0).unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0]);
        assert_eq!(c.apply_factor(&x), &x * 2.0);
        assert_eq!(c.apply_inverse(&x), &x / 4.0);
        check_model(&c, 1);
        assert!(ScaledIdentityCovariance::new(2, 0.0).is_err());
    }

    #[test]
    fn block_diag_inverse() {
        let b = BlockDiagCovariance::new(vec![
            Arc::new(ScaledIdentityCovariance::new(1, 1.0).unwrap()),
            Arc::new(ScaledIdentityCovariance::new(1, 9.0).unwrap()),
        ]);
        let r = b.apply_inverse(&Vector::from_vec(vec![3.0, 3.0]));
        assert!((r[0] - 3.0).abs() < 1e-15 && (r[1] - 1.0 / 3.0).abs() < 1e-15);
        check_model(&b, 2);
    }

    #[test]
    fn elliptic_matches_dense_assembly() {
        let (m, k) = laplacian(11);
        let c = EllipticPriorCovariance::new(0.1, 1.0, m.clone(), k.clone()).unwrap();
        let p = &k * 0.1 + &m;
        let pinv = p.clone().try_inverse().unwrap();
        let reference = &pinv * &m * &pinv;
        let dense = dense_covariance_matrix(&c);
        assert!((dense - &reference).norm() <= 1e-10 * reference.norm());
        check_model(&c, 3);
    }

    #[test]
    fn elliptic_is_permutation_equivariant() {
        let (m, k) = laplacian(5);
        let perm = [3, 0, 4, 1, 2];
        let pm = Matrix::from_fn(5, 5, |i, j| m[(perm[i], perm[j])]);
        let pk = Matrix::from_fn(5, 5, |i, j| k[(perm[i], perm[j])]);
        let a = dense_covariance_matrix(&EllipticPriorCovariance::new(0.3, 2.0, m, k).unwrap());
        let b = dense_covariance_matrix(&EllipticPriorCovariance::new(0.3, 2.0, pm, pk).unwrap());
        let pa = Matrix::from_fn(5, 5, |i, j| a[(perm[i], perm[j])]);
        assert!((pa - b).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn dense_and_diagonal_models() {
        let g = gaussian_matrix(&mut stream_rng(5, Purpose::Instance, 0), 4, 4);
        let spd = &g * g.transpose() + Matrix::identity(4, 4);
        check_model(&DenseCovariance::new(spd).unwrap(), 4);
        check_model(
            &DiagonalCovariance::new(Vector::from_vec(vec![0.5, 2.0, 3.0])).unwrap(),
            5,
        );
        assert!(DenseCovariance::new(Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn nugget_of_two_samples() {
        // Differences {1, -1}: unbiased sample variance 2.
        let q = nugget_covariance(&[Vector::from_element(1, 1.0), Vector::from_element(1, -1.0)])
            .unwrap();
        let expected = 2.0 + 1e-12 + 2e-6;
        assert!((q.matrix()[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_families_give_pure_nugget() {
        let step: OpRef = Arc::new(DenseOperator::new(Matrix::identity(3, 3) * 0.9));
        let fam = EvolutionFamily::stationary(step, 3).unwrap();
        let bg = ScaledIdentityCovariance::new(3, 1.0).unwrap();
        let qs = sample_error_covariance(&fam, &fam, &bg, &Vector::zeros(3), 5, 1).unwrap();
        for q in qs {
            let d = dense_covariance_matrix(q.as_ref());
            assert!((d - Matrix::identity(3, 3) * 1e-12).amax() < 1e-24);
        }
        assert!(sample_error_covariance(&fam, &fam, &bg, &Vector::zeros(3), 1, 1).is_err());
    }

    #[test]
    fn sampled_error_covariance_is_spd_above_nugget() {
        let g = gaussian_matrix(&mut stream_rng(8, Purpose::Instance, 0), 4, 4) * 0.3;
        let t: OpRef = Arc::new(DenseOperator::new(g.clone()));
        let a: OpRef = Arc::new(DenseOperator::new(&g * 0.9));
        let ft = EvolutionFamily::stationary(t, 2).unwrap();
        let fa = EvolutionFamily::stationary(a, 2).unwrap();
        let bg = ScaledIdentityCovariance::new(4, 1.0).unwrap();
        let qs = sample_error_covariance(&ft, &fa, &bg, &Vector::zeros(4), 3, 2).unwrap();
        let mut diffs = vec![Vec::new(); 2];
        for i in 0..3 {
            let u0 = gaussian_vector(&mut stream_rng(2, Purpose::PriorSamples, i), 4);
            let (mut ut, mut ua) = (u0.clone(), u0);
            for d in diffs.iter_mut() {
                ut = &g * ut;
                ua = &g * 0.9 * ua;
                d.push(&ut - &ua);
            }
        }
        for (q, d) in qs.iter().zip(&diffs) {
            let raw = sample_covariance(d).unwrap();
            let delta = nugget(&raw);
            let dense = dense_covariance_matrix(q.as_ref());
            assert!((&dense - &raw - Matrix::identity(4, 4) * delta).amax() < 1e-14);
            assert!((&dense - dense.transpose()).amax() == 0.0);
            let ev = crate::linalg::symmetric_eigenvalues(&dense);
            assert!(ev.min() >= delta * (1.0 - 1e-8));
        }
    }

    #[test]
    fn audited_request_and_counts() {
        let inner: CovRef = Arc::new(ScaledIdentityCovariance::new(2, 1.0).unwrap());
        let a = AuditedCovariance::new(inner, Capabilities::APPLY, "test");
        assert!(a.request(Capabilities::APPLY).is_ok());
        assert!(matches!(
            a.request(Capabilities::FACTOR),
            Err(Error::ForbiddenCapability { capability: "factor", .. })
        ));
        a.apply(&Vector::zeros(2));
        assert_eq!(a.call_counts().apply, 1);
    }

    #[test]
    #[should_panic(expected = "capability violation")]
    fn audited_forbidden_call_panics() {
        let inner: CovRef = Arc::new(ScaledIdentityCovariance::new(2, 1.0).unwrap());
        let a = AuditedCovariance::new(inner, Capabilities::APPLY, "test");
        a.apply_factor(&Vector::zeros(2));
    }

    #[test]
    fn covariance_operator_adjoints() {
        let (m, k) = laplacian(6);
        let c: CovRef = Arc::new(EllipticPriorCovariance::new(0.2, 1.0, m, k).unwrap());
        for action in [
            CovarianceAction::Apply,
            CovarianceAction::Inverse,
            CovarianceAction::Factor,
            CovarianceAction::Whiten,
        ] {
            let op = CovarianceOperator::new(c.clone(), action);
            assert!(crate::operators::adjoint_defect(&op, 4) < 1e-10);
            let _ = densify(&op);
        }
    }
}
