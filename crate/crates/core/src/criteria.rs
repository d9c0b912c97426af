//! Expected-information-gain criterion in its four equivalent weak-constraint
//! formulations, the selection-restricted and strong-constraint criteria, and
//! the bound on their gap.
//!
//! With `Γ_mod = G Gᵀ` and `Γ_R = G_R G_Rᵀ` we use `A = Gᵀ L⁻ᵀ Oᵀ G_R⁻ᵀ`,
//! the transposed-factor convention; `I + AAᵀ` has the same spectrum as with
//! symmetric square roots.

use std::sync::Arc;

use crate::assimilation::DAProblem;
use crate::covariance::{
    dense_logdet, AuditedCovariance, CallCounts, Capabilities, CovRef, CovarianceAction,
    CovarianceModel, CovarianceOperator,
};
use crate::error::{Error, Result};
use crate::linalg::{logabsdet_symmetric, logdet_spd, symmetrize, Inertia, Matrix};
use crate::operators::{
    densify, identity_plus_gram, BlockOperator, CouplingDirection, DenseOperator, LinearOperator,
    OpRef, ProblemDims, ProductOperator, ScaledOperator, SensorDesign, SumOperator,
    TransposeOperator,
};
use crate::traceest::{slq_trace, xnystrace_logdet, LanczosOptions, MatrixFunction, TraceEstimate};

/// Largest operator dimension densified by the exact evaluators.
pub const DEFAULT_DENSE_LIMIT: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Formulation {
    /// `E = I + AAᵀ`.
    Preconditioned,
    /// Posterior precision `H = OᵀΓ_R⁻¹O + LᵀΓ_mod⁻¹L`.
    Unpreconditioned,
    /// `W_I = [[Γ_mod, 0, L], [0, Γ_R, O], [Lᵀ, Oᵀ, 0]]`.
    SaddleI,
    /// `W_II = [[Γ_mod, L], [Lᵀ, −OᵀΓ_R⁻¹O]]`.
    SaddleII,
    /// Strong-constraint criterion on the initial state.
    StrongConstraint,
}

impl Formulation {
    pub const WEAK: [Formulation; 4] = [
        Formulation::Preconditioned,
        Formulation::Unpreconditioned,
        Formulation::SaddleI,
        Formulation::SaddleII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::Preconditioned => "preconditioned",
            Formulation::Unpreconditioned => "unpreconditioned",
            Formulation::SaddleI => "saddle_i",
            Formulation::SaddleII => "saddle_ii",
            Formulation::StrongConstraint => "strong_constraint",
        }
    }

    pub fn matrix_function(self) -> MatrixFunction {
        match self {
            Formulation::SaddleI | Formulation::SaddleII => MatrixFunction::LogAbs,
            _ => MatrixFunction::Log,
        }
    }

    pub fn convention(self) -> ConstantConvention {
        match self {
            Formulation::Unpreconditioned => ConstantConvention::MinusPriorLogdet,
            Formulation::SaddleI => ConstantConvention::PlusNoiseLogdet,
            _ => ConstantConvention::None,
        }
    }

    /// Covariance actions each formulation may use, as `(model, noise)`.
    pub fn licensed(self) -> (Capabilities, Capabilities) {
        match self {
            Formulation::Preconditioned => (Capabilities::FACTOR, Capabilities::WHITEN),
            Formulation::Unpreconditioned => (Capabilities::INVERSE, Capabilities::INVERSE),
            Formulation::SaddleI => (Capabilities::APPLY, Capabilities::APPLY),
            Formulation::SaddleII => (Capabilities::APPLY, Capabilities::INVERSE),
            Formulation::StrongConstraint => (Capabilities::FACTOR, Capabilities::WHITEN),
        }
    }
}

/// How a raw value relates to `Φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantConvention {
    /// The value is `Φ`.
    None,
    /// The value is `Φ − logdet Γ_pr`.
    MinusPriorLogdet,
    /// The value is `Φ + logdet Γ_R`.
    PlusNoiseLogdet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ExactDense,
    Slq,
    XNysTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionValue {
    pub value: f64,
    pub formulation: Formulation,
    pub convention: ConstantConvention,
    pub method: Method,
    /// Observed inertia of the densified operator (exact evaluation only).
    pub inertia: Option<Inertia>,
    pub diagnostics: Option<TraceEstimate>,
}

/// A matrix-free criterion operator with the covariance actions it is
/// allowed to use.
pub struct CriterionOperator {
    formulation: Formulation,
    operator: OpRef,
    factor: Option<OpRef>,
    dims: ProblemDims,
    expected_inertia: (usize, usize),
    audits: [Arc<AuditedCovariance>; 2],
}

impl CriterionOperator {
    pub fn formulation(&self) -> Formulation {
        self.formulation
    }
    pub fn operator(&self) -> &OpRef {
        &self.operator
    }
    /// `A` for the preconditioned formulation.
    pub fn factor(&self) -> Option<&OpRef> {
        self.factor.as_ref()
    }
    /// Dimensions of the design-restricted problem.
    pub fn dims(&self) -> ProblemDims {
        self.dims
    }
    /// Expected `(positive, negative)` eigenvalue counts.
    pub fn expected_inertia(&self) -> (usize, usize) {
        self.expected_inertia
    }
    /// Calls made so far on the `(model, noise)` covariances.
    pub fn call_counts(&self) -> (CallCounts, CallCounts) {
        (self.audits[0].call_counts(), self.audits[1].call_counts())
    }

    /// The same criterion with `A` materialized, so that products use gemm.
    pub fn with_dense_factor(&self) -> Result<Self> {
        let a = self.factor.as_ref().ok_or_else(|| {
            Error::InvalidArgument("only the preconditioned formulation has a factor".into())
        })?;
        let size = a.rows().max(a.cols());
        if size > DEFAULT_DENSE_LIMIT * 4 {
            return Err(Error::TooLarge {
                size,
                limit: DEFAULT_DENSE_LIMIT * 4,
            });
        }
        let dense: OpRef = Arc::new(DenseOperator::new(densify(a.as_ref())));
        Ok(Self {
            operator: identity_plus_gram(dense.clone()),
            factor: Some(dense),
            audits: self.audits.clone(),
            ..*self
        })
    }
}

fn audited(inner: CovRef, granted: Capabilities, context: &'static str) -> Arc<AuditedCovariance> {
    Arc::new(AuditedCovariance::new(inner, granted, context))
}

fn cov_op(model: &Arc<AuditedCovariance>, action: CovarianceAction) -> OpRef {
    CovarianceOperator::shared(model.clone(), action)
}

fn transpose(op: OpRef) -> OpRef {
    Arc::new(TransposeOperator { inner: op })
}

fn product(ops: Vec<OpRef>) -> OpRef {
    Arc::new(ProductOperator::new(ops).expect("criterion blocks are conformable"))
}

/// Builds the matrix-free operator of `formulation` for the design.
pub fn build_criterion_operator(
    problem: &DAProblem,
    design: &SensorDesign,
    formulation: Formulation,
) -> Result<CriterionOperator> {
    build_with_grants(problem, design, formulation, formulation.licensed())
}

/// As [`build_criterion_operator`] with explicit grants; a grant that does
/// not cover what the formulation needs is refused.
pub fn build_with_grants(
    problem: &DAProblem,
    design: &SensorDesign,
    formulation: Formulation,
    grants: (Capabilities, Capabilities),
) -> Result<CriterionOperator> {
    if formulation == Formulation::StrongConstraint {
        return Err(Error::InvalidArgument(
            "the strong-constraint criterion has no weak-constraint operator".into(),
        ));
    }
    let p = problem.restricted(design)?;
    let dims = p.dims();
    let prior = p.prior_model();
    let model = audited(Arc::new(prior.covariance), grants.0, "model covariance");
    let noise = audited(Arc::new(p.noise().clone()), grants.1, "noise covariance");
    let needed = formulation.licensed();
    model.request(needed.0)?;
    noise.request(needed.1)?;
    let o: OpRef = Arc::new(p.observation().clone());
    let l: OpRef = Arc::new(p.coupling(CouplingDirection::Forward));
    let (n_d, n_m) = (dims.n_d(), dims.n_m());
    let mut factor = None;
    let (operator, expected_inertia): (OpRef, _) = match formulation {
        Formulation::Preconditioned => {
            let l_inv: OpRef = Arc::new(p.coupling(CouplingDirection::Inverse));
            let a = product(vec![
                transpose(cov_op(&model, CovarianceAction::Factor)),
                transpose(l_inv),
                transpose(o),
                transpose(cov_op(&noise, CovarianceAction::Whiten)),
            ]);
            factor = Some(a.clone());
            let size = a.rows();
            (identity_plus_gram(a), (size, 0))
        }
        Formulation::Unpreconditioned => {
            let data = product(vec![
                transpose(o.clone()),
                cov_op(&noise, CovarianceAction::Inverse),
                o,
            ]);
            let prior_term = product(vec![
                transpose(l.clone()),
                cov_op(&model, CovarianceAction::Inverse),
                l,
            ]);
            (
                Arc::new(SumOperator::new(vec![data, prior_term])?),
                (n_d, 0),
            )
        }
        Formulation::SaddleI => {
            let blocks = vec![
                vec![Some(cov_op(&model, CovarianceAction::Apply)), None, Some(l.clone())],
                vec![None, Some(cov_op(&noise, CovarianceAction::Apply)), Some(o.clone())],
                vec![Some(transpose(l)), Some(transpose(o)), None],
            ];
            (
                Arc::new(BlockOperator::new(vec![n_d, n_m, n_d], vec![n_d, n_m, n_d], blocks)?),
                (n_d + n_m, n_d),
            )
        }
        Formulation::SaddleII => {
            let data: OpRef = Arc::new(ScaledOperator {
                scale: -1.0,
                inner: product(vec![
                    transpose(o.clone()),
                    cov_op(&noise, CovarianceAction::Inverse),
                    o,
                ]),
            });
            let blocks = vec![
                vec![Some(cov_op(&model, CovarianceAction::Apply)), Some(l.clone())],
                vec![Some(transpose(l)), Some(data)],
            ];
            (
                Arc::new(BlockOperator::new(vec![n_d, n_d], vec![n_d, n_d], blocks)?),
                (n_d, n_d),
            )
        }
        Formulation::StrongConstraint => unreachable!(),
    };
    Ok(CriterionOperator {
        formulation,
        operator,
        factor,
        dims,
        expected_inertia,
        audits: [model, noise],
    })
}

/// Dense `A` (factor rows × measurement columns), built with adjoints.
pub fn dense_criterion_factor(problem: &DAProblem, design: &SensorDesign) -> Result<Matrix> {
    let op = build_criterion_operator(problem, design, Formulation::Preconditioned)?;
    let a = op.factor.expect("preconditioned formulation has a factor");
    check_dense_size(a.rows().max(a.cols()), DEFAULT_DENSE_LIMIT * 4)?;
    Ok(densify(a.as_ref()))
}

/// Dense `Aᵀ = G_R⁻¹ O L⁻¹ G`, formed with forward applications only.
pub fn dense_criterion_factor_forward(problem: &DAProblem, design: &SensorDesign) -> Result<Matrix> {
    let p = problem.restricted(design)?;
    let model: CovRef = Arc::new(p.prior_model().covariance);
    let fc = model.factor_cols();
    check_dense_size(fc, DEFAULT_DENSE_LIMIT * 4)?;
    let mut pushed = Matrix::zeros(p.dims().n_d(), fc);
    for j in 0..fc {
        let mut e = crate::linalg::Vector::zeros(fc);
        e[j] = 1.0;
        pushed.set_column(j, &model.apply_factor(&e));
    }
    let traj = p.coupling(CouplingDirection::Inverse).apply_block(&pushed);
    let obs = p.observation().apply_block(&traj);
    let mut out = Matrix::zeros(obs.nrows(), fc);
    for j in 0..fc {
        out.set_column(j, &p.noise().whiten(&obs.column(j).into_owned()));
    }
    Ok(out)
}

fn check_dense_size(size: usize, limit: usize) -> Result<()> {
    if size > limit {
        Err(Error::TooLarge { size, limit })
    } else {
        Ok(())
    }
}

/// `logdet(I + MᵀM)`, on whichever Gram side is smaller.
pub fn logdet_identity_plus_gram(m: &Matrix) -> Result<f64> {
    let g = if m.ncols() <= m.nrows() {
        m.tr_mul(m)
    } else {
        m * m.transpose()
    };
    let n = g.nrows();
    logdet_spd(&(Matrix::identity(n, n) + symmetrize(&g)))
}

/// Dense evaluation of the operator's raw value.
pub fn criterion_exact(op: &CriterionOperator) -> Result<CriterionValue> {
    criterion_exact_with_limit(op, DEFAULT_DENSE_LIMIT)
}

pub fn criterion_exact_with_limit(op: &CriterionOperator, limit: usize) -> Result<CriterionValue> {
    let (value, inertia) = match op.formulation {
        Formulation::Preconditioned => {
            let a = op.factor.as_ref().expect("preconditioned formulation has a factor");
            check_dense_size(a.rows().min(a.cols()), limit)?;
            (logdet_identity_plus_gram(&densify(a.as_ref()))?, None)
        }
        Formulation::Unpreconditioned => {
            check_dense_size(op.operator.rows(), limit)?;
            (logdet_spd(&symmetrize(&densify(op.operator.as_ref())))?, None)
        }
        _ => {
            check_dense_size(op.operator.rows(), limit)?;
            let (v, inertia) = logabsdet_symmetric(&densify(op.operator.as_ref()))?;
            (v, Some(inertia))
        }
    };
    Ok(CriterionValue {
        value,
        formulation: op.formulation,
        convention: op.formulation.convention(),
        method: Method::ExactDense,
        inertia,
        diagnostics: None,
    })
}

/// Randomized estimators of the raw value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Slq { samples: usize, seed: u64, lanczos: LanczosOptions },
    XNysTrace { samples: usize, seed: u64, lanczos: LanczosOptions },
}

pub fn criterion_estimate(op: &CriterionOperator, estimate: &Estimate) -> Result<CriterionValue> {
    let f = op.formulation.matrix_function();
    let (method, est) = match *estimate {
        Estimate::Slq { samples, seed, lanczos } => {
            (Method::Slq, slq_trace(op.operator.as_ref(), f, samples, seed, &lanczos)?)
        }
        Estimate::XNysTrace { samples, seed, lanczos } => {
            if op.formulation != Formulation::Preconditioned {
                return Err(Error::InvalidArgument(format!(
                    "the Nyström estimator needs a PSD log, not the {} formulation",
                    op.formulation.name()
                )));
            }
            (
                Method::XNysTrace,
                xnystrace_logdet(op.operator.as_ref(), samples, seed, &lanczos)?,
            )
        }
    };
    Ok(CriterionValue {
        value: est.value,
        formulation: op.formulation,
        convention: op.formulation.convention(),
        method,
        inertia: None,
        diagnostics: Some(est),
    })
}

/// `Φ(S) = logdet(I + A(I⊗S)(I⊗S)ᵀAᵀ)`.
pub fn criterion_selected(
    problem: &DAProblem,
    design: &SensorDesign,
    estimate: Option<&Estimate>,
) -> Result<CriterionValue> {
    let op = build_criterion_operator(problem, design, Formulation::Preconditioned)?;
    match estimate {
        None => criterion_exact(&op),
        Some(e) => criterion_estimate(&op.with_dense_factor()?, e),
    }
}

/// Maps raw values onto `Φ` by adding the dropped constants, computed from
/// dense blockwise Cholesky factorizations (`det L = 1`).
pub fn reconcile_constants(
    values: &[CriterionValue],
    problem: &DAProblem,
    design: &SensorDesign,
) -> Result<Vec<f64>> {
    let p = problem.restricted(design)?;
    let dims = p.dims();
    check_dense_size(dims.n_d() + dims.n_m(), DEFAULT_DENSE_LIMIT)?;
    let needs = |c| values.iter().any(|v| v.convention == c);
    let prior_logdet = if needs(ConstantConvention::MinusPriorLogdet) {
        let mut s = dense_logdet(p.background().as_ref())?;
        for q in p.model_error().blocks() {
            s += dense_logdet(q.as_ref())?;
        }
        s
    } else {
        0.0
    };
    let noise_logdet = if needs(ConstantConvention::PlusNoiseLogdet) {
        let mut s = 0.0;
        for r in p.noise().blocks() {
            if r.dim() > 0 {
                s += dense_logdet(r.as_ref())?;
            }
        }
        s
    } else {
        0.0
    };
    Ok(values
        .iter()
        .map(|v| match v.convention {
            ConstantConvention::None => v.value,
            ConstantConvention::MinusPriorLogdet => v.value + prior_logdet,
            ConstantConvention::PlusNoiseLogdet => v.value - noise_logdet,
        })
        .collect())
}

/// Strong-constraint criterion
/// `logdet(I + Σ_ℓ (G_R,ℓ⁻¹ Sᵀ O_ℓ M_{0→ℓ} G_B)ᵀ(G_R,ℓ⁻¹ Sᵀ O_ℓ M_{0→ℓ} G_B))`,
/// by dense Gram accumulation along the trajectory.
pub fn sc_criterion_selected(problem: &DAProblem, design: &SensorDesign) -> Result<CriterionValue> {
    let p = problem.restricted(design)?;
    let dims = p.dims();
    check_dense_size(dims.d_s(), DEFAULT_DENSE_LIMIT)?;
    let factor = densify(&CovarianceOperator::new(p.background().clone(), CovarianceAction::Factor));
    let fc = factor.ncols();
    let mut gram = Matrix::zeros(fc, fc);
    let mut propagated = factor;
    for l in 0..dims.n_blocks() {
        if l > 0 {
            propagated = p.evolution().apply_step_block(l - 1, &propagated);
        }
        if dims.n_s() == 0 {
            continue;
        }
        let z = whiten_columns(p.noise().blocks()[l].as_ref(), &p.observation().per_step(l).apply_block(&propagated));
        gram += z.tr_mul(&z);
    }
    let value = logdet_spd(&(Matrix::identity(fc, fc) + symmetrize(&gram)))?;
    Ok(CriterionValue {
        value,
        formulation: Formulation::StrongConstraint,
        convention: ConstantConvention::None,
        method: Method::ExactDense,
        inertia: None,
        diagnostics: None,
    })
}

fn whiten_columns(model: &dyn CovarianceModel, m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(model.factor_cols(), m.ncols());
    for j in 0..m.ncols() {
        out.set_column(j, &model.whiten(&m.column(j).into_owned()));
    }
    out
}

/// `Φ`, `Φ^SC`, their gap and the bound
/// `0 ≤ Φ − Φ^SC ≤ logdet(I + (I⊗S)Z blkdiag(0, Γ_Q) Zᵀ(I⊗S)ᵀ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub weak: f64,
    pub strong: f64,
    pub gap: f64,
    pub upper: f64,
}

impl GapReport {
    /// Smallest margin of the sandwich; negative means a violation.
    pub fn slack(&self) -> f64 {
        self.gap.min(self.upper - self.gap)
    }
}

pub fn wc_sc_gap_bound(problem: &DAProblem, design: &SensorDesign) -> Result<GapReport> {
    let a = dense_criterion_factor(problem, design)?;
    let fc_b = problem.background().factor_cols();
    let a_b = a.rows(0, fc_b).into_owned();
    let a_q = a.rows(fc_b, a.nrows() - fc_b).into_owned();
    let weak = logdet_identity_plus_gram(&a)?;
    let strong = logdet_identity_plus_gram(&a_b)?;
    let upper = logdet_identity_plus_gram(&a_q)?;
    Ok(GapReport {
        weak,
        strong,
        gap: weak - strong,
        upper,
    })
}

/// `Φ(S)` for many designs from one dense Gram matrix `AᵀA` of the full
/// candidate set: `Φ(S) = logdet(I + (AᵀA)[idx, idx])` over the stacked
/// indices of the design.
#[derive(Debug, Clone)]
pub struct GramEvaluator {
    gram: Matrix,
    n_s: usize,
    n_blocks: usize,
}

impl GramEvaluator {
    pub fn new(problem: &DAProblem) -> Result<Self> {
        let dims = problem.dims();
        let a = dense_criterion_factor(problem, &SensorDesign::full(dims.n_s()))?;
        Ok(Self::from_factor(&a, dims.n_s(), dims.n_blocks()))
    }

    pub fn from_factor(a: &Matrix, n_s: usize, n_blocks: usize) -> Self {
        assert_eq!(a.ncols(), n_s * n_blocks, "factor columns must be time-major blocks of n_s");
        Self {
            gram: symmetrize(&a.tr_mul(a)),
            n_s,
            n_blocks,
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn evaluate(&self, design: &SensorDesign) -> Result<f64> {
        crate::error::check_dim("design candidates", self.n_s, design.n_s())?;
        self.evaluate_indices(design.indices())
    }

    /// `Φ` for sorted, distinct sensor indices.
    pub fn evaluate_indices(&self, indices: &[usize]) -> Result<f64> {
        let k = indices.len();
        let m = k * self.n_blocks;
        let mut sub = Matrix::identity(m, m);
        let idx: Vec<usize> = (0..self.n_blocks)
            .flat_map(|l| indices.iter().map(move |&s| l * self.n_s + s))
            .collect();
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sub[(a, b)] += self.gram[(i, j)];
            }
        }
        logdet_spd(&sub)
    }
}
