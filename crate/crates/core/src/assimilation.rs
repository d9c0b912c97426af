//! Weak-constraint 4D-Var problems: forecast prior, cost functional, MAP solve
//! by (preconditioned) conjugate gradients, strong-constraint posterior and
//! synthetic observations.

use std::sync::Arc;

use crate::covariance::{
    dense_covariance_matrix, BlockDiagCovariance, CovRef, CovarianceModel, PriorModel,
    ScaledIdentityCovariance,
};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::operators::{
    densify, CouplingDirection, CouplingOperator, EvolutionFamily, LinearOperator,
    ObservationOperator, ProblemDims, SensorDesign,
};
use crate::rng::{gaussian_vector, stream_rng, Purpose};

/// One linear-Gaussian assimilation instance.
#[derive(Clone)]
pub struct DAProblem {
    dims: ProblemDims,
    evolution: Arc<EvolutionFamily>,
    observation: ObservationOperator,
    background: CovRef,
    background_mean: Vector,
    model_error: BlockDiagCovariance,
    noise: BlockDiagCovariance,
}

impl DAProblem {
    pub fn new(
        evolution: Arc<EvolutionFamily>,
        observation: ObservationOperator,
        background: CovRef,
        background_mean: Vector,
        model_error: Vec<CovRef>,
        noise: Vec<CovRef>,
    ) -> Result<Self> {
        let d = evolution.d_s();
        let n_t = evolution.n_t();
        let dims = ProblemDims::new(d, n_t, observation.n_s())?;
        check_dim("observation times", n_t + 1, observation.n_blocks())?;
        check_dim("observation state size", d * (n_t + 1), observation.cols())?;
        check_dim("background size", d, background.dim())?;
        check_dim("background mean", d, background_mean.len())?;
        check_dim("model-error blocks", n_t, model_error.len())?;
        check_dim("noise blocks", n_t + 1, noise.len())?;
        for q in &model_error {
            check_dim("model-error block size", d, q.dim())?;
        }
        for r in &noise {
            check_dim("noise block size", dims.n_s(), r.dim())?;
        }
        Ok(Self {
            dims,
            evolution,
            observation,
            background,
            background_mean,
            model_error: BlockDiagCovariance::new(model_error),
            noise: BlockDiagCovariance::new(noise),
        })
    }

    pub fn dims(&self) -> ProblemDims {
        self.dims
    }
    pub fn evolution(&self) -> &Arc<EvolutionFamily> {
        &self.evolution
    }
    pub fn observation(&self) -> &ObservationOperator {
        &self.observation
    }
    pub fn background(&self) -> &CovRef {
        &self.background
    }
    pub fn background_mean(&self) -> &Vector {
        &self.background_mean
    }
    pub fn model_error(&self) -> &BlockDiagCovariance {
        &self.model_error
    }
    pub fn noise(&self) -> &BlockDiagCovariance {
        &self.noise
    }

    pub fn prior_model(&self) -> PriorModel {
        PriorModel::new(
            &self.background_mean,
            self.background.clone(),
            self.model_error.blocks(),
        )
        .expect("dimensions validated at construction")
    }

    pub fn coupling(&self, direction: CouplingDirection) -> CouplingOperator {
        CouplingOperator::new(self.dims, self.evolution.clone(), direction)
            .expect("dimensions validated at construction")
    }

    /// The same problem observing only the design's sensors.
    pub fn restricted(&self, design: &SensorDesign) -> Result<Self> {
        check_dim("design candidates", self.dims.n_s(), design.n_s())?;
        Ok(Self {
            dims: self.dims.with_sensors(design.k()),
            evolution: self.evolution.clone(),
            observation: self.observation.restricted(design)?,
            background: self.background.clone(),
            background_mean: self.background_mean.clone(),
            model_error: self.model_error.clone(),
            noise: self.noise.restrict_each(design.indices())?,
        })
    }

    /// Same problem with different model-error covariances.
    pub fn with_model_error(&self, model_error: Vec<CovRef>) -> Result<Self> {
        check_dim("model-error blocks", self.dims.n_t(), model_error.len())?;
        for q in &model_error {
            check_dim("model-error block size", self.dims.d_s(), q.dim())?;
        }
        Ok(Self {
            model_error: BlockDiagCovariance::new(model_error),
            ..self.clone()
        })
    }
}

/// Law of the trajectory before data: mean `L⁻¹μ_mod`, covariance `L⁻¹Γ_mod L⁻ᵀ`.
pub struct ForecastPrior {
    coupling: CouplingOperator,
    inverse: CouplingOperator,
    covariance: BlockDiagCovariance,
    mean: Vector,
}

impl ForecastPrior {
    pub fn new(problem: &DAProblem) -> Self {
        let prior = problem.prior_model();
        let inverse = problem.coupling(CouplingDirection::Inverse);
        let mean = inverse.apply(&prior.mean);
        Self {
            coupling: problem.coupling(CouplingDirection::Forward),
            inverse,
            covariance: prior.covariance,
            mean,
        }
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn apply_covariance(&self, x: &Vector) -> Vector {
        self.inverse
            .apply(&self.covariance.apply(&self.inverse.apply_transpose(x)))
    }

    pub fn apply_precision(&self, x: &Vector) -> Vector {
        self.coupling
            .apply_transpose(&self.covariance.apply_inverse(&self.coupling.apply(x)))
    }

    pub fn apply_factor(&self, x: &Vector) -> Vector {
        self.inverse.apply(&self.covariance.apply_factor(x))
    }

    pub fn factor_cols(&self) -> usize {
        self.covariance.factor_cols()
    }
}

/// `J_WC(u) = ½‖Lu − μ_mod‖²_{Γ_mod⁻¹} + ½‖y − Ou‖²_{Γ_R⁻¹}`, i.e. the background,
/// model-error and data misfits (data term over ℓ = 0, …, n_T).
pub fn wc_cost(problem: &DAProblem, u: &Vector, y: &Vector) -> Result<f64> {
    let dims = problem.dims();
    check_dim("trajectory length", dims.n_d(), u.len())?;
    check_dim("observation length", dims.n_m(), y.len())?;
    let prior = problem.prior_model();
    let p = problem.coupling(CouplingDirection::Forward).apply(u) - &prior.mean;
    let r = y - problem.observation().apply(u);
    let model_term = p.dot(&prior.covariance.apply_inverse(&p));
    let data_term = r.dot(&problem.noise().apply_inverse(&r));
    Ok(0.5 * (model_term + data_term))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    /// Apply the forecast-prior covariance `Γ_pr = L⁻¹Γ_mod L⁻ᵀ`.
    ForecastPrior,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
            preconditioner: Preconditioner::ForecastPrior,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorResult {
    pub map_estimate: Vector,
    pub iterations: usize,
    /// Relative preconditioned residual norm after each iteration (entry 0 is the start).
    pub residual_history: Vec<f64>,
    /// Relative residual of the returned iterate, recomputed from scratch.
    pub final_residual: f64,
}

/// Posterior precision `OᵀΓ_R⁻¹O + LᵀΓ_mod⁻¹L` as an operator.
pub struct PosteriorPrecision {
    observation: ObservationOperator,
    noise: BlockDiagCovariance,
    prior: ForecastPrior,
}

impl PosteriorPrecision {
    pub fn new(problem: &DAProblem) -> Self {
        Self {
            observation: problem.observation().clone(),
            noise: problem.noise().clone(),
            prior: ForecastPrior::new(problem),
        }
    }
}

impl LinearOperator for PosteriorPrecision {
    fn rows(&self) -> usize {
        self.observation.cols()
    }
    fn cols(&self) -> usize {
        self.observation.cols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        let data = self
            .observation
            .apply_transpose(&self.noise.apply_inverse(&self.observation.apply(x)));
        data + self.prior.apply_precision(x)
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        self.apply(y)
    }
}

/// Right-hand side `OᵀΓ_R⁻¹y + (Γ_B⁻¹u₀ᵇ; 0)`.
pub fn map_rhs(problem: &DAProblem, y: &Vector) -> Vector {
    let d = problem.dims().d_s();
    let mut b = problem
        .observation()
        .apply_transpose(&problem.noise().apply_inverse(y));
    let prior_part = problem.background().apply_inverse(problem.background_mean());
    let mut head = b.rows_mut(0, d);
    head += prior_part;
    b
}

/// The same right-hand side formed as `OᵀΓ_R⁻¹y + LᵀΓ_mod⁻¹L u_pr`.
pub fn map_rhs_via_prior(problem: &DAProblem, y: &Vector) -> Vector {
    let prior = ForecastPrior::new(problem);
    problem
        .observation()
        .apply_transpose(&problem.noise().apply_inverse(y))
        + prior.apply_precision(prior.mean())
}

/// MAP estimate by conjugate gradients started at the prior mean.
pub fn map_solve(problem: &DAProblem, y: &Vector, options: &SolverOptions) -> Result<PosteriorResult> {
    check_dim("observation length", problem.dims().n_m(), y.len())?;
    if !(options.tol > 0.0) {
        return Err(Error::InvalidArgument("solver tolerance must be positive".into()));
    }
    let h = PosteriorPrecision::new(problem);
    let precondition = |r: &Vector| match options.preconditioner {
        Preconditioner::None => r.clone(),
        Preconditioner::ForecastPrior => h.prior.apply_covariance(r),
    };
    let b = map_rhs(problem, y);
    let b_norm = b.dot(&precondition(&b)).max(0.0).sqrt();
    let relative = |r: &Vector, z: &Vector| {
        if b_norm == 0.0 {
            r.dot(z).max(0.0).sqrt()
        } else {
            r.dot(z).max(0.0).sqrt() / b_norm
        }
    };

    let mut x = h.prior.mean().clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    // Outer loop restarts from the explicit residual if the recurrence drifted.
    loop {
        let mut r = &b - h.apply(&x);
        let mut z = precondition(&r);
        let mut res = relative(&r, &z);
        if history.is_empty() {
            history.push(res);
        }
        if res <= options.tol {
            return Ok(PosteriorResult {
                map_estimate: x,
                iterations,
                residual_history: history,
                final_residual: res,
            });
        }
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        while iterations < options.max_iter {
            let hp = h.apply(&p);
            let php = p.dot(&hp);
            if !(php > 0.0) {
                return Err(Error::NotPositiveDefinite(
                    "posterior precision along a search direction".into(),
                ));
            }
            let alpha = rz / php;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &hp, 1.0);
            z = precondition(&r);
            iterations += 1;
            res = relative(&r, &z);
            history.push(res);
            if res <= options.tol {
                break;
            }
            let rz_new = r.dot(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            p = &z + &p * beta;
        }
        if res > options.tol {
            let r_true = &b - h.apply(&x);
            let z_true = precondition(&r_true);
            return Err(Error::NotConverged {
                iterations,
                residual: relative(&r_true, &z_true),
                best: Box::new(x),
            });
        }
    }
}

/// Relative residual of an iterate, computed exactly as `map_solve` reports it.
pub fn map_residual(problem: &DAProblem, y: &Vector, u: &Vector, preconditioner: Preconditioner) -> f64 {
    let h = PosteriorPrecision::new(problem);
    let precondition = |r: &Vector| match preconditioner {
        Preconditioner::None => r.clone(),
        Preconditioner::ForecastPrior => h.prior.apply_covariance(r),
    };
    let b = map_rhs(problem, y);
    let b_norm = b.dot(&precondition(&b)).max(0.0).sqrt();
    let r = &b - h.apply(u);
    let res = r.dot(&precondition(&r)).max(0.0).sqrt();
    if b_norm == 0.0 {
        res
    } else {
        res / b_norm
    }
}

/// Strong-constraint posterior over the initial state.
#[derive(Debug, Clone)]
pub struct ScPosterior {
    pub mean: Vector,
    /// `Γ_B⁻¹ + Σ_ℓ M_{0→ℓ}ᵀ O_ℓᵀ R_ℓ⁻¹ O_ℓ M_{0→ℓ}`, dense.
    pub precision: Matrix,
}

pub fn sc_posterior(problem: &DAProblem, y: &Vector) -> Result<ScPosterior> {
    let dims = problem.dims();
    check_dim("observation length", dims.n_m(), y.len())?;
    let d = dims.d_s();
    let n_s = dims.n_s();
    let bg_inv = densify(&crate::covariance::CovarianceOperator::new(
        problem.background().clone(),
        crate::covariance::CovarianceAction::Inverse,
    ));
    let mut precision = crate::linalg::symmetrize(&bg_inv);
    let mut rhs = problem.background().apply_inverse(problem.background_mean());
    let mut propagated = Matrix::identity(d, d);
    for l in 0..dims.n_blocks() {
        if l > 0 {
            propagated = problem.evolution().apply_step_block(l - 1, &propagated);
        }
        if n_s == 0 {
            continue;
        }
        let obs = problem.observation().per_step(l).apply_block(&propagated);
        let r = &problem.noise().blocks()[l];
        let mut weighted = Matrix::zeros(n_s, d);
        for j in 0..d {
            weighted.set_column(j, &r.apply_inverse(&obs.column(j).into_owned()));
        }
        precision += obs.tr_mul(&weighted);
        let yl = y.rows(l * n_s, n_s).into_owned();
        rhs += obs.tr_mul(&r.apply_inverse(&yl));
    }
    let precision = crate::linalg::symmetrize(&precision);
    let chol = nalgebra::Cholesky::new(precision.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("strong-constraint precision".into()))?;
    Ok(ScPosterior {
        mean: chol.solve(&rhs),
        precision,
    })
}

/// Noise standard deviations `σ_ℓ = fraction · RMS(O_ℓ u_ℓ)` of a noiseless trajectory.
pub fn relative_noise_levels(
    observation: &ObservationOperator,
    trajectory: &Vector,
    noise_fraction: f64,
) -> Result<Vec<f64>> {
    check_dim("trajectory length", observation.cols(), trajectory.len())?;
    let clean = observation.apply(trajectory);
    let n_s = observation.n_s();
    Ok((0..observation.n_blocks())
        .map(|l| {
            let block = clean.rows(l * n_s, n_s);
            noise_fraction * (block.norm_squared() / n_s as f64).sqrt()
        })
        .collect())
}

/// Noise covariances `R_ℓ = σ_ℓ² I`.
pub fn noise_covariances(n_s: usize, sigmas: &[f64]) -> Result<Vec<CovRef>> {
    sigmas
        .iter()
        .map(|&s| {
            ScaledIdentityCovariance::new(n_s, s * s).map(|c| Arc::new(c) as CovRef).map_err(|_| {
                Error::InvalidArgument(format!("noise level {s} gives a singular noise covariance"))
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub observations: Vector,
    pub noiseless: Vector,
    pub sigmas: Vec<f64>,
    pub trajectory: Vector,
}

/// Observations of the true trajectory with relative Gaussian noise.
pub fn simulate_observations(
    truth: &EvolutionFamily,
    u0_true: &Vector,
    observation: &ObservationOperator,
    noise_fraction: f64,
    seed: u64,
) -> Result<SyntheticData> {
    check_dim("true initial state", truth.d_s(), u0_true.len())?;
    check_dim("observation times", truth.n_t() + 1, observation.n_blocks())?;
    let trajectory = truth.trajectory(u0_true);
    let noiseless = observation.apply(&trajectory);
    let sigmas = relative_noise_levels(observation, &trajectory, noise_fraction)?;
    let n_s = observation.n_s();
    let mut observations = noiseless.clone();
    for (l, &s) in sigmas.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let e = gaussian_vector(&mut stream_rng(seed, Purpose::Observations, l as u64), n_s);
        let mut block = observations.rows_mut(l * n_s, n_s);
        block.axpy(s, &e, 1.0);
    }
    Ok(SyntheticData {
        observations,
        noiseless,
        sigmas,
        trajectory,
    })
}

/// Explicitly assembled matrices of a small problem, built from densified
/// steps and covariances rather than the recursions. Used as an oracle.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub coupling: Matrix,
    pub model_covariance: Matrix,
    pub observation: Matrix,
    pub noise_covariance: Matrix,
    pub background_mean: Vector,
}

impl DenseSystem {
    pub fn assemble(problem: &DAProblem) -> Self {
        let dims = problem.dims();
        let (d, nb) = (dims.d_s(), dims.n_blocks());
        let mut coupling = Matrix::identity(dims.n_d(), dims.n_d());
        for l in 1..nb {
            let m = densify(problem.evolution().step(l - 1).as_ref());
            coupling
                .view_mut((l * d, (l - 1) * d), (d, d))
                .copy_from(&(-m));
        }
        let mut model_covariance = Matrix::zeros(dims.n_d(), dims.n_d());
        model_covariance
            .view_mut((0, 0), (d, d))
            .copy_from(&dense_covariance_matrix(problem.background().as_ref()));
        for (l, q) in problem.model_error().blocks().iter().enumerate() {
            model_covariance
                .view_mut(((l + 1) * d, (l + 1) * d), (d, d))
                .copy_from(&dense_covariance_matrix(q.as_ref()));
        }
        let n_s = dims.n_s();
        let mut observation = Matrix::zeros(dims.n_m(), dims.n_d());
        let mut noise_covariance = Matrix::zeros(dims.n_m(), dims.n_m());
        for l in 0..nb {
            observation
                .view_mut((l * n_s, l * d), (n_s, d))
                .copy_from(&densify(problem.observation().per_step(l).as_ref()));
            noise_covariance
                .view_mut((l * n_s, l * n_s), (n_s, n_s))
                .copy_from(&dense_covariance_matrix(problem.noise().blocks()[l].as_ref()));
        }
        let mut background_mean = Vector::zeros(dims.n_d());
        background_mean.rows_mut(0, d).copy_from(problem.background_mean());
        Self {
            coupling,
            model_covariance,
            observation,
            noise_covariance,
            background_mean,
        }
    }

    /// `(H, rhs)` of the MAP normal equations.
    pub fn posterior_system(&self, y: &Vector) -> (Matrix, Vector) {
        let gmod_inv = self.model_covariance.clone().try_inverse().expect("SPD");
        let r_inv = self.noise_covariance.clone().try_inverse().expect("SPD");
        let prior_precision = self.coupling.transpose() * &gmod_inv * &self.coupling;
        let h = self.observation.transpose() * &r_inv * &self.observation + &prior_precision;
        let u_pr = self
            .coupling
            .clone()
            .lu()
            .solve(&self.background_mean)
            .expect("unit lower triangular");
        let rhs = self.observation.transpose() * &r_inv * y + &prior_precision * u_pr;
        (crate::linalg::symmetrize(&h), rhs)
    }

    /// `Γ_pr = L⁻¹ Γ_mod L⁻ᵀ`.
    pub fn forecast_covariance(&self) -> Matrix {
        let linv = self.coupling.clone().try_inverse().expect("unit lower triangular");
        crate::linalg::symmetrize(&(&linv * &self.model_covariance * linv.transpose()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::random_instance;
    use crate::operators::{DenseOperator, OpRef};

    fn scalar_problem(m: f64, obs: &[f64]) -> DAProblem {
        let step: OpRef = Arc::new(DenseOperator::new(Matrix::from_element(1, 1, m)));
        let fam = Arc::new(EvolutionFamily::stationary(step, 1).unwrap());
        let o: OpRef = Arc::new(DenseOperator::new(Matrix::from_row_slice(obs.len(), 1, obs)));
        let unit = |n| Arc::new(ScaledIdentityCovariance::new(n, 1.0).unwrap()) as CovRef;
        DAProblem::new(
            fam,
            ObservationOperator::fixed(o, 1),
            unit(1),
            Vector::zeros(1),
            vec![unit(1)],
            vec![unit(obs.len()), unit(obs.len())],
        )
        .unwrap()
    }

    #[test]
    fn wc_cost_hand_example() {
        let p = scalar_problem(2.0, &[1.0]);
        let j = wc_cost(&p, &Vector::from_vec(vec![1.0, 3.0]), &Vector::zeros(2)).unwrap();
        assert!((j - 6.0).abs() < 1e-15);
    }

    #[test]
    fn wc_cost_vanishes_on_consistent_data() {
        let p = random_instance(3, 2, 2, 4);
        let u = p.evolution().trajectory(p.background_mean());
        let y = p.observation().apply(&u);
        assert!(wc_cost(&p, &u, &y).unwrap().abs() < 1e-20);
    }

    #[test]
    fn sc_posterior_scalar() {
        let mut p = scalar_problem(2.0, &[1.0]);
        p.background_mean = Vector::from_element(1, 1.0);
        let sc = sc_posterior(&p, &Vector::zeros(2)).unwrap();
        assert!((sc.precision[(0, 0)] - 6.0).abs() < 1e-14);
        assert!((sc.mean[0] - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn sc_posterior_without_sensors_is_prior() {
        let p = random_instance(3, 2, 2, 9);
        let empty = p.restricted(&SensorDesign::empty(2)).unwrap();
        let sc = sc_posterior(&empty, &Vector::zeros(0)).unwrap();
        assert!((sc.mean - p.background_mean()).amax() < 1e-12);
    }

    #[test]
    fn consistent_data_needs_no_iterations() {
        let p = random_instance(2, 2, 2, 3);
        let prior = ForecastPrior::new(&p);
        let y = p.observation().apply(prior.mean());
        let res = map_solve(&p, &y, &SolverOptions::default()).unwrap();
        assert!(res.iterations <= 1);
        assert!((res.map_estimate - prior.mean()).amax() < 1e-10);
    }

    #[test]
    fn map_matches_dense_solve() {
        for seed in 0..3 {
            let p = random_instance(2, 2, 2, seed);
            let y = gaussian_vector(&mut stream_rng(seed, Purpose::Observations, 99), p.dims().n_m());
            let dense = DenseSystem::assemble(&p);
            let (h, rhs) = dense.posterior_system(&y);
            let reference = h.lu().solve(&rhs).unwrap();
            for pc in [Preconditioner::None, Preconditioner::ForecastPrior] {
                let opts = SolverOptions {
                    preconditioner: pc,
                    tol: 1e-12,
                    ..Default::default()
                };
                let res = map_solve(&p, &y, &opts).unwrap();
                assert!((&res.map_estimate - &reference).norm() <= 1e-8 * reference.norm());
                let again = map_residual(&p, &y, &res.map_estimate, pc);
                assert!((again - res.final_residual).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rhs_forms_agree() {
        let p = random_instance(3, 3, 2, 5);
        let y = gaussian_vector(&mut stream_rng(5, Purpose::Observations, 0), p.dims().n_m());
        let a = map_rhs(&p, &y);
        let b = map_rhs_via_prior(&p, &y);
        assert!((&a - &b).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn forecast_prior_roundtrip() {
        let p = random_instance(3, 3, 2, 6);
        let fp = ForecastPrior::new(&p);
        let x = gaussian_vector(&mut stream_rng(6, Purpose::Instance, 50), p.dims().n_d());
        let back = fp.apply_precision(&fp.apply_covariance(&x));
        assert!((back - &x).norm() <= 1e-8 * x.norm());
        let dense = DenseSystem::assemble(&p).forecast_covariance();
        let n = p.dims().n_d();
        let gf = Matrix::from_columns(
            &Matrix::identity(n, n)
                .column_iter()
                .map(|c| fp.apply_factor(&c.into_owned()))
                .collect::<Vec<_>>(),
        );
        assert!((&gf * gf.transpose() - &dense).norm() <= 1e-10 * dense.norm());
    }

    #[test]
    fn zero_noise_reproduces_clean_data() {
        let p = random_instance(3, 2, 2, 1);
        let d = simulate_observations(p.evolution(), p.background_mean(), p.observation(), 0.0, 1)
            .unwrap();
        assert_eq!(d.observations, d.noiseless);
        let a = simulate_observations(p.evolution(), p.background_mean(), p.observation(), 0.02, 3)
            .unwrap();
        let b = simulate_observations(p.evolution(), p.background_mean(), p.observation(), 0.02, 3)
            .unwrap();
        assert_eq!(a.observations, b.observations);
    }
}
