//! Built-in model problems: 1D heat equation with an oscillatory true
//! diffusivity and its homogenized approximation, and 2D advection-diffusion
//! on a structured triangulation. Plus small random instances for testing.

use std::sync::Arc;

use nalgebra::Cholesky;

use crate::assimilation::{noise_covariances, relative_noise_levels, DAProblem};
use crate::covariance::{
    dense_covariance_matrix, sample_error_covariance, CovRef, DenseCovariance,
    EllipticPriorCovariance, ScaledIdentityCovariance,
};
use crate::error::{Error, Result};
use crate::linalg::{matrix_power, Matrix, Vector};
use crate::operators::{
    DenseOperator, EvolutionFamily, LinearOperator, ObservationOperator, OpRef,
    SparseRowsOperator,
};
use crate::rng::{gaussian_matrix, gaussian_vector, stream_rng, Purpose};

/// Above this state size window maps are applied step by step instead of
/// being materialized as a matrix power.
const DENSE_POWER_LIMIT: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusivity {
    Constant(f64),
    /// `2 + sin(2πx/ε)`.
    Oscillatory { epsilon: f64 },
}

impl Diffusivity {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Diffusivity::Constant(k) => k,
            Diffusivity::Oscillatory { epsilon } => {
                2.0 + (2.0 * std::f64::consts::PI * x / epsilon).sin()
            }
        }
    }
}

/// Uniform partition of (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mesh1D {
    pub n_cells: usize,
}

impl Mesh1D {
    pub fn new(n_cells: usize) -> Result<Self> {
        if n_cells < 2 {
            return Err(Error::InvalidArgument("1D mesh needs at least two cells".into()));
        }
        Ok(Self { n_cells })
    }
    pub fn h(&self) -> f64 {
        1.0 / self.n_cells as f64
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_cells).map(|i| i as f64 * self.h()).collect()
    }
    /// Interior nodes, i.e. the state coordinates after Dirichlet elimination.
    pub fn interior_nodes(&self) -> Vec<f64> {
        (1..self.n_cells).map(|i| i as f64 * self.h()).collect()
    }
}

/// Mass, stiffness and (for advection) convection matrices.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pub mass: Matrix,
    pub stiffness: Matrix,
    pub advection: Option<Matrix>,
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// P1 matrices on all nodes, boundary included.
pub fn assemble_heat_full(mesh: &Mesh1D, kappa: Diffusivity) -> Result<FemMatrices> {
    let n = mesh.n_cells + 1;
    let h = mesh.h();
    let mut mass = Matrix::zeros(n, n);
    let mut stiffness = Matrix::zeros(n, n);
    for e in 0..mesh.n_cells {
        let (a, b) = (e as f64 * h, (e + 1) as f64 * h);
        let mut integral = 0.0;
        for (xi, w) in GAUSS3 {
            let x = 0.5 * (a + b) + 0.5 * h * xi;
            let k = kappa.eval(x);
            if !(k > 0.0) {
                return Err(Error::InvalidArgument(format!("diffusivity {k} at x = {x}")));
            }
            integral += 0.5 * h * w * k;
        }
        let kloc = integral / (h * h);
        for (i, j, m, s) in [
            (e, e, 2.0, 1.0),
            (e + 1, e + 1, 2.0, 1.0),
            (e, e + 1, 1.0, -1.0),
            (e + 1, e, 1.0, -1.0),
        ] {
            mass[(i, j)] += h / 6.0 * m;
            stiffness[(i, j)] += kloc * s;
        }
    }
    Ok(FemMatrices {
        mass,
        stiffness,
        advection: None,
    })
}

/// P1 heat matrices with homogeneous Dirichlet nodes eliminated.
pub fn assemble_heat(mesh: &Mesh1D, kappa: Diffusivity) -> Result<FemMatrices> {
    let full = assemble_heat_full(mesh, kappa)?;
    let m = mesh.n_cells - 1;
    Ok(FemMatrices {
        mass: full.mass.view((1, 1), (m, m)).into_owned(),
        stiffness: full.stiffness.view((1, 1), (m, m)).into_owned(),
        advection: None,
    })
}

/// Implicit Euler step `(N + Δt K)⁻¹ N` of the heat equation.
pub fn heat_step_matrix(fem: &FemMatrices, dt: f64) -> Result<Matrix> {
    let lhs = &fem.mass + &fem.stiffness * dt;
    let chol = Cholesky::new(lhs).ok_or_else(|| Error::NotPositiveDefinite("N + Δt K".into()))?;
    Ok(chol.solve(&fem.mass))
}

/// `S^count` applied as repeated products.
struct RepeatedStep {
    step: Matrix,
    count: usize,
}

impl LinearOperator for RepeatedStep {
    fn rows(&self) -> usize {
        self.step.nrows()
    }
    fn cols(&self) -> usize {
        self.step.ncols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        (0..self.count).fold(x.clone(), |u, _| &self.step * u)
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        (0..self.count).fold(y.clone(), |w, _| self.step.tr_mul(&w))
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        (0..self.count).fold(x.clone(), |u, _| &self.step * u)
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        (0..self.count).fold(y.clone(), |w, _| self.step.tr_mul(&w))
    }
}

/// One observation window: `count` fine steps.
pub fn window_operator(step: Matrix, count: usize) -> OpRef {
    if step.nrows() <= DENSE_POWER_LIMIT {
        Arc::new(DenseOperator::new(matrix_power(&step, count as u64)))
    } else {
        Arc::new(RepeatedStep { step, count })
    }
}

/// Linear interpolation rows at points of (0, 1), boundary nodes eliminated.
pub fn interpolation_1d(mesh: &Mesh1D, points: &[f64]) -> Result<SparseRowsOperator> {
    let n = mesh.n_cells;
    let h = mesh.h();
    let mut rows = Vec::with_capacity(points.len());
    for &x in points {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidArgument(format!("sensor {x} outside (0, 1)")));
        }
        let mut t = x / h;
        if (t - t.round()).abs() < 1e-10 {
            t = t.round();
        }
        let cell = (t.floor() as usize).min(n - 1);
        let s = t - cell as f64;
        let mut row = Vec::new();
        for (node, w) in [(cell, 1.0 - s), (cell + 1, s)] {
            if w != 0.0 && node >= 1 && node < n {
                row.push((node - 1, w));
            }
        }
        rows.push(row);
    }
    SparseRowsOperator::new(n - 1, rows)
}

/// `count` points equispaced on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// A model problem ready for assimilation, with what is needed to simulate data.
#[derive(Clone)]
pub struct ModelProblem {
    pub problem: DAProblem,
    pub truth: Arc<EvolutionFamily>,
    pub true_initial: Vector,
    /// Coordinates of the state degrees of freedom.
    pub state_coords: Vec<Vec<f64>>,
    pub sensor_coords: Vec<Vec<f64>>,
    pub noise_sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatModelConfig {
    pub n_cells: usize,
    pub epsilon: f64,
    pub kappa0: f64,
    pub final_time: f64,
    pub n_t: usize,
    pub steps_per_window: usize,
    pub mu: f64,
    pub sigma: f64,
    pub mu_b: f64,
    pub bump_scale: f64,
    pub gamma: f64,
    pub delta: f64,
    pub n_error_samples: usize,
    pub n_sensors: usize,
    pub sensor_min: f64,
    pub sensor_max: f64,
    pub noise_fraction: f64,
}

impl HeatModelConfig {
    pub fn paper() -> Self {
        Self {
            n_cells: 400,
            epsilon: 1.0 / 16.0,
            kappa0: 3f64.sqrt(),
            final_time: 4e-2,
            n_t: 10,
            steps_per_window: 256,
            mu: 0.7,
            sigma: 0.08,
            mu_b: 0.2,
            bump_scale: 0.2,
            gamma: 0.1,
            delta: 1.0,
            n_error_samples: 40,
            n_sensors: 28,
            sensor_min: 0.025,
            sensor_max: 0.975,
            noise_fraction: 0.02,
        }
    }

    /// Coarsest mesh that still resolves the microstructure with `h ≤ ε/8`.
    pub fn desk() -> Self {
        Self {
            n_cells: 128,
            ..Self::paper()
        }
    }

    pub fn dt(&self) -> f64 {
        self.final_time / (self.n_t * self.steps_per_window) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.n_cells as f64 * self.epsilon < 8.0 - 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mesh with {} cells does not resolve ε = {} (need h ≤ ε/8)",
                self.n_cells, self.epsilon
            )));
        }
        if self.n_t == 0 || self.steps_per_window == 0 || !(self.final_time > 0.0) {
            return Err(Error::InvalidArgument("time discretization is empty".into()));
        }
        if !(self.sensor_min >= 0.0 && self.sensor_max <= 1.0 && self.sensor_min <= self.sensor_max)
        {
            return Err(Error::InvalidArgument("sensor interval outside (0, 1)".into()));
        }
        Ok(())
    }
}

fn gaussian_bump(x: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - mu) / sigma).powi(2)).exp()
}

/// The 1D heat problem: assimilation with `κ⁰`, truth and data with `κ^ε`.
pub fn export_heat_problem(cfg: &HeatModelConfig, seed: u64) -> Result<ModelProblem> {
    cfg.validate()?;
    let mesh = Mesh1D::new(cfg.n_cells)?;
    let dt = cfg.dt();
    let fem_true = assemble_heat(&mesh, Diffusivity::Oscillatory { epsilon: cfg.epsilon })?;
    let fem_approx = assemble_heat(&mesh, Diffusivity::Constant(cfg.kappa0))?;
    let true_window = window_operator(heat_step_matrix(&fem_true, dt)?, cfg.steps_per_window);
    let approx_window = window_operator(heat_step_matrix(&fem_approx, dt)?, cfg.steps_per_window);
    let truth = Arc::new(EvolutionFamily::stationary(true_window, cfg.n_t)?);
    let approx = Arc::new(EvolutionFamily::stationary(approx_window, cfg.n_t)?);

    let xs = mesh.interior_nodes();
    let true_initial = Vector::from_iterator(
        xs.len(),
        xs.iter().map(|&x| gaussian_bump(x, cfg.mu, cfg.sigma)),
    );
    let background_mean = Vector::from_iterator(
        xs.len(),
        xs.iter().map(|&x| {
            gaussian_bump(x, cfg.mu, cfg.sigma) + cfg.bump_scale * gaussian_bump(x, cfg.mu_b, cfg.sigma)
        }),
    );
    let background: CovRef = Arc::new(EllipticPriorCovariance::new(
        cfg.gamma,
        cfg.delta,
        fem_approx.mass.clone(),
        fem_approx.stiffness.clone(),
    )?);
    let model_error = sample_error_covariance(
        &truth,
        &approx,
        background.as_ref(),
        &background_mean,
        cfg.n_error_samples,
        seed,
    )?;
    truth.reset_counters();
    approx.reset_counters();

    let sensors = linspace(cfg.sensor_min, cfg.sensor_max, cfg.n_sensors);
    let obs_step: OpRef = Arc::new(interpolation_1d(&mesh, &sensors)?);
    let observation = ObservationOperator::fixed(obs_step, cfg.n_t);
    let true_traj = truth.trajectory(&true_initial);
    truth.reset_counters();
    let sigmas = relative_noise_levels(&observation, &true_traj, cfg.noise_fraction)?;
    let noise = noise_covariances(cfg.n_sensors, &sigmas)?;
    let problem = DAProblem::new(approx, observation, background, background_mean, model_error, noise)?;
    Ok(ModelProblem {
        problem,
        truth,
        true_initial,
        state_coords: xs.iter().map(|&x| vec![x]).collect(),
        sensor_coords: sensors.iter().map(|&x| vec![x]).collect(),
        noise_sigmas: sigmas,
    })
}

/// Structured triangulation of (−1, 1)² with `n × n` vertices, vertex
/// `(i, j)` at index `j·n + i`, two counter-clockwise triangles per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mesh2D {
    pub n: usize,
}

impl Mesh2D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("2D mesh needs at least 2×2 vertices".into()));
        }
        Ok(Self { n })
    }
    pub fn h(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }
    pub fn n_vertices(&self) -> usize {
        self.n * self.n
    }
    pub fn vertex(&self, idx: usize) -> [f64; 2] {
        let (i, j) = (idx % self.n, idx / self.n);
        [-1.0 + i as f64 * self.h(), -1.0 + j as f64 * self.h()]
    }
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        let n = self.n;
        let mut out = Vec::with_capacity(2 * (n - 1) * (n - 1));
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let v00 = j * n + i;
                let v10 = v00 + 1;
                let v01 = v00 + n;
                let v11 = v01 + 1;
                out.push([v00, v10, v11]);
                out.push([v00, v11, v01]);
            }
        }
        out
    }
}

/// The cavity-like field `v(x, y) = (2y(1 − x²), −2x(1 − y)²)`.
pub fn cavity_velocity(x: f64, y: f64) -> [f64; 2] {
    [2.0 * y * (1.0 - x * x), -2.0 * x * (1.0 - y) * (1.0 - y)]
}

/// P1 mass, unit-diffusivity stiffness and convection `B_ij = ∫ (v·∇φ_j) φ_i`,
/// with `v` evaluated at the three interior barycentric quadrature points.
pub fn assemble_advection_diffusion(
    mesh: &Mesh2D,
    velocity: impl Fn(f64, f64) -> [f64; 2],
) -> Result<FemMatrices> {
    let nv = mesh.n_vertices();
    let mut mass = Matrix::zeros(nv, nv);
    let mut stiffness = Matrix::zeros(nv, nv);
    let mut advection = Matrix::zeros(nv, nv);
    const BARY: [[f64; 3]; 3] = [
        [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
        [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
    ];
    for tri in mesh.triangles() {
        let p = tri.map(|v| mesh.vertex(v));
        let (e1, e2) = (
            [p[1][0] - p[0][0], p[1][1] - p[0][1]],
            [p[2][0] - p[0][0], p[2][1] - p[0][1]],
        );
        let det = e1[0] * e2[1] - e1[1] * e2[0];
        let area = 0.5 * det;
        if !(area > 1e-14) {
            return Err(Error::InvalidArgument(format!(
                "degenerate or clockwise triangle {tri:?}"
            )));
        }
        // Gradients of the barycentric coordinates.
        let g1 = [e2[1] / det, -e2[0] / det];
        let g2 = [-e1[1] / det, e1[0] / det];
        let grads = [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2];
        let mut vq = [[0.0; 2]; 3];
        for (q, b) in BARY.iter().enumerate() {
            let x = b[0] * p[0][0] + b[1] * p[1][0] + b[2] * p[2][0];
            let y = b[0] * p[0][1] + b[1] * p[1][1] + b[2] * p[2][1];
            vq[q] = velocity(x, y);
        }
        for a in 0..3 {
            for b in 0..3 {
                let (i, j) = (tri[a], tri[b]);
                mass[(i, j)] += area / 12.0 * if a == b { 2.0 } else { 1.0 };
                stiffness[(i, j)] +=
                    area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                let mut conv = 0.0;
                for q in 0..3 {
                    conv += (vq[q][0] * grads[b][0] + vq[q][1] * grads[b][1]) * BARY[q][a];
                }
                advection[(i, j)] += area / 3.0 * conv;
            }
        }
    }
    Ok(FemMatrices {
        mass,
        stiffness,
        advection: Some(advection),
    })
}

/// Implicit Euler step `(N + ΔtB + ΔtK)⁻¹ N`.
pub fn ad_step_matrix(fem: &FemMatrices, dt: f64) -> Result<Matrix> {
    let mut lhs = &fem.mass + &fem.stiffness * dt;
    if let Some(b) = &fem.advection {
        lhs += b * dt;
    }
    lhs.lu()
        .solve(&fem.mass)
        .ok_or_else(|| Error::Singular("advection-diffusion step matrix".into()))
}

/// P1 interpolation rows at points of the square.
pub fn interpolation_2d(mesh: &Mesh2D, points: &[[f64; 2]]) -> Result<SparseRowsOperator> {
    let n = mesh.n;
    let h = mesh.h();
    let mut rows = Vec::with_capacity(points.len());
    for &[px, py] in points {
        if !((-1.0..=1.0).contains(&px) && (-1.0..=1.0).contains(&py)) {
            return Err(Error::InvalidArgument(format!(
                "sensor ({px}, {py}) outside the domain"
            )));
        }
        let fi = (px + 1.0) / h;
        let fj = (py + 1.0) / h;
        let i = (fi.floor() as usize).min(n - 2);
        let j = (fj.floor() as usize).min(n - 2);
        let (s, t) = (fi - i as f64, fj - j as f64);
        let v00 = j * n + i;
        let (v10, v01, v11) = (v00 + 1, v00 + n, v00 + n + 1);
        let weights = if t <= s {
            [(v00, 1.0 - s), (v10, s - t), (v11, t)]
        } else {
            [(v00, 1.0 - t), (v11, s), (v01, t - s)]
        };
        rows.push(weights.into_iter().filter(|&(_, w)| w != 0.0).collect());
    }
    SparseRowsOperator::new(mesh.n_vertices(), rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdModelConfig {
    pub n_vertices: usize,
    pub final_time: f64,
    pub n_steps: usize,
    pub n_t: usize,
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub sensor_grid: usize,
    pub sensor_extent: f64,
    pub noise_fraction: f64,
    pub blob_centers: Vec<[f64; 2]>,
    pub blob_width: f64,
}

impl AdModelConfig {
    pub fn desk() -> Self {
        Self {
            n_vertices: 17,
            final_time: 2.0,
            n_steps: 200,
            n_t: 10,
            gamma: 2.70,
            delta: 2.5,
            alpha: 0.05,
            sensor_grid: 9,
            sensor_extent: 0.8,
            noise_fraction: 0.02,
            blob_centers: vec![[0.35, 0.55], [-0.45, -0.25]],
            blob_width: 0.2,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_vertices: 41,
            ..Self::desk()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_steps % self.n_t != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} steps do not split into {} windows",
                self.n_steps, self.n_t
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("model-error scale α must be positive".into()));
        }
        if !(self.sensor_extent > 0.0 && self.sensor_extent <= 1.0) {
            return Err(Error::InvalidArgument("sensor extent must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The 2D advection-diffusion problem with scaled-identity model error.
pub fn export_ad_problem(cfg: &AdModelConfig) -> Result<ModelProblem> {
    cfg.validate()?;
    let mesh = Mesh2D::new(cfg.n_vertices)?;
    let fem = assemble_advection_diffusion(&mesh, cavity_velocity)?;
    let dt = cfg.final_time / cfg.n_steps as f64;
    let window = window_operator(ad_step_matrix(&fem, dt)?, cfg.n_steps / cfg.n_t);
    let evolution = Arc::new(EvolutionFamily::stationary(window, cfg.n_t)?);
    let coords: Vec<[f64; 2]> = (0..mesh.n_vertices()).map(|v| mesh.vertex(v)).collect();
    let true_initial = Vector::from_iterator(
        coords.len(),
        coords.iter().map(|&[x, y]| {
            cfg.blob_centers
                .iter()
                .map(|&[cx, cy]| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * cfg.blob_width.powi(2))).exp()
                })
                .sum::<f64>()
        }),
    );
    let background: CovRef = Arc::new(EllipticPriorCovariance::new(
        cfg.gamma,
        cfg.delta,
        fem.mass.clone(),
        fem.stiffness.clone(),
    )?);
    let grid = linspace(-cfg.sensor_extent, cfg.sensor_extent, cfg.sensor_grid);
    let sensors: Vec<[f64; 2]> = grid
        .iter()
        .flat_map(|&y| grid.iter().map(move |&x| [x, y]))
        .collect();
    let n_s = sensors.len();
    let obs_step: OpRef = Arc::new(interpolation_2d(&mesh, &sensors)?);
    let observation = ObservationOperator::fixed(obs_step, cfg.n_t);
    let traj = evolution.trajectory(&true_initial);
    evolution.reset_counters();
    let d = mesh.n_vertices();
    let model_error = (1..=cfg.n_t)
        .map(|l| {
            let q = cfg.alpha * traj.rows(l * d, d).norm() / (n_s as f64).sqrt();
            ScaledIdentityCovariance::new(d, q * q).map(|c| Arc::new(c) as CovRef)
        })
        .collect::<Result<Vec<_>>>()?;
    let sigmas = relative_noise_levels(&observation, &traj, cfg.noise_fraction)?;
    let noise = noise_covariances(n_s, &sigmas)?;
    let problem = DAProblem::new(
        evolution.clone(),
        observation,
        background,
        Vector::zeros(d),
        model_error,
        noise,
    )?;
    Ok(ModelProblem {
        problem,
        truth: evolution,
        true_initial,
        state_coords: coords.iter().map(|c| c.to_vec()).collect(),
        sensor_coords: sensors.iter().map(|c| c.to_vec()).collect(),
        noise_sigmas: sigmas,
    })
}

/// Small well-conditioned random instance: contractive random steps, dense
/// observation, random SPD background and model-error covariances, and
/// scaled-identity noise.
pub fn random_instance(d_s: usize, n_t: usize, n_s: usize, seed: u64) -> DAProblem {
    let mut stream = 0u64;
    let mut next = || {
        stream += 1;
        stream_rng(seed, Purpose::Instance, stream)
    };
    let spd = |g: Matrix, shift: f64| {
        let n = g.nrows();
        &g * g.transpose() / n as f64 + Matrix::identity(n, n) * shift
    };
    let scale = 0.8 / (d_s as f64).sqrt();
    let steps: Vec<OpRef> = (0..n_t)
        .map(|_| Arc::new(DenseOperator::new(gaussian_matrix(&mut next(), d_s, d_s) * scale)) as OpRef)
        .collect();
    let evolution = Arc::new(EvolutionFamily::new(d_s, steps).expect("square steps"));
    let o: OpRef = Arc::new(DenseOperator::new(gaussian_matrix(&mut next(), n_s, d_s)));
    let background: CovRef = Arc::new(
        DenseCovariance::new(spd(gaussian_matrix(&mut next(), d_s, d_s), 0.5)).expect("SPD"),
    );
    let model_error = (0..n_t)
        .map(|_| {
            Arc::new(
                DenseCovariance::new(spd(gaussian_matrix(&mut next(), d_s, d_s), 0.2) * 0.3)
                    .expect("SPD"),
            ) as CovRef
        })
        .collect();
    let noise = (0..=n_t)
        .map(|_| {
            let u = gaussian_vector(&mut next(), 1)[0];
            let sigma = 1.0 + 0.4 * u.tanh();
            Arc::new(ScaledIdentityCovariance::new(n_s, sigma * sigma).expect("positive")) as CovRef
        })
        .collect();
    let mean = gaussian_vector(&mut next(), d_s);
    DAProblem::new(
        evolution,
        ObservationOperator::fixed(o, n_t),
        background,
        mean,
        model_error,
        noise,
    )
    .expect("consistent random instance")
}

/// The same problem with every model-error block replaced by `ε I`.
pub fn with_scaled_identity_model_error(problem: &DAProblem, epsilon: f64) -> Result<DAProblem> {
    let d = problem.dims().d_s();
    let blocks = (0..problem.dims().n_t())
        .map(|_| ScaledIdentityCovariance::new(d, epsilon).map(|c| Arc::new(c) as CovRef))
        .collect::<Result<Vec<_>>>()?;
    problem.with_model_error(blocks)
}

/// Dense matrix of the background covariance (diagnostics).
pub fn background_matrix(problem: &DAProblem) -> Matrix {
    dense_covariance_matrix(problem.background().as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use crate::operators::densify;

    #[test]
    fn two_element_hand_assembly() {
        let mesh = Mesh1D::new(2).unwrap();
        let fem = assemble_heat(&mesh, Diffusivity::Constant(1.0)).unwrap();
        assert!((fem.stiffness[(0, 0)] - 4.0).abs() < 1e-14);
        assert!((fem.mass[(0, 0)] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let mesh = Mesh1D::new(7).unwrap();
        let fem = assemble_heat_full(&mesh, Diffusivity::Oscillatory { epsilon: 0.25 }).unwrap();
        assert!((&fem.stiffness * Vector::from_element(8, 1.0)).amax() < 1e-12);
        assert!(assemble_heat_full(&mesh, Diffusivity::Constant(0.0)).is_err());
    }

    #[test]
    fn heat_step_is_contractive_in_energy() {
        let mesh = Mesh1D::new(20).unwrap();
        let fem = assemble_heat(&mesh, Diffusivity::Constant(3f64.sqrt())).unwrap();
        let s = heat_step_matrix(&fem, 1e-3).unwrap();
        for seed in 0..5 {
            let u = gaussian_vector(&mut stream_rng(seed, Purpose::Instance, 0), 19);
            let v = &s * &u;
            assert!(v.dot(&(&fem.mass * &v)) <= u.dot(&(&fem.mass * &u)) + 1e-14);
        }
        let ev = s.clone().complex_eigenvalues();
        assert!(ev.iter().all(|z| z.norm() < 1.0));
    }

    #[test]
    fn two_window_map_matches_explicit_products() {
        let mesh = Mesh1D::new(12).unwrap();
        let fem = assemble_heat(&mesh, Diffusivity::Constant(3f64.sqrt())).unwrap();
        let dt = 1e-3;
        let n_plus = &fem.mass + &fem.stiffness * dt;
        let s = n_plus.try_inverse().unwrap() * &fem.mass;
        let fam = Arc::new(EvolutionFamily::stationary(Arc::new(DenseOperator::new(s.clone())), 2).unwrap());
        let m02 = crate::operators::compose_evolution(&fam, 0, 2).unwrap();
        let e1 = Vector::from_fn(11, |i, _| if i == 0 { 1.0 } else { 0.0 });
        assert!((m02.apply(&e1) - &s * (&s * &e1)).amax() < 1e-14);
    }

    #[test]
    fn node_sensor_is_canonical_row() {
        let mesh = Mesh1D::new(10).unwrap();
        let op = interpolation_1d(&mesh, &[0.3]).unwrap();
        assert_eq!(op.row_entries(0).len(), 1);
        assert_eq!(op.row_entries(0)[0].0, 2);
        assert!((op.row_entries(0)[0].1 - 1.0).abs() < 1e-12);
        assert!(interpolation_1d(&mesh, &[1.5]).is_err());
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let mesh = Mesh2D::new(5).unwrap();
        let pts = [[0.13, -0.71], [0.9, 0.9], [-0.2, 0.45], [-1.0, -1.0]];
        let op = interpolation_2d(&mesh, &pts).unwrap();
        let f = |x: f64, y: f64| 0.3 + 1.7 * x - 0.4 * y;
        let nodal = Vector::from_fn(25, |v, _| {
            let [x, y] = mesh.vertex(v);
            f(x, y)
        });
        let vals = op.apply(&nodal);
        for (k, p) in pts.iter().enumerate() {
            assert!((vals[k] - f(p[0], p[1])).abs() < 1e-12);
            assert!(op.row_entries(k).len() <= 3);
        }
        let mesh1 = Mesh1D::new(8).unwrap();
        let op1 = interpolation_1d(&mesh1, &[0.2, 0.61]).unwrap();
        let g = |x: f64| x * (1.0 - x);
        let nodal1 = Vector::from_iterator(7, mesh1.interior_nodes().into_iter().map(g));
        let v1 = op1.apply(&nodal1);
        let expect = |x: f64| {
            let h = mesh1.h();
            let c = (x / h).floor();
            let s = x / h - c;
            (1.0 - s) * g(c * h) + s * g((c + 1.0) * h)
        };
        assert!((v1[0] - expect(0.2)).abs() < 1e-12);
        assert!((v1[1] - expect(0.61)).abs() < 1e-12);
    }

    #[test]
    fn constants_are_steady_under_neumann() {
        let mesh = Mesh2D::new(4).unwrap();
        let fem = assemble_advection_diffusion(&mesh, cavity_velocity).unwrap();
        let s = ad_step_matrix(&fem, 0.01).unwrap();
        let one = Vector::from_element(16, 1.0);
        assert!((&s * &one - &one).amax() < 1e-10);
        let still = assemble_advection_diffusion(&mesh, |_, _| [0.0, 0.0]).unwrap();
        let s0 = ad_step_matrix(&still, 0.01).unwrap();
        let c = gaussian_vector(&mut stream_rng(2, Purpose::Instance, 0), 16);
        let total = |v: &Vector| (&still.mass * v).sum();
        assert!((total(&(&s0 * &c)) - total(&c)).abs() < 1e-8);
    }

    #[test]
    fn triangles_are_positive_and_mass_integrates_area() {
        let mesh = Mesh2D::new(3).unwrap();
        let fem = assemble_advection_diffusion(&mesh, |_, _| [0.0, 0.0]).unwrap();
        assert!((fem.mass.sum() - 4.0).abs() < 1e-12);
        assert!(symmetric_eigenvalues(&fem.mass).min() > 0.0);
        assert_eq!(mesh.triangles().len(), 8);
    }

    #[test]
    fn one_step_matches_hand_assembled_solve() {
        // Single cell, two triangles: assemble the 4×4 system by hand.
        let mesh = Mesh2D::new(2).unwrap();
        let fem = assemble_advection_diffusion(&mesh, |_, _| [1.0, 0.0]).unwrap();
        let area = 2.0;
        let m = |a: usize, b: usize| area / 12.0 * if a == b { 2.0 } else { 1.0 };
        let mut n = Matrix::zeros(4, 4);
        let mut k = Matrix::zeros(4, 4);
        let mut b = Matrix::zeros(4, 4);
        // Lower triangle (0,1,3) with vertices (−1,−1), (1,−1), (1,1).
        let lower = [0, 1, 3];
        let gl = [[-0.5, 0.0], [0.5, -0.5], [0.0, 0.5]];
        // Upper triangle (0,3,2) with vertices (−1,−1), (1,1), (−1,1).
        let upper = [0, 3, 2];
        let gu = [[0.0, -0.5], [0.5, 0.0], [-0.5, 0.5]];
        for (tri, g) in [(lower, gl), (upper, gu)] {
            for a in 0..3 {
                for c in 0..3 {
                    n[(tri[a], tri[c])] += m(a, c);
                    k[(tri[a], tri[c])] += area * (g[a][0] * g[c][0] + g[a][1] * g[c][1]);
                    b[(tri[a], tri[c])] += area / 3.0 * g[c][0];
                }
            }
        }
        assert!((&fem.mass - &n).amax() < 1e-14);
        assert!((&fem.stiffness - &k).amax() < 1e-14);
        assert!((fem.advection.as_ref().unwrap() - &b).amax() < 1e-14);
        let dt = 0.1;
        let reference = (&n + &b * dt + &k * dt).try_inverse().unwrap() * &n;
        assert!((ad_step_matrix(&fem, dt).unwrap() - reference).amax() < 1e-12);
    }

    #[test]
    fn desk_heat_layout() {
        let cfg = HeatModelConfig::desk();
        assert!((cfg.dt() - 1.5625e-5).abs() < 1e-18);
        let mp = export_heat_problem(&cfg, 1).unwrap();
        assert_eq!(mp.problem.dims().n_s(), 28);
        assert_eq!(mp.problem.dims().d_s(), 127);
        assert!((mp.sensor_coords[27][0] - 0.975).abs() < 1e-15);
        let bad = HeatModelConfig { n_cells: 100, ..cfg };
        assert!(export_heat_problem(&bad, 1).is_err());
    }

    #[test]
    fn true_and_homogenized_models_differ() {
        let cfg = HeatModelConfig::desk();
        let mp = export_heat_problem(&cfg, 1).unwrap();
        let a = mp.truth.trajectory(&mp.true_initial);
        let b = mp.problem.evolution().trajectory(&mp.true_initial);
        assert!((a - b).norm() > 0.0);
    }

    #[test]
    fn desk_ad_layout() {
        let mp = export_ad_problem(&AdModelConfig::desk()).unwrap();
        assert_eq!(mp.problem.dims().n_s(), 81);
        assert_eq!(mp.problem.dims().d_s(), 289);
        let step = densify(mp.problem.evolution().step(0).as_ref());
        assert!(step.iter().all(|v| v.is_finite()));
    }
}
