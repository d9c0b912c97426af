//! Linear operators defined by their forward and transpose actions, and the
//! structural operators of weak-constraint assimilation built from them.
//!
//! Stacked trajectories are time-major: block `ℓ` of a vector of length
//! `(n_T+1)·d_S` holds `u_ℓ`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::{gaussian_vector, stream_rng, Purpose};

pub trait LinearOperator: Send + Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &Vector) -> Vector;
    fn apply_transpose(&self, y: &Vector) -> Vector;

    /// Applies the operator to every column of `x`.
    fn apply_block(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows(), x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            out.set_column(j, &self.apply(&col.into_owned()));
        }
        out
    }

    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols(), y.ncols());
        for (j, col) in y.column_iter().enumerate() {
            out.set_column(j, &self.apply_transpose(&col.into_owned()));
        }
        out
    }

    fn try_apply(&self, x: &Vector) -> Result<Vector> {
        check_dim("operator apply", self.cols(), x.len())?;
        Ok(self.apply(x))
    }

    fn try_apply_transpose(&self, y: &Vector) -> Result<Vector> {
        check_dim("operator transpose apply", self.rows(), y.len())?;
        Ok(self.apply_transpose(y))
    }
}

pub type OpRef = Arc<dyn LinearOperator>;

/// Materializes an operator by applying it to the identity.
pub fn densify(op: &dyn LinearOperator) -> Matrix {
    op.apply_block(&Matrix::identity(op.cols(), op.cols()))
}

/// Relative defect `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩|` for seeded Gaussian `x`, `y`.
pub fn adjoint_defect(op: &dyn LinearOperator, seed: u64) -> f64 {
    let x = gaussian_vector(&mut stream_rng(seed, Purpose::Instance, 0), op.cols());
    let y = gaussian_vector(&mut stream_rng(seed, Purpose::Instance, 1), op.rows());
    let ax = op.apply(&x);
    let aty = op.apply_transpose(&y);
    let lhs = ax.dot(&y);
    let rhs = x.dot(&aty);
    let scale = (ax.norm() * y.norm()).max(x.norm() * aty.norm()).max(f64::MIN_POSITIVE);
    (lhs - rhs).abs() / scale
}

fn block_of(x: &Vector, l: usize, d: usize) -> Vector {
    x.rows(l * d, d).into_owned()
}

fn rows_of(x: &Matrix, l: usize, d: usize) -> Matrix {
    x.rows(l * d, d).into_owned()
}

#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Matrix,
}

impl DenseOperator {
    pub fn new(matrix: Matrix) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }
    fn cols(&self) -> usize {
        self.matrix.ncols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        self.matrix.tr_mul(y)
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        &self.matrix * x
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        self.matrix.tr_mul(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityOperator {
    pub n: usize,
}

impl LinearOperator for IdentityOperator {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &Vector) -> Vector {
        x.clone()
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        y.clone()
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        x.clone()
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        y.clone()
    }
}

pub struct ScaledOperator {
    pub scale: f64,
    pub inner: OpRef,
}

impl LinearOperator for ScaledOperator {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        self.inner.apply(x) * self.scale
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        self.inner.apply_transpose(y) * self.scale
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        self.inner.apply_block(x) * self.scale
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        self.inner.apply_transpose_block(y) * self.scale
    }
}

/// Composition `ops[0] ∘ ops[1] ∘ … ∘ ops[n-1]`.
pub struct ProductOperator {
    ops: Vec<OpRef>,
}

impl ProductOperator {
    pub fn new(ops: Vec<OpRef>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidArgument("empty operator product".into()));
        }
        for w in ops.windows(2) {
            check_dim("operator product", w[0].cols(), w[1].rows())?;
        }
        Ok(Self { ops })
    }
}

impl LinearOperator for ProductOperator {
    fn rows(&self) -> usize {
        self.ops[0].rows()
    }
    fn cols(&self) -> usize {
        self.ops[self.ops.len() - 1].cols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        self.ops.iter().rev().fold(x.clone(), |acc, op| op.apply(&acc))
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        self.ops.iter().fold(y.clone(), |acc, op| op.apply_transpose(&acc))
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        self.ops.iter().rev().fold(x.clone(), |acc, op| op.apply_block(&acc))
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        self.ops
            .iter()
            .fold(y.clone(), |acc, op| op.apply_transpose_block(&acc))
    }
}

pub struct TransposeOperator {
    pub inner: OpRef,
}

impl LinearOperator for TransposeOperator {
    fn rows(&self) -> usize {
        self.inner.cols()
    }
    fn cols(&self) -> usize {
        self.inner.rows()
    }
    fn apply(&self, x: &Vector) -> Vector {
        self.inner.apply_transpose(x)
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        self.inner.apply(y)
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        self.inner.apply_transpose_block(x)
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        self.inner.apply_block(y)
    }
}

pub struct SumOperator {
    terms: Vec<OpRef>,
}

impl SumOperator {
    pub fn new(terms: Vec<OpRef>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty operator sum".into()))?;
        for t in &terms {
            check_dim("operator sum rows", first.rows(), t.rows())?;
            check_dim("operator sum cols", first.cols(), t.cols())?;
        }
        Ok(Self { terms })
    }
}

impl LinearOperator for SumOperator {
    fn rows(&self) -> usize {
        self.terms[0].rows()
    }
    fn cols(&self) -> usize {
        self.terms[0].cols()
    }
    fn apply(&self, x: &Vector) -> Vector {
        let mut out = self.terms[0].apply(x);
        for t in &self.terms[1..] {
            out += t.apply(x);
        }
        out
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        let mut out = self.terms[0].apply_transpose(y);
        for t in &self.terms[1..] {
            out += t.apply_transpose(y);
        }
        out
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        let mut out = self.terms[0].apply_block(x);
        for t in &self.terms[1..] {
            out += t.apply_block(x);
        }
        out
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let mut out = self.terms[0].apply_transpose_block(y);
        for t in &self.terms[1..] {
            out += t.apply_transpose_block(y);
        }
        out
    }
}

/// `I + A Aᵀ` for a rectangular `A`.
pub fn identity_plus_gram(a: OpRef) -> OpRef {
    let n = a.rows();
    let gram: OpRef = Arc::new(
        ProductOperator::new(vec![a.clone(), Arc::new(TransposeOperator { inner: a })])
            .expect("A Aᵀ is always conformable"),
    );
    Arc::new(
        SumOperator::new(vec![Arc::new(IdentityOperator { n }), gram])
            .expect("I and A Aᵀ share a shape"),
    )
}

/// General block operator; `None` entries are zero blocks.
pub struct BlockOperator {
    row_sizes: Vec<usize>,
    col_sizes: Vec<usize>,
    blocks: Vec<Vec<Option<OpRef>>>,
}

impl BlockOperator {
    pub fn new(
        row_sizes: Vec<usize>,
        col_sizes: Vec<usize>,
        blocks: Vec<Vec<Option<OpRef>>>,
    ) -> Result<Self> {
        check_dim("block rows", row_sizes.len(), blocks.len())?;
        for (i, row) in blocks.iter().enumerate() {
            check_dim("block cols", col_sizes.len(), row.len())?;
            for (j, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    check_dim("block height", row_sizes[i], b.rows())?;
                    check_dim("block width", col_sizes[j], b.cols())?;
                }
            }
        }
        Ok(Self {
            row_sizes,
            col_sizes,
            blocks,
        })
    }

    fn offsets(sizes: &[usize]) -> Vec<usize> {
        let mut o = vec![0];
        for s in sizes {
            o.push(o.last().unwrap() + s);
        }
        o
    }
}

impl LinearOperator for BlockOperator {
    fn rows(&self) -> usize {
        self.row_sizes.iter().sum()
    }
    fn cols(&self) -> usize {
        self.col_sizes.iter().sum()
    }
    fn apply(&self, x: &Vector) -> Vector {
        self.apply_block(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))
            .column(0)
            .into_owned()
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        self.apply_transpose_block(&Matrix::from_column_slice(y.len(), 1, y.as_slice()))
            .column(0)
            .into_owned()
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        let ro = Self::offsets(&self.row_sizes);
        let co = Self::offsets(&self.col_sizes);
        let mut out = Matrix::zeros(self.rows(), x.ncols());
        for (i, row) in self.blocks.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    let xj = x.rows(co[j], self.col_sizes[j]).into_owned();
                    let mut target = out.rows_mut(ro[i], self.row_sizes[i]);
                    target += b.apply_block(&xj);
                }
            }
        }
        out
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let ro = Self::offsets(&self.row_sizes);
        let co = Self::offsets(&self.col_sizes);
        let mut out = Matrix::zeros(self.cols(), y.ncols());
        for (i, row) in self.blocks.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    let yi = y.rows(ro[i], self.row_sizes[i]).into_owned();
                    let mut target = out.rows_mut(co[j], self.col_sizes[j]);
                    target += b.apply_transpose_block(&yi);
                }
            }
        }
        out
    }
}

pub fn block_diagonal(blocks: Vec<OpRef>) -> Result<BlockOperator> {
    let n = blocks.len();
    let row_sizes = blocks.iter().map(|b| b.rows()).collect();
    let col_sizes = blocks.iter().map(|b| b.cols()).collect();
    let grid = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { Some(blocks[i].clone()) } else { None })
                .collect()
        })
        .collect();
    BlockOperator::new(row_sizes, col_sizes, grid)
}

/// Sparse matrix stored by rows, used for interpolation-type observations.
#[derive(Debug, Clone)]
pub struct SparseRowsOperator {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRowsOperator {
    pub fn new(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for r in &rows {
            for &(c, _) in r {
                if c >= cols {
                    return Err(Error::InvalidArgument(format!(
                        "column {c} out of range {cols}"
                    )));
                }
            }
        }
        Ok(Self { cols, rows })
    }

    pub fn row_entries(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            cols: self.cols,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

impl LinearOperator for SparseRowsOperator {
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|r| r.iter().map(|&(c, v)| v * x[c]).sum::<f64>()),
        )
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        let mut out = Vector::zeros(self.cols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                out[c] += v * y[i];
            }
        }
        out
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows.len(), x.ncols());
        for j in 0..x.ncols() {
            for (i, r) in self.rows.iter().enumerate() {
                out[(i, j)] = r.iter().map(|&(c, v)| v * x[(c, j)]).sum();
            }
        }
        out
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, y.ncols());
        for j in 0..y.ncols() {
            for (i, r) in self.rows.iter().enumerate() {
                for &(c, v) in r {
                    out[(c, j)] += v * y[(i, j)];
                }
            }
        }
        out
    }
}

/// Problem sizes. `N_d = (n_T+1)·d_S`, `N_m = (n_T+1)·n_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemDims {
    d_s: usize,
    n_t: usize,
    n_s: usize,
}

impl ProblemDims {
    pub fn new(d_s: usize, n_t: usize, n_s: usize) -> Result<Self> {
        if d_s == 0 || n_s == 0 {
            return Err(Error::InvalidArgument(
                "state and sensor dimensions must be positive".into(),
            ));
        }
        Ok(Self { d_s, n_t, n_s })
    }

    /// Same dimensions with `k` active sensors; `k = 0` is allowed here so that
    /// empty designs can flow through the criterion code.
    pub fn with_sensors(&self, k: usize) -> Self {
        Self { n_s: k, ..*self }
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }
    pub fn n_t(&self) -> usize {
        self.n_t
    }
    pub fn n_s(&self) -> usize {
        self.n_s
    }
    pub fn n_blocks(&self) -> usize {
        self.n_t + 1
    }
    pub fn n_d(&self) -> usize {
        self.n_blocks() * self.d_s
    }
    pub fn n_m(&self) -> usize {
        self.n_blocks() * self.n_s
    }
}

#[derive(Debug, Default)]
struct ApplyCounters {
    forward: AtomicUsize,
    transpose: AtomicUsize,
}

/// One-window evolution maps `M_{ℓ→ℓ+1}`, `ℓ = 0, …, n_T−1`, with counters of
/// forward and transpose applications (one count per applied column).
pub struct EvolutionFamily {
    d_s: usize,
    steps: Vec<OpRef>,
    counters: ApplyCounters,
}

impl EvolutionFamily {
    pub fn new(d_s: usize, steps: Vec<OpRef>) -> Result<Self> {
        for s in &steps {
            check_dim("evolution step rows", d_s, s.rows())?;
            check_dim("evolution step cols", d_s, s.cols())?;
        }
        Ok(Self {
            d_s,
            steps,
            counters: ApplyCounters::default(),
        })
    }

    /// `n_t` copies of the same step.
    pub fn stationary(step: OpRef, n_t: usize) -> Result<Self> {
        let d = step.rows();
        Self::new(d, vec![step; n_t])
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }
    pub fn n_t(&self) -> usize {
        self.steps.len()
    }
    pub fn step(&self, l: usize) -> &OpRef {
        &self.steps[l]
    }

    pub fn apply_step(&self, l: usize, x: &Vector) -> Vector {
        self.counters.forward.fetch_add(1, Ordering::Relaxed);
        self.steps[l].apply(x)
    }
    pub fn apply_step_transpose(&self, l: usize, y: &Vector) -> Vector {
        self.counters.transpose.fetch_add(1, Ordering::Relaxed);
        self.steps[l].apply_transpose(y)
    }
    pub fn apply_step_block(&self, l: usize, x: &Matrix) -> Matrix {
        self.counters.forward.fetch_add(x.ncols(), Ordering::Relaxed);
        self.steps[l].apply_block(x)
    }
    pub fn apply_step_transpose_block(&self, l: usize, y: &Matrix) -> Matrix {
        self.counters.transpose.fetch_add(y.ncols(), Ordering::Relaxed);
        self.steps[l].apply_transpose_block(y)
    }

    pub fn forward_count(&self) -> usize {
        self.counters.forward.load(Ordering::Relaxed)
    }
    pub fn transpose_count(&self) -> usize {
        self.counters.transpose.load(Ordering::Relaxed)
    }
    pub fn reset_counters(&self) {
        self.counters.forward.store(0, Ordering::Relaxed);
        self.counters.transpose.store(0, Ordering::Relaxed);
    }

    /// Trajectory `(u₀, M u₀, …)` stacked time-major.
    pub fn trajectory(&self, u0: &Vector) -> Vector {
        let d = self.d_s;
        let mut out = Vector::zeros(d * (self.n_t() + 1));
        out.rows_mut(0, d).copy_from(u0);
        let mut u = u0.clone();
        for l in 0..self.n_t() {
            u = self.apply_step(l, &u);
            out.rows_mut((l + 1) * d, d).copy_from(&u);
        }
        out
    }
}

struct ComposedEvolution {
    family: Arc<EvolutionFamily>,
    from: usize,
    to: usize,
}

impl LinearOperator for ComposedEvolution {
    fn rows(&self) -> usize {
        self.family.d_s()
    }
    fn cols(&self) -> usize {
        self.family.d_s()
    }
    fn apply(&self, x: &Vector) -> Vector {
        (self.from..self.to).fold(x.clone(), |u, l| self.family.apply_step(l, &u))
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        (self.from..self.to)
            .rev()
            .fold(y.clone(), |w, l| self.family.apply_step_transpose(l, &w))
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        (self.from..self.to).fold(x.clone(), |u, l| self.family.apply_step_block(l, &u))
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        (self.from..self.to)
            .rev()
            .fold(y.clone(), |w, l| self.family.apply_step_transpose_block(l, &w))
    }
}

/// The map `M_{j→ℓ}`; identity when `j = ℓ`.
pub fn compose_evolution(family: &Arc<EvolutionFamily>, j: usize, l: usize) -> Result<OpRef> {
    if j > l {
        return Err(Error::InvalidArgument(format!(
            "evolution from {j} to {l} runs backwards"
        )));
    }
    if l > family.n_t() {
        return Err(Error::InvalidArgument(format!(
            "window {l} beyond n_T = {}",
            family.n_t()
        )));
    }
    if j == l {
        return Ok(Arc::new(IdentityOperator { n: family.d_s() }));
    }
    Ok(Arc::new(ComposedEvolution {
        family: family.clone(),
        from: j,
        to: l,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingDirection {
    /// `L`: trajectory to (initial state; model-error residuals).
    Forward,
    /// `L⁻¹`: accumulate a trajectory from (initial state; model errors).
    Inverse,
}

/// Unit lower block-bidiagonal coupling `L` (blocks `I` and `−M_{ℓ→ℓ+1}`) or its inverse.
#[derive(Clone)]
pub struct CouplingOperator {
    dims: ProblemDims,
    evolution: Arc<EvolutionFamily>,
    direction: CouplingDirection,
}

impl CouplingOperator {
    pub fn new(
        dims: ProblemDims,
        evolution: Arc<EvolutionFamily>,
        direction: CouplingDirection,
    ) -> Result<Self> {
        check_dim("coupling state size", dims.d_s(), evolution.d_s())?;
        check_dim("coupling windows", dims.n_t(), evolution.n_t())?;
        Ok(Self {
            dims,
            evolution,
            direction,
        })
    }

    pub fn direction(&self) -> CouplingDirection {
        self.direction
    }

    fn forward_block(&self, x: &Matrix) -> Matrix {
        let d = self.dims.d_s();
        let mut out = x.clone();
        for l in 1..self.dims.n_blocks() {
            let prev = self.evolution.apply_step_block(l - 1, &rows_of(x, l - 1, d));
            let mut target = out.rows_mut(l * d, d);
            target -= prev;
        }
        out
    }

    fn forward_transpose_block(&self, p: &Matrix) -> Matrix {
        let d = self.dims.d_s();
        let mut out = p.clone();
        for l in 0..self.dims.n_t() {
            let next = self
                .evolution
                .apply_step_transpose_block(l, &rows_of(p, l + 1, d));
            let mut target = out.rows_mut(l * d, d);
            target -= next;
        }
        out
    }

    fn inverse_block(&self, p: &Matrix) -> Matrix {
        let d = self.dims.d_s();
        let mut out = p.clone();
        for l in 1..self.dims.n_blocks() {
            let prev = self.evolution.apply_step_block(l - 1, &rows_of(&out, l - 1, d));
            let mut target = out.rows_mut(l * d, d);
            target += prev;
        }
        out
    }

    fn inverse_transpose_block(&self, x: &Matrix) -> Matrix {
        let d = self.dims.d_s();
        let mut out = x.clone();
        for l in (0..self.dims.n_t()).rev() {
            let next = self
                .evolution
                .apply_step_transpose_block(l, &rows_of(&out, l + 1, d));
            let mut target = out.rows_mut(l * d, d);
            target += next;
        }
        out
    }

    fn forward_vec(&self, x: &Vector) -> Vector {
        let d = self.dims.d_s();
        let mut out = x.clone();
        for l in 1..self.dims.n_blocks() {
            let prev = self.evolution.apply_step(l - 1, &block_of(x, l - 1, d));
            let mut target = out.rows_mut(l * d, d);
            target -= prev;
        }
        out
    }

    fn forward_transpose_vec(&self, p: &Vector) -> Vector {
        let d = self.dims.d_s();
        let mut out = p.clone();
        for l in 0..self.dims.n_t() {
            let next = self.evolution.apply_step_transpose(l, &block_of(p, l + 1, d));
            let mut target = out.rows_mut(l * d, d);
            target -= next;
        }
        out
    }

    fn inverse_vec(&self, p: &Vector) -> Vector {
        let d = self.dims.d_s();
        let mut out = p.clone();
        for l in 1..self.dims.n_blocks() {
            let prev = self.evolution.apply_step(l - 1, &block_of(&out, l - 1, d));
            let mut target = out.rows_mut(l * d, d);
            target += prev;
        }
        out
    }

    fn inverse_transpose_vec(&self, x: &Vector) -> Vector {
        let d = self.dims.d_s();
        let mut out = x.clone();
        for l in (0..self.dims.n_t()).rev() {
            let next = self
                .evolution
                .apply_step_transpose(l, &block_of(&out, l + 1, d));
            let mut target = out.rows_mut(l * d, d);
            target += next;
        }
        out
    }
}

impl LinearOperator for CouplingOperator {
    fn rows(&self) -> usize {
        self.dims.n_d()
    }
    fn cols(&self) -> usize {
        self.dims.n_d()
    }
    fn apply(&self, x: &Vector) -> Vector {
        match self.direction {
            CouplingDirection::Forward => self.forward_vec(x),
            CouplingDirection::Inverse => self.inverse_vec(x),
        }
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        match self.direction {
            CouplingDirection::Forward => self.forward_transpose_vec(y),
            CouplingDirection::Inverse => self.inverse_transpose_vec(y),
        }
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        match self.direction {
            CouplingDirection::Forward => self.forward_block(x),
            CouplingDirection::Inverse => self.inverse_block(x),
        }
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        match self.direction {
            CouplingDirection::Forward => self.forward_transpose_block(y),
            CouplingDirection::Inverse => self.inverse_transpose_block(y),
        }
    }
}

/// Block-diagonal observation `blkdiag(O₀, …, O_{n_T})`.
#[derive(Clone)]
pub struct ObservationOperator {
    n_s: usize,
    d_s: usize,
    per_step: Vec<OpRef>,
}

impl ObservationOperator {
    pub fn new(per_step: Vec<OpRef>) -> Result<Self> {
        let first = per_step
            .first()
            .ok_or_else(|| Error::InvalidArgument("observation needs at least one step".into()))?;
        let (n_s, d_s) = (first.rows(), first.cols());
        for o in &per_step {
            check_dim("observation rows", n_s, o.rows())?;
            check_dim("observation cols", d_s, o.cols())?;
        }
        Ok(Self {
            n_s,
            d_s,
            per_step,
        })
    }

    /// The same operator at every one of `n_t + 1` observation times.
    pub fn fixed(op: OpRef, n_t: usize) -> Self {
        Self::new(vec![op; n_t + 1]).expect("identical blocks are consistent")
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }
    pub fn n_blocks(&self) -> usize {
        self.per_step.len()
    }
    pub fn per_step(&self, l: usize) -> &OpRef {
        &self.per_step[l]
    }

    /// Observation restricted to the design's sensors at every time.
    pub fn restricted(&self, design: &SensorDesign) -> Result<Self> {
        check_dim("design candidate count", self.n_s, design.n_s())?;
        let pick: OpRef = Arc::new(RowSelection::new(design.indices().to_vec(), self.n_s)?);
        let per_step = self
            .per_step
            .iter()
            .map(|o| -> OpRef { Arc::new(ProductOperator::new(vec![pick.clone(), o.clone()]).unwrap()) })
            .collect();
        Ok(Self {
            n_s: design.k(),
            d_s: self.d_s,
            per_step,
        })
    }
}

impl LinearOperator for ObservationOperator {
    fn rows(&self) -> usize {
        self.n_s * self.per_step.len()
    }
    fn cols(&self) -> usize {
        self.d_s * self.per_step.len()
    }
    fn apply(&self, x: &Vector) -> Vector {
        let mut out = Vector::zeros(self.rows());
        for (l, o) in self.per_step.iter().enumerate() {
            out.rows_mut(l * self.n_s, self.n_s)
                .copy_from(&o.apply(&block_of(x, l, self.d_s)));
        }
        out
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        let mut out = Vector::zeros(self.cols());
        for (l, o) in self.per_step.iter().enumerate() {
            out.rows_mut(l * self.d_s, self.d_s)
                .copy_from(&o.apply_transpose(&block_of(y, l, self.n_s)));
        }
        out
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows(), x.ncols());
        for (l, o) in self.per_step.iter().enumerate() {
            out.rows_mut(l * self.n_s, self.n_s)
                .copy_from(&o.apply_block(&rows_of(x, l, self.d_s)));
        }
        out
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols(), y.ncols());
        for (l, o) in self.per_step.iter().enumerate() {
            out.rows_mut(l * self.d_s, self.d_s)
                .copy_from(&o.apply_transpose_block(&rows_of(y, l, self.n_s)));
        }
        out
    }
}

/// Strictly increasing subset of the `n_s` candidate sensors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SensorDesign {
    n_s: usize,
    indices: Vec<usize>,
}

impl SensorDesign {
    pub fn new(n_s: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "design indices {indices:?} are not strictly increasing"
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= n_s {
                return Err(Error::InvalidArgument(format!(
                    "sensor index {last} out of range {n_s}"
                )));
            }
        }
        Ok(Self { n_s, indices })
    }

    /// Sorts the indices; duplicates are rejected.
    pub fn from_unsorted(n_s: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        Self::new(n_s, indices)
    }

    pub fn full(n_s: usize) -> Self {
        Self {
            n_s,
            indices: (0..n_s).collect(),
        }
    }

    pub fn empty(n_s: usize) -> Self {
        Self {
            n_s,
            indices: Vec::new(),
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }
    pub fn k(&self) -> usize {
        self.indices.len()
    }
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Positions of the selected rows in a stacked `n_blocks · n_s` vector.
    pub fn stacked_indices(&self, n_blocks: usize) -> Vec<usize> {
        (0..n_blocks)
            .flat_map(|l| self.indices.iter().map(move |&i| l * self.n_s + i))
            .collect()
    }
}

/// `Sᵀ`: picks `indices` out of a length-`n` vector.
#[derive(Debug, Clone)]
pub struct RowSelection {
    indices: Vec<usize>,
    n: usize,
}

impl RowSelection {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("row selection out of range".into()));
        }
        Ok(Self { indices, n })
    }
}

impl LinearOperator for RowSelection {
    fn rows(&self) -> usize {
        self.indices.len()
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &Vector) -> Vector {
        Vector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i]))
    }
    fn apply_transpose(&self, y: &Vector) -> Vector {
        let mut out = Vector::zeros(self.n);
        for (k, &i) in self.indices.iter().enumerate() {
            out[i] += y[k];
        }
        out
    }
    fn apply_block(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(self.indices.len(), x.ncols(), |k, j| x[(self.indices[k], j)])
    }
    fn apply_transpose_block(&self, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, y.ncols());
        for (k, &i) in self.indices.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += y.row(k);
        }
        out
    }
}

/// `I_{n_blocks} ⊗ S` of shape `(n_blocks·n_s) × (n_blocks·k)`.
pub fn embed_selection(design: &SensorDesign, n_blocks: usize) -> Result<OpRef> {
    if n_blocks == 0 {
        return Err(Error::InvalidArgument("embedding needs at least one block".into()));
    }
    let pick = RowSelection::new(design.stacked_indices(n_blocks), n_blocks * design.n_s())?;
    Ok(Arc::new(TransposeOperator {
        inner: Arc::new(pick),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_matrix;

    fn scalar_family(factors: &[f64]) -> Arc<EvolutionFamily> {
        let steps = factors
            .iter()
            .map(|&f| -> OpRef { Arc::new(DenseOperator::new(Matrix::from_element(1, 1, f))) })
            .collect();
        Arc::new(EvolutionFamily::new(1, steps).unwrap())
    }

    fn random_family(d: usize, n_t: usize, seed: u64) -> Arc<EvolutionFamily> {
        let steps = (0..n_t)
            .map(|l| -> OpRef {
                let m = gaussian_matrix(&mut stream_rng(seed, Purpose::Instance, l as u64), d, d);
                Arc::new(DenseOperator::new(m * 0.5))
            })
            .collect();
        Arc::new(EvolutionFamily::new(d, steps).unwrap())
    }

    fn assembled_l(family: &EvolutionFamily) -> Matrix {
        let d = family.d_s();
        let nb = family.n_t() + 1;
        let mut l = Matrix::identity(nb * d, nb * d);
        for k in 1..nb {
            let m = densify(family.step(k - 1).as_ref());
            l.view_mut((k * d, (k - 1) * d), (d, d)).copy_from(&(-m));
        }
        l
    }

    #[test]
    fn compose_identity_and_scalings() {
        let f = scalar_family(&[2.0, 2.0]);
        let id = compose_evolution(&f, 1, 1).unwrap();
        assert_eq!(id.apply(&Vector::from_element(1, 3.0))[0], 3.0);
        let m02 = compose_evolution(&f, 0, 2).unwrap();
        assert_eq!(m02.apply(&Vector::from_element(1, 1.5))[0], 6.0);
        assert!(compose_evolution(&f, 2, 1).is_err());
    }

    #[test]
    fn coupling_hand_recursion() {
        let f = scalar_family(&[2.0, 3.0]);
        let dims = ProblemDims::new(1, 2, 1).unwrap();
        let l = CouplingOperator::new(dims, f.clone(), CouplingDirection::Forward).unwrap();
        let li = CouplingOperator::new(dims, f, CouplingDirection::Inverse).unwrap();
        let u = Vector::from_vec(vec![1.0, 2.0, 6.0]);
        assert_eq!(l.apply(&u), Vector::from_vec(vec![1.0, 0.0, 0.0]));
        assert_eq!(li.apply(&Vector::from_vec(vec![1.0, 0.0, 0.0])), u);
    }

    #[test]
    fn coupling_without_windows_is_identity() {
        let f = scalar_family(&[]);
        let dims = ProblemDims::new(1, 0, 1).unwrap();
        for dir in [CouplingDirection::Forward, CouplingDirection::Inverse] {
            let op = CouplingOperator::new(dims, f.clone(), dir).unwrap();
            let x = Vector::from_element(1, 4.0);
            assert_eq!(op.apply(&x), x);
            assert_eq!(op.apply_transpose(&x), x);
        }
    }

    #[test]
    fn coupling_matches_assembled_matrix() {
        let f = random_family(3, 4, 11);
        let dims = ProblemDims::new(3, 4, 1).unwrap();
        let l = CouplingOperator::new(dims, f.clone(), CouplingDirection::Forward).unwrap();
        let dense = assembled_l(&f);
        let x = gaussian_vector(&mut stream_rng(3, Purpose::Instance, 9), 15);
        assert!((l.apply(&x) - &dense * &x).amax() < 1e-12);
        assert!((l.apply_transpose(&x) - dense.transpose() * &x).amax() < 1e-12);
        let xb = gaussian_matrix(&mut stream_rng(3, Purpose::Instance, 10), 15, 4);
        assert!((l.apply_block(&xb) - &dense * &xb).amax() < 1e-12);
    }

    #[test]
    fn coupling_unit_determinant() {
        let f = random_family(4, 3, 5);
        let dims = ProblemDims::new(4, 3, 1).unwrap();
        let l = CouplingOperator::new(dims, f, CouplingDirection::Forward).unwrap();
        let dense = densify(&l);
        for i in 0..16 {
            assert_eq!(dense[(i, i)], 1.0);
            for j in (i + 1)..16 {
                assert_eq!(dense[(i, j)], 0.0);
            }
        }
        assert!((dense.lu().determinant() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn selection_examples() {
        let d = SensorDesign::new(3, vec![1]).unwrap();
        let e = embed_selection(&d, 2).unwrap();
        let y = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(e.apply_transpose(&y), Vector::from_vec(vec![2.0, 5.0]));
        let full = embed_selection(&SensorDesign::full(3), 2).unwrap();
        assert_eq!(densify(full.as_ref()), Matrix::identity(6, 6));
        let empty = embed_selection(&SensorDesign::empty(3), 2).unwrap();
        assert_eq!(empty.cols(), 0);
        assert!(SensorDesign::new(3, vec![2, 1]).is_err());
        assert!(SensorDesign::new(3, vec![3]).is_err());
        assert!(SensorDesign::from_unsorted(3, vec![1, 1]).is_err());
    }

    #[test]
    fn embedding_gathers_block_columns() {
        let a = gaussian_matrix(&mut stream_rng(1, Purpose::Instance, 0), 4, 6);
        let design = SensorDesign::new(3, vec![0, 2]).unwrap();
        let e = embed_selection(&design, 2).unwrap();
        let prod = &a * densify(e.as_ref());
        let gathered = Matrix::from_fn(4, 4, |i, j| a[(i, [0, 2, 3, 5][j])]);
        assert_eq!(prod, gathered);
    }

    #[test]
    fn dimension_checks() {
        let op = DenseOperator::new(Matrix::zeros(2, 3));
        assert!(op.try_apply(&Vector::zeros(2)).is_err());
        assert!(op.try_apply_transpose(&Vector::zeros(2)).is_ok());
        assert!(ProblemDims::new(0, 1, 1).is_err());
    }

    #[test]
    fn counters_track_transposes() {
        let f = random_family(2, 3, 2);
        let dims = ProblemDims::new(2, 3, 1).unwrap();
        let li = CouplingOperator::new(dims, f.clone(), CouplingDirection::Inverse).unwrap();
        li.apply(&Vector::zeros(8));
        assert_eq!(f.forward_count(), 3);
        assert_eq!(f.transpose_count(), 0);
        li.apply_transpose(&Vector::zeros(8));
        assert_eq!(f.transpose_count(), 3);
    }
}
