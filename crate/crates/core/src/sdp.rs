//! A small modeling layer for conic programs with linear matrix inequalities
//! and log-det objectives, plus a pluggable solver interface.
//!
//! Problems are stated over a flat vector of scalar decision variables.
//! Matrix-valued expressions are [`AffineMatrix`] values whose entries are
//! affine functions ([`LinExpr`]) of those variables. A [`ConicProblem`]
//! minimizes
//!
//! ```text
//!   ½ xᵀ P x + cᵀ x − Σ_k w_k · log det M_k(x)
//! ```
//!
//! subject to linear equalities, scalar nonnegativity constraints and
//! semidefinite constraints `F(x) ⪰ 0`. The log-det terms are lowered to a
//! semidefinite block plus exponential cones by the backend.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Affine scalar expression `constant + Σ coef · x[var]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(index: usize) -> Self {
        Self { terms: vec![(index, 1.0)], constant: 0.0 }
    }

    pub fn add_term(&mut self, index: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((index, coef));
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.constant += scale * other.constant;
        self.terms
            .extend(other.terms.iter().map(|&(i, c)| (i, c * scale)));
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.iter().all(|&(_, c)| c == 0.0)
    }

    /// Merge duplicate variables and drop zero coefficients.
    pub fn compact(&mut self) {
        if self.terms.len() < 2 {
            self.terms.retain(|&(_, c)| c != 0.0);
            return;
        }
        self.terms.sort_unstable_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        self.terms = merged;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

/// Matrix whose entries are affine in the decision variables (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<LinExpr>,
}

impl AffineMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: vec![LinExpr::default(); rows * cols] }
    }

    pub fn from_const(m: &Mat) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.entries[i * m.ncols() + j].constant = m[(i, j)];
            }
        }
        out
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out.get_mut(i, i).constant = scale;
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut LinExpr {
        &mut self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> impl Iterator<Item = &LinExpr> {
        self.entries.iter()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.get_mut(j, i) = self.get(i, j).clone();
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for (o, e) in out.entries.iter_mut().zip(&self.entries) {
            o.add_scaled(e, s);
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (o, e) in out.entries.iter_mut().zip(&other.entries) {
            o.add_scaled(e, 1.0);
            o.compact();
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// `c · self` for a constant matrix `c`.
    pub fn left_mul(c: &Mat, m: &Self) -> Self {
        assert_eq!(c.ncols(), m.rows, "left_mul dimension mismatch");
        let mut out = Self::zeros(c.nrows(), m.cols);
        for i in 0..c.nrows() {
            for k in 0..c.ncols() {
                let w = c[(i, k)];
                if w == 0.0 {
                    continue;
                }
                for j in 0..m.cols {
                    out.entries[i * m.cols + j].add_scaled(m.get(k, j), w);
                }
            }
        }
        out.compact();
        out
    }

    /// `self · c` for a constant matrix `c`.
    pub fn right_mul(m: &Self, c: &Mat) -> Self {
        Self::left_mul(&c.transpose(), &m.transpose()).transpose()
    }

    /// Assemble from a grid of blocks; `None` entries are zero blocks and
    /// take their shape from the other blocks in the same row/column.
    pub fn from_blocks(grid: &[Vec<Option<&AffineMatrix>>]) -> Self {
        let nr = grid.len();
        let nc = grid.first().map_or(0, |r| r.len());
        let mut heights = vec![0usize; nr];
        let mut widths = vec![0usize; nc];
        for (bi, row) in grid.iter().enumerate() {
            assert_eq!(row.len(), nc, "ragged block grid");
            for (bj, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    heights[bi] = b.rows;
                    widths[bj] = b.cols;
                }
            }
        }
        let total_r = heights.iter().sum();
        let total_c = widths.iter().sum();
        let mut out = Self::zeros(total_r, total_c);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (bj, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    assert_eq!((b.rows, b.cols), (heights[bi], widths[bj]), "block shape");
                    for i in 0..b.rows {
                        for j in 0..b.cols {
                            *out.get_mut(r0 + i, c0 + j) = b.get(i, j).clone();
                        }
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        out
    }

    pub fn compact(&mut self) {
        self.entries.iter_mut().for_each(LinExpr::compact);
    }

    pub fn eval(&self, x: &[f64]) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }
}

/// Solver-independent conic program. See the module docs for the form.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    num_vars: usize,
    /// Linear objective coefficients, indexed by variable.
    pub linear: Vec<f64>,
    /// Upper-triangular entries `(i, j, v)` with `i <= j` of `P`.
    pub quadratic: Vec<(usize, usize, f64)>,
    /// Each expression is constrained to equal zero.
    pub equalities: Vec<LinExpr>,
    /// Each expression is constrained to be nonnegative.
    pub nonnegatives: Vec<LinExpr>,
    /// Symmetric affine matrices constrained to be positive semidefinite.
    pub psd: Vec<AffineMatrix>,
    /// `(weight, M)` pairs contributing `−weight · log det M` to the objective.
    pub logdet: Vec<(f64, AffineMatrix)>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn new_var(&mut self) -> usize {
        self.num_vars += 1;
        self.linear.push(0.0);
        self.num_vars - 1
    }

    pub fn new_dense(&mut self, rows: usize, cols: usize) -> AffineMatrix {
        let mut m = AffineMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                *m.get_mut(i, j) = LinExpr::var(self.new_var());
            }
        }
        m
    }

    pub fn new_symmetric(&mut self, n: usize) -> AffineMatrix {
        let mut m = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = LinExpr::var(self.new_var());
                *m.get_mut(i, j) = v.clone();
                *m.get_mut(j, i) = v;
            }
        }
        m
    }

    pub fn new_diagonal(&mut self, n: usize) -> AffineMatrix {
        let mut m = AffineMatrix::zeros(n, n);
        for i in 0..n {
            *m.get_mut(i, i) = LinExpr::var(self.new_var());
        }
        m
    }

    pub fn add_linear(&mut self, expr: &LinExpr, scale: f64) {
        for &(i, c) in &expr.terms {
            self.linear[i] += scale * c;
        }
    }

    /// Adds `½ · weight · var²` to the objective.
    pub fn add_square(&mut self, var: usize, weight: f64) {
        self.quadratic.push((var, var, weight));
    }

    /// Constrain every entry of `m` to zero.
    pub fn add_equal_zero(&mut self, m: &AffineMatrix) {
        for e in m.entries() {
            let mut e = e.clone();
            e.compact();
            if !e.is_zero() {
                self.equalities.push(e);
            }
        }
    }

    pub fn add_psd(&mut self, mut m: AffineMatrix) {
        assert_eq!(m.rows(), m.cols(), "PSD block must be square");
        m.compact();
        self.psd.push(m);
    }

    pub fn add_nonnegative(&mut self, e: LinExpr) {
        self.nonnegatives.push(e);
    }

    pub fn add_logdet(&mut self, weight: f64, m: AffineMatrix) {
        assert_eq!(m.rows(), m.cols(), "log-det argument must be square");
        self.logdet.push((weight, m));
    }

    /// Objective value at `x` (with `−w log det` set to +∞ outside the domain).
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v: f64 = self.linear.iter().zip(x).map(|(c, xi)| c * xi).sum();
        for &(i, j, p) in &self.quadratic {
            v += if i == j { 0.5 * p * x[i] * x[i] } else { p * x[i] * x[j] };
        }
        for (w, m) in &self.logdet {
            v -= w * crate::linalg::spd_log_det(&m.eval(x)).unwrap_or(f64::NEG_INFINITY);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Solved to the solver's reduced-accuracy tolerances.
    NearOptimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalError,
}

impl SolveStatus {
    pub fn has_solution(self) -> bool {
        matches!(self, Self::Optimal | Self::NearOptimal)
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Values of the problem's own variables (auxiliary variables stripped).
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
}

/// Backend capable of solving a [`ConicProblem`].
pub trait ConicSolver: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, problem: &ConicProblem) -> Result<ConicSolution>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Relative/absolute gap and feasibility tolerance.
    pub tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, verbose: false }
    }
}

/// Interior-point backend using Clarabel.
#[derive(Debug, Clone, Default)]
pub struct ClarabelSolver {
    pub settings: SolverSettings,
}

impl ClarabelSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }
}

/// Row-builder for `s = b − A x ∈ K`.
struct ConeRows {
    rows: usize,
    ai: Vec<usize>,
    aj: Vec<usize>,
    av: Vec<f64>,
    b: Vec<f64>,
}

impl ConeRows {
    /// Append the row `s = expr`.
    fn push(&mut self, expr: &LinExpr, scale: f64) {
        for &(j, c) in &expr.terms {
            if c != 0.0 {
                self.ai.push(self.rows);
                self.aj.push(j);
                self.av.push(-c * scale);
            }
        }
        self.b.push(expr.constant * scale);
        self.rows += 1;
    }

    /// Append the scaled upper triangle of a symmetric matrix, column-major.
    fn push_svec(&mut self, m: &AffineMatrix) {
        let n = m.rows();
        for j in 0..n {
            for i in 0..=j {
                let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                self.push(m.get(i, j), scale);
            }
        }
    }
}

impl ConicSolver for ClarabelSolver {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, problem: &ConicProblem) -> Result<ConicSolution> {
        let started = Instant::now();
        let n_own = problem.num_vars;
        let mut n = n_own;
        let mut q = problem.linear.clone();

        // Auxiliary variables for log det: a lower-triangular Z and one t per
        // diagonal entry, with t_i <= log Z_ii and [[M, Z],[Zᵀ, diag Z]] ⪰ 0.
        struct LogDetAux {
            block: AffineMatrix,
            exp: Vec<(usize, usize)>,
        }
        let mut aux = Vec::new();
        for (w, m) in &problem.logdet {
            let k = m.rows();
            let mut z = AffineMatrix::zeros(k, k);
            for j in 0..k {
                for i in j..k {
                    *z.get_mut(i, j) = LinExpr::var(n);
                    q.push(0.0);
                    n += 1;
                }
            }
            let mut diag = AffineMatrix::zeros(k, k);
            let mut exp = Vec::with_capacity(k);
            for i in 0..k {
                *diag.get_mut(i, i) = z.get(i, i).clone();
                let t = n;
                q.push(-w);
                n += 1;
                exp.push((t, z.get(i, i).terms[0].0));
            }
            let zt = z.transpose();
            let block = AffineMatrix::from_blocks(&[
                vec![Some(m), Some(&z)],
                vec![Some(&zt), Some(&diag)],
            ]);
            aux.push(LogDetAux { block, exp });
        }

        let mut rows = ConeRows { rows: 0, ai: vec![], aj: vec![], av: vec![], b: vec![] };
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        if !problem.equalities.is_empty() {
            for e in &problem.equalities {
                rows.push(e, 1.0);
            }
            cones.push(SupportedConeT::ZeroConeT(problem.equalities.len()));
        }
        if !problem.nonnegatives.is_empty() {
            for e in &problem.nonnegatives {
                rows.push(e, 1.0);
            }
            cones.push(SupportedConeT::NonnegativeConeT(problem.nonnegatives.len()));
        }
        for m in problem.psd.iter().chain(aux.iter().map(|a| &a.block)) {
            if m.rows() == 0 {
                continue;
            }
            rows.push_svec(m);
            cones.push(SupportedConeT::PSDTriangleConeT(m.rows()));
        }
        for a in &aux {
            for &(t, zii) in &a.exp {
                rows.push(&LinExpr::var(t), 1.0);
                rows.push(&LinExpr::constant(1.0), 1.0);
                rows.push(&LinExpr::var(zii), 1.0);
                cones.push(SupportedConeT::ExponentialConeT());
            }
        }

        let a = CscMatrix::new_from_triplets(rows.rows, n, rows.ai, rows.aj, rows.av);
        let (mut pi, mut pj, mut pv) = (vec![], vec![], vec![]);
        for &(i, j, v) in &problem.quadratic {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            pi.push(i);
            pj.push(j);
            pv.push(v);
        }
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let run = |attempt: usize| -> Result<DefaultSolver<f64>> {
            let mut settings = DefaultSettings {
                verbose: self.settings.verbose,
                max_iter: self.settings.max_iter,
                tol_gap_abs: self.settings.tol,
                tol_gap_rel: self.settings.tol,
                tol_feas: self.settings.tol,
                direct_solve_method: "faer".to_string(),
                ..DefaultSettings::default()
            };
            match attempt {
                0 => {}
                1 => {
                    settings.static_regularization_constant = 1e-7;
                    settings.equilibrate_max_iter = 50;
                }
                _ => settings.max_step_fraction = 0.95,
            }
            let mut solver = DefaultSolver::new(&p, &q, &a, &rows.b, &cones, settings)
                .map_err(|e| Error::Solver(format!("problem setup rejected: {e:?}")))?;
            solver.solve();
            Ok(solver)
        };
        // After a numerical breakdown, retry with heavier regularization and
        // then with shorter interior-point steps.
        let mut solver = run(0)?;
        for attempt in 1..=2 {
            if !matches!(solver.solution.status, SolverStatus::InsufficientProgress | SolverStatus::NumericalError) {
                break;
            }
            solver = run(attempt)?;
        }
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterationLimit,
            _ => SolveStatus::NumericalError,
        };
        let x: Vec<f64> = sol.x[..n_own].to_vec();
        Ok(ConicSolution {
            status,
            objective: problem.objective(&x),
            x,
            iterations: sol.iterations,
            solve_time: started.elapsed().as_secs_f64(),
        })
    }
}
