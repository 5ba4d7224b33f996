//! Stability certificates for the closed loop: the data-driven LMI conditions
//! in the decision variables `(Q, L)`, the model-based check used as an
//! oracle, and regions of attraction derived from certificates.
//!
//! Variables: `Q = diag(Q1, Q2)` with `Q1` symmetric `n_x × n_x` and `Q2`
//! diagonal `n_φ × n_φ`, and `L = [[L1, L2], [L3, L4]]` with `L1: T × n_x`,
//! `L2: T × n_φ`, `L3: n_φ × n_x`, `L4: n_φ × n_φ`.

use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::nn::{BlockMatrixN, NnController};
use crate::plant::{ExperimentData, PlantModel, StateBox};
use crate::sdp::{AffineMatrix, ConicProblem, ConicSolver, LinExpr, SolveStatus};
use crate::sector::{loop_transform, SectorContext, TransformedN};

/// Tolerance on the eigenvalue margin when validating a solution.
pub const MARGIN_TOL: f64 = 1e-8;
/// Frobenius tolerance on the linear equality residuals of a certificate.
pub const EQUALITY_TOL: f64 = 1e-7;
/// Lower bound enforced on the multipliers of the model-based check.
pub const MIN_MULTIPLIER: f64 = 1e-8;
/// Largest accepted condition number of `Q1` when forming a region of attraction.
pub const MAX_CONDITION: f64 = 1e12;

/// The solver is asked for a slightly larger margin than the one validated, so
/// that the post-solve cleanup never pushes a solution below the threshold.
const MARGIN_INFLATION: f64 = 1.05;

/// Margin `1e-6 (1 + ‖X1‖_F)` used for the strict inequality.
pub fn default_margin(data: &ExperimentData) -> f64 {
    1e-6 * (1.0 + data.x1.norm())
}

/// Symbolic decision variables of the data-driven conditions.
#[derive(Debug, Clone)]
pub struct DdVariables {
    pub q1: AffineMatrix,
    pub q2: AffineMatrix,
    pub l1: AffineMatrix,
    pub l2: AffineMatrix,
    pub l3: AffineMatrix,
    pub l4: AffineMatrix,
}

impl DdVariables {
    pub fn allocate(problem: &mut ConicProblem, n_x: usize, n_phi: usize, t: usize) -> Self {
        Self {
            q1: problem.new_symmetric(n_x),
            q2: problem.new_diagonal(n_phi),
            l1: problem.new_dense(t, n_x),
            l2: problem.new_dense(t, n_phi),
            l3: problem.new_dense(n_phi, n_x),
            l4: problem.new_dense(n_phi, n_phi),
        }
    }

    pub fn eval(&self, x: &[f64]) -> DdValues {
        DdValues {
            q1: linalg::sym(&self.q1.eval(x)),
            q2: Mat::from_diagonal(&self.q2.eval(x).diagonal()),
            l1: self.l1.eval(x),
            l2: self.l2.eval(x),
            l3: self.l3.eval(x),
            l4: self.l4.eval(x),
        }
    }
}

/// Numerical values of `(Q, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdValues {
    pub q1: Mat,
    pub q2: Mat,
    pub l1: Mat,
    pub l2: Mat,
    pub l3: Mat,
    pub l4: Mat,
}

impl DdValues {
    pub fn n_x(&self) -> usize {
        self.q1.nrows()
    }

    pub fn n_phi(&self) -> usize {
        self.q2.nrows()
    }

    pub fn t(&self) -> usize {
        self.l1.nrows()
    }

    pub fn q(&self) -> Mat {
        linalg::block_diag(&[&self.q1, &self.q2])
    }

    pub fn l(&self) -> Mat {
        linalg::block2(&self.l1, &self.l2, &self.l3, &self.l4)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            q1: &self.q1 * c,
            q2: &self.q2 * c,
            l1: &self.l1 * c,
            l2: &self.l2 * c,
            l3: &self.l3 * c,
            l4: &self.l4 * c,
        }
    }

    fn check_dims(&self, data: &ExperimentData) -> Result<()> {
        let (n_x, k, t) = (self.n_x(), self.n_phi(), self.t());
        let ok = data.n_x() == n_x
            && data.t() == t
            && self.q1.ncols() == n_x
            && self.q2.ncols() == k
            && self.l1.shape() == (t, n_x)
            && self.l2.shape() == (t, k)
            && self.l3.shape() == (k, n_x)
            && self.l4.shape() == (k, k);
        if ok {
            Ok(())
        } else {
            dims("(Q, L) blocks do not match the data dimensions")
        }
    }
}

/// The symmetric `2(n_x + n_φ)` block matrix
///
/// ```text
/// [[Q1,     0,      L1ᵀX1ᵀ, L3ᵀ],
///  [0,      Q2,     L2ᵀX1ᵀ, L4ᵀ],
///  [X1 L1,  X1 L2,  Q1,     0  ],
///  [L3,     L4,     0,      Q2 ]]
/// ```
///
/// whose positive definiteness certifies closed-loop stability.
pub fn assemble_dd_lmi(x1: &Mat, vars: &DdVariables) -> AffineMatrix {
    let x1l1 = AffineMatrix::left_mul(x1, &vars.l1);
    let x1l2 = AffineMatrix::left_mul(x1, &vars.l2);
    let (x1l1t, x1l2t) = (x1l1.transpose(), x1l2.transpose());
    let (l3t, l4t) = (vars.l3.transpose(), vars.l4.transpose());
    AffineMatrix::from_blocks(&[
        vec![Some(&vars.q1), None, Some(&x1l1t), Some(&l3t)],
        vec![None, Some(&vars.q2), Some(&x1l2t), Some(&l4t)],
        vec![Some(&x1l1), Some(&x1l2), Some(&vars.q1), None],
        vec![Some(&vars.l3), Some(&vars.l4), None, Some(&vars.q2)],
    ])
}

/// Numerical counterpart of [`assemble_dd_lmi`].
pub fn dd_lmi_matrix(x1: &Mat, v: &DdValues) -> Mat {
    let (n_x, k) = (v.n_x(), v.n_phi());
    let n = 2 * (n_x + k);
    let mut m = Mat::zeros(n, n);
    let x1l1 = x1 * &v.l1;
    let x1l2 = x1 * &v.l2;
    let (r2, r3) = (n_x + k, 2 * n_x + k);
    m.view_mut((0, 0), (n_x, n_x)).copy_from(&v.q1);
    m.view_mut((n_x, n_x), (k, k)).copy_from(&v.q2);
    m.view_mut((r2, r2), (n_x, n_x)).copy_from(&v.q1);
    m.view_mut((r3, r3), (k, k)).copy_from(&v.q2);
    m.view_mut((r2, 0), (n_x, n_x)).copy_from(&x1l1);
    m.view_mut((r2, n_x), (n_x, k)).copy_from(&x1l2);
    m.view_mut((r3, 0), (k, n_x)).copy_from(&v.l3);
    m.view_mut((r3, n_x), (k, k)).copy_from(&v.l4);
    m.view_mut((0, r2), (n_x, n_x)).copy_from(&x1l1.transpose());
    m.view_mut((n_x, r2), (k, n_x)).copy_from(&x1l2.transpose());
    m.view_mut((0, r3), (n_x, k)).copy_from(&v.l3.transpose());
    m.view_mut((n_x, r3), (k, k)).copy_from(&v.l4.transpose());
    m
}

/// Linear equality blocks, each constrained to zero.
#[derive(Debug, Clone)]
pub struct EqualityConstraints {
    /// `Ñ Q − Ū L`, present when `Ñ` is fixed.
    pub loop_eq: Option<AffineMatrix>,
    /// `[I 0] Q − X̄ L`, tying `Q1` to the measured states.
    pub data_eq: AffineMatrix,
}

/// `Ñ Q − Ū L` with `Ū = diag(U0, I)`.
pub fn loop_residual(nt: &TransformedN, data: &ExperimentData, vars: &DdVariables) -> AffineMatrix {
    let nq = AffineMatrix::from_blocks(&[
        vec![Some(&AffineMatrix::left_mul(&nt.pix, &vars.q1)), Some(&AffineMatrix::left_mul(&nt.piz, &vars.q2))],
        vec![
            Some(&AffineMatrix::left_mul(&nt.nux, &vars.q1)),
            Some(&AffineMatrix::left_mul(&nt.nuz, &vars.q2)),
        ],
    ]);
    let ul = AffineMatrix::from_blocks(&[
        vec![
            Some(&AffineMatrix::left_mul(&data.u0, &vars.l1)),
            Some(&AffineMatrix::left_mul(&data.u0, &vars.l2)),
        ],
        vec![Some(&vars.l3), Some(&vars.l4)],
    ]);
    nq.sub(&ul)
}

/// `[I 0] Q − [X0 0] L = [Q1 − X0 L1, −X0 L2]`.
pub fn data_residual(data: &ExperimentData, vars: &DdVariables) -> AffineMatrix {
    let left = vars.q1.sub(&AffineMatrix::left_mul(&data.x0, &vars.l1));
    let right = AffineMatrix::left_mul(&data.x0, &vars.l2).scale(-1.0);
    AffineMatrix::from_blocks(&[vec![Some(&left), Some(&right)]])
}

/// Equality constraints for verification (`nt` given) or synthesis (`None`,
/// where `Ñ Q = Ū L` is handled by the augmented Lagrangian instead).
pub fn assemble_equality_constraints(
    nt: Option<&TransformedN>,
    data: &ExperimentData,
    vars: &DdVariables,
) -> EqualityConstraints {
    EqualityConstraints {
        loop_eq: nt.map(|nt| loop_residual(nt, data, vars)),
        data_eq: data_residual(data, vars),
    }
}

/// Numerical `Ñ Q − Ū L`.
pub fn loop_residual_value(nt: &TransformedN, data: &ExperimentData, v: &DdValues) -> Mat {
    let nq = &nt.to_dense() * v.q();
    let ul = linalg::block2(&(&data.u0 * &v.l1), &(&data.u0 * &v.l2), &v.l3, &v.l4);
    nq - ul
}

/// Numerical `[I 0] Q − [X0 0] L`.
pub fn data_residual_value(data: &ExperimentData, v: &DdValues) -> Mat {
    linalg::hstack(&[&(&v.q1 - &data.x0 * &v.l1), &(-(&data.x0 * &v.l2))])
}

/// Ellipsoid containment `E(Q1⁻¹) ⊆ {|H_i x| ≤ x̄_i}` as one scalar inequality
/// `x̄_i² − h_iᵀ Q1 h_i ≥ 0` per row; this is the Schur complement of the
/// block form and is equivalent to it whenever `Q1 ≻ 0`.
pub fn state_constraint_rows(q1: &AffineMatrix, state_box: &StateBox) -> Vec<LinExpr> {
    (0..state_box.h.nrows())
        .map(|i| {
            let h = state_box.h.row(i).transpose();
            let hq = AffineMatrix::left_mul(&Mat::from_row_slice(1, h.len(), h.as_slice()), q1);
            let hqh = AffineMatrix::right_mul(&hq, &Mat::from_column_slice(h.len(), 1, h.as_slice()));
            let mut e = LinExpr::constant(state_box.xbar[i] * state_box.xbar[i]);
            e.add_scaled(hqh.get(0, 0), -1.0);
            e.compact();
            e
        })
        .collect()
}

/// The `(1 + n_x)`-square matrices `[[x̄_i², h_iᵀ], [h_i, P]]`, one per row of
/// `H`; all are positive semidefinite iff `E(P)` lies inside the constraint set.
pub fn state_constraint_lmi(p: &Mat, state_box: &StateBox) -> Result<Vec<Mat>> {
    let n = p.nrows();
    if state_box.h.ncols() != n || p.ncols() != n {
        return dims("P and H dimensions differ");
    }
    Ok((0..state_box.h.nrows())
        .map(|i| {
            let mut m = Mat::zeros(n + 1, n + 1);
            m[(0, 0)] = state_box.xbar[i] * state_box.xbar[i];
            for j in 0..n {
                m[(0, j + 1)] = state_box.h[(i, j)];
                m[(j + 1, 0)] = state_box.h[(i, j)];
            }
            m.view_mut((1, 1), (n, n)).copy_from(p);
            m
        })
        .collect())
}

/// `x̄_i² − h_iᵀ Q1 h_i` for every row.
pub fn state_constraint_slack(q1: &Mat, state_box: &StateBox) -> Vector {
    Vector::from_fn(state_box.h.nrows(), |i, _| {
        let h = state_box.h.row(i).transpose();
        state_box.xbar[i] * state_box.xbar[i] - (h.transpose() * q1 * &h)[(0, 0)]
    })
}

/// Certificate of closed-loop stability with region of attraction
/// `{x : xᵀ Q1⁻¹ x ≤ 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    #[serde(rename = "Q1", with = "crate::serde_util::matrix")]
    pub q1: Mat,
    #[serde(rename = "Q2_diag", with = "crate::serde_util::vector")]
    pub q2_diag: Vector,
    #[serde(rename = "L1", with = "crate::serde_util::matrix")]
    pub l1: Mat,
    #[serde(rename = "L2", with = "crate::serde_util::matrix")]
    pub l2: Mat,
    #[serde(rename = "L3", with = "crate::serde_util::matrix")]
    pub l3: Mat,
    #[serde(rename = "L4", with = "crate::serde_util::matrix")]
    pub l4: Mat,
    /// Frobenius norm of `Ñ Q − Ū L`.
    pub eq_residual: f64,
    /// Smallest eigenvalue of the block LMI matrix.
    pub margin: f64,
    /// Margin the certificate was validated against.
    pub required_margin: f64,
    #[serde(rename = "log_det_Q1")]
    pub log_det_q1: f64,
    pub solver_status: SolveStatus,
    pub sector_context: SectorContext,
    pub transformed_n: TransformedN,
}

impl StabilityCertificate {
    pub fn values(&self) -> DdValues {
        DdValues {
            q1: self.q1.clone(),
            q2: Mat::from_diagonal(&self.q2_diag),
            l1: self.l1.clone(),
            l2: self.l2.clone(),
            l3: self.l3.clone(),
            l4: self.l4.clone(),
        }
    }

    /// Recheck every condition of the certificate against `data`.
    pub fn validate(&self, data: &ExperimentData, state_box: &StateBox) -> Result<()> {
        validate_values(&self.values(), Some(&self.transformed_n), data, state_box, self.required_margin)
            .map(|_| ())
            .map_err(Error::IllConditionedCertificate)
    }
}

/// Outcome of a verification problem.
#[derive(Debug, Clone)]
pub enum Verdict<C> {
    Certified(C),
    Infeasible { status: SolveStatus, detail: String },
}

impl<C> Verdict<C> {
    pub fn is_certified(&self) -> bool {
        matches!(self, Self::Certified(_))
    }

    pub fn certificate(&self) -> Option<&C> {
        match self {
            Self::Certified(c) => Some(c),
            Self::Infeasible { .. } => None,
        }
    }
}

struct Checked {
    margin: f64,
    eq_residual: f64,
    log_det_q1: f64,
}

/// Check definiteness, the margin, the equalities and ellipsoid containment.
fn validate_values(
    v: &DdValues,
    nt: Option<&TransformedN>,
    data: &ExperimentData,
    state_box: &StateBox,
    margin: f64,
) -> std::result::Result<Checked, String> {
    v.check_dims(data).map_err(|e| e.to_string())?;
    let all = [&v.q1, &v.q2, &v.l1, &v.l2, &v.l3, &v.l4];
    if !all.iter().all(|m| linalg::all_finite(m)) {
        return Err("non-finite entries".into());
    }
    let log_det_q1 = linalg::spd_log_det(&v.q1).ok_or("Q1 is not positive definite")?;
    if v.q2.diagonal().iter().any(|&d| d <= 0.0) {
        return Err("Q2 is not positive definite".into());
    }
    let min_eig = linalg::min_eigenvalue(&dd_lmi_matrix(&data.x1, v));
    if min_eig < margin - MARGIN_TOL {
        return Err(format!("LMI margin {min_eig:.3e} below required {margin:.3e}"));
    }
    let data_res = data_residual_value(data, v).norm();
    if data_res > EQUALITY_TOL {
        return Err(format!("data consistency residual {data_res:.3e}"));
    }
    let eq_residual = nt.map_or(0.0, |nt| loop_residual_value(nt, data, v).norm());
    if eq_residual > EQUALITY_TOL {
        return Err(format!("loop equality residual {eq_residual:.3e}"));
    }
    let slack = state_constraint_slack(&v.q1, state_box);
    if let Some(i) = (0..slack.len()).find(|&i| slack[i] < -1e-9 * state_box.xbar[i].powi(2)) {
        return Err(format!("ellipsoid leaves the constraint set along row {i}"));
    }
    Ok(Checked { margin: min_eig, eq_residual, log_det_q1 })
}

/// Project `L` onto the equality constraints (least-norm correction), then
/// shrink `(Q, L)` uniformly if the ellipsoid slightly violates containment.
/// Both steps keep every constraint that is homogeneous in `(Q, L)`.
pub fn polish(v: &DdValues, nt: Option<&TransformedN>, data: &ExperimentData, state_box: &StateBox) -> DdValues {
    let mut out = v.clone();
    out.q1 = linalg::sym(&v.q1);
    out.q2 = Mat::from_diagonal(&v.q2.diagonal());
    match nt {
        Some(nt) => {
            let d = data.stacked();
            let dp = linalg::pinv(&d);
            let t1 = linalg::vstack(&[&(&nt.pix * &out.q1), &out.q1]);
            let t2 = linalg::vstack(&[&(&nt.piz * &out.q2), &Mat::zeros(data.n_x(), out.q2.ncols())]);
            out.l1 = &out.l1 + &dp * (t1 - &d * &out.l1);
            out.l2 = &out.l2 + &dp * (t2 - &d * &out.l2);
            out.l3 = &nt.nux * &out.q1;
            out.l4 = &nt.nuz * &out.q2;
        }
        None => {
            let xp = linalg::pinv(&data.x0);
            out.l1 = &out.l1 + &xp * (&out.q1 - &data.x0 * &out.l1);
            out.l2 = &out.l2 - &xp * (&data.x0 * &out.l2);
        }
    }
    let mut c: f64 = 1.0;
    for i in 0..state_box.h.nrows() {
        let h = state_box.h.row(i).transpose();
        let hqh = (h.transpose() * &out.q1 * &h)[(0, 0)];
        let cap = state_box.xbar[i] * state_box.xbar[i];
        if hqh > cap {
            c = c.min(cap / hqh);
        }
    }
    if c < 1.0 {
        out = out.scale(c * (1.0 - 1e-12));
    }
    out
}

fn solver_failure(status: SolveStatus, what: &str) -> Error {
    Error::Solver(format!("{what}: solver returned {status:?}"))
}

/// Verify a fixed controller from data alone: maximize `log det Q1` subject
/// to the block LMI, both equality blocks and ellipsoid containment, with the
/// local sectors computed from `state_box`.
pub fn verify_fixed_controller(
    nn: &NnController,
    data: &ExperimentData,
    state_box: &StateBox,
    solver: &dyn ConicSolver,
) -> Result<Verdict<StabilityCertificate>> {
    let ctx = SectorContext::for_controller(nn, state_box)?;
    let nt = loop_transform(&nn.assemble_n(), &ctx)?;
    verify_transformed(&nt, &ctx, data, state_box, default_margin(data), solver)
}

/// [`verify_fixed_controller`] for an already transformed `Ñ`.
pub fn verify_transformed(
    nt: &TransformedN,
    ctx: &SectorContext,
    data: &ExperimentData,
    state_box: &StateBox,
    margin: f64,
    solver: &dyn ConicSolver,
) -> Result<Verdict<StabilityCertificate>> {
    data.require_pe()?;
    if nt.n_x() != data.n_x() || nt.n_u() != data.n_u() || nt.n_phi() != ctx.n_phi() {
        return dims("controller, sector and data dimensions disagree");
    }
    if state_box.dim() != data.n_x() {
        return dims("state box dimension differs from the data");
    }
    let (p, vars) = verification_problem(nt, data, state_box, Some(margin * MARGIN_INFLATION));
    let sol = solver.solve(&p)?;
    let certify = |x: &[f64], status: SolveStatus| -> std::result::Result<StabilityCertificate, String> {
        let values = polish(&vars.eval(x), Some(nt), data, state_box);
        let c = validate_values(&values, Some(nt), data, state_box, margin)?;
        Ok(StabilityCertificate {
            q1: values.q1,
            q2_diag: values.q2.diagonal(),
            l1: values.l1,
            l2: values.l2,
            l3: values.l3,
            l4: values.l4,
            eq_residual: c.eq_residual,
            margin: c.margin,
            required_margin: margin,
            log_det_q1: c.log_det_q1,
            solver_status: status,
            sector_context: ctx.clone(),
            transformed_n: nt.clone(),
        })
    };
    if sol.status != SolveStatus::Infeasible {
        if let Ok(cert) = certify(&sol.x, sol.status) {
            return Ok(Verdict::Certified(cert));
        }
    }
    // The log-det problem failed or returned an invalid point: settle
    // feasibility with the always-feasible margin maximization instead.
    let (p1, _) = verification_problem(nt, data, state_box, None);
    let sol1 = solver.solve(&p1)?;
    if !sol1.status.has_solution() {
        return Err(solver_failure(sol1.status, "margin maximization"));
    }
    let best = sol1.x[p1.num_vars() - 1];
    if best < margin {
        return Ok(Verdict::Infeasible {
            status: SolveStatus::Infeasible,
            detail: format!("largest achievable LMI margin {best:.3e} is below {margin:.3e}"),
        });
    }
    match certify(&sol1.x, sol1.status) {
        Ok(cert) => Ok(Verdict::Certified(cert)),
        Err(detail) => Err(Error::Solver(format!("feasible margin {best:.3e} but no valid certificate: {detail}"))),
    }
}

/// Largest `s` such that the block LMI minus `s I` is feasible together with
/// the equalities and ellipsoid containment. Nonnegative values of at least
/// the default margin mean the fixed controller is certifiable.
pub fn max_certifiable_margin(
    nt: &TransformedN,
    data: &ExperimentData,
    state_box: &StateBox,
    solver: &dyn ConicSolver,
) -> Result<f64> {
    data.require_pe()?;
    let (p, _) = verification_problem(nt, data, state_box, None);
    let sol = solver.solve(&p)?;
    if !sol.status.has_solution() {
        return Err(solver_failure(sol.status, "margin maximization"));
    }
    Ok(sol.x[p.num_vars() - 1])
}

/// Verification program for fixed `Ñ`. With `Some(margin)` it maximizes
/// `log det Q1` under the margin; with `None` it maximizes the margin itself,
/// stored in the last variable.
fn verification_problem(
    nt: &TransformedN,
    data: &ExperimentData,
    state_box: &StateBox,
    margin: Option<f64>,
) -> (ConicProblem, DdVariables) {
    let mut p = ConicProblem::new();
    let vars = DdVariables::allocate(&mut p, data.n_x(), nt.n_phi(), data.t());
    let lmi = assemble_dd_lmi(&data.x1, &vars);
    let eqs = assemble_equality_constraints(Some(nt), data, &vars);
    p.add_equal_zero(&eqs.data_eq);
    if let Some(e) = &eqs.loop_eq {
        p.add_equal_zero(e);
    }
    for e in state_constraint_rows(&vars.q1, state_box) {
        p.add_nonnegative(e);
    }
    match margin {
        Some(m) => {
            p.add_psd(lmi.sub(&AffineMatrix::identity(lmi.rows(), m)));
            p.add_logdet(1.0, vars.q1.clone());
        }
        None => {
            let s = p.new_var();
            p.linear[s] = -1.0;
            let mut shift = AffineMatrix::zeros(lmi.rows(), lmi.rows());
            for i in 0..lmi.rows() {
                *shift.get_mut(i, i) = LinExpr::var(s);
            }
            p.add_psd(lmi.sub(&shift));
        }
    }
    (p, vars)
}

/// Result of one `(Q, L)` update of the augmented-Lagrangian scheme.
#[derive(Debug, Clone)]
pub struct QlUpdate {
    pub values: DdValues,
    pub status: SolveStatus,
    /// `Ñ Q − Ū L` at the returned point.
    pub residual: Mat,
    pub log_det_q1: f64,
}

/// Outcome of [`solve_ql_update`].
#[derive(Debug, Clone)]
pub enum QlOutcome {
    Solved(QlUpdate),
    Failed(SolveStatus),
}

/// Weights of the `(Q, L)` update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QlWeights {
    pub rho: f64,
    pub eta2: f64,
    /// Optional bound `Q2 ⪯ q2_max I`. Without it the objective is flat in
    /// many `Q2` directions and the solver may return very large entries.
    pub q2_max: Option<f64>,
}

/// Minimize `−η₂ log det Q1 + ⟨Y, R⟩ + (ρ/2)‖R‖²_F` with `R = Ñ Q − Ū L`
/// over `(Q, L)` subject to the block LMI, the data-consistency equality and
/// ellipsoid containment. `Y = None` is treated as zero.
pub fn solve_ql_update(
    nt: &TransformedN,
    data: &ExperimentData,
    state_box: &StateBox,
    y: Option<&Mat>,
    w: &QlWeights,
    margin: f64,
    solver: &dyn ConicSolver,
) -> Result<QlOutcome> {
    data.require_pe()?;
    let (n_x, k, n_u) = (data.n_x(), nt.n_phi(), data.n_u());
    if nt.n_x() != n_x || nt.n_u() != n_u {
        return dims("controller and data dimensions disagree");
    }
    if let Some(y) = y {
        if y.shape() != (n_u + k, n_x + k) {
            return dims(format!("multiplier Y has shape {:?}", y.shape()));
        }
    }
    let mut p = ConicProblem::new();
    let vars = DdVariables::allocate(&mut p, n_x, k, data.t());
    let lmi = assemble_dd_lmi(&data.x1, &vars);
    p.add_psd(lmi.sub(&AffineMatrix::identity(lmi.rows(), margin * MARGIN_INFLATION)));
    p.add_equal_zero(&data_residual(data, &vars));
    for e in state_constraint_rows(&vars.q1, state_box) {
        p.add_nonnegative(e);
    }
    let r = p.new_dense(n_u + k, n_x + k);
    p.add_equal_zero(&r.sub(&loop_residual(nt, data, &vars)));
    for i in 0..n_u + k {
        for j in 0..n_x + k {
            let var = r.get(i, j).terms[0].0;
            if let Some(y) = y {
                p.linear[var] += y[(i, j)];
            }
            p.add_square(var, w.rho);
        }
    }
    p.add_logdet(w.eta2, vars.q1.clone());
    if let Some(cap) = w.q2_max {
        for i in 0..k {
            let mut e = LinExpr::constant(cap);
            e.add_scaled(vars.q2.get(i, i), -1.0);
            p.add_nonnegative(e);
        }
    }

    let sol = solver.solve(&p)?;
    // A stalled solve still returns its last iterate; it is used only if it
    // passes the same validation as an optimal one.
    let usable = sol.status.has_solution()
        || (matches!(sol.status, SolveStatus::NumericalError | SolveStatus::IterationLimit)
            && sol.x.iter().all(|v| v.is_finite()));
    if !usable {
        return Ok(QlOutcome::Failed(sol.status));
    }
    let values = polish(&vars.eval(&sol.x), None, data, state_box);
    match validate_values(&values, None, data, state_box, margin) {
        Ok(c) => Ok(QlOutcome::Solved(QlUpdate {
            residual: loop_residual_value(nt, data, &values),
            values,
            status: sol.status,
            log_det_q1: c.log_det_q1,
        })),
        Err(_) if !sol.status.has_solution() => Ok(QlOutcome::Failed(sol.status)),
        Err(_) => Ok(QlOutcome::Failed(SolveStatus::NumericalError)),
    }
}

/// Fallback initialization `Q = I` with `L` the least-squares solution of
/// the data-consistency equality.
pub fn identity_initialization(nt: &TransformedN, data: &ExperimentData) -> DdValues {
    let (n_x, k, t) = (data.n_x(), nt.n_phi(), data.t());
    let q1 = Mat::identity(n_x, n_x);
    let q2 = Mat::identity(k, k);
    let xp = linalg::pinv(&data.x0);
    DdValues { l1: &xp * &q1, l2: Mat::zeros(t, k), l3: &nt.nux * &q1, l4: &nt.nuz * &q2, q1, q2 }
}

/// Values of `(Q, L)` induced by a model-based pair `(P, Λ)`:
/// `Q1 = P⁻¹`, `Q2 = Λ⁻¹`, `L1 = G1 Q1`, `L2 = G2 Q2`, `L3 = Ñνx Q1`,
/// `L4 = Ñνz Q2`, where `G1`, `G2` are the least-norm solutions of
/// `[Ñπx; I] = [U0; X0] G1` and `[Ñπz; 0] = [U0; X0] G2`.
pub fn substitute_model_quantities(
    nt: &TransformedN,
    data: &ExperimentData,
    p: &Mat,
    lambda: &Vector,
) -> Result<DdValues> {
    data.require_pe()?;
    let q1 = linalg::spd_inverse(p).ok_or_else(|| Error::DomainError("P is not positive definite".into()))?;
    if lambda.iter().any(|&l| l <= 0.0) {
        return Err(Error::DomainError("Λ must be positive".into()));
    }
    let q2 = Mat::from_diagonal(&lambda.map(|l| 1.0 / l));
    let dp = linalg::pinv(&data.stacked());
    let (n_x, k) = (data.n_x(), nt.n_phi());
    let g1 = &dp * linalg::vstack(&[&nt.pix, &Mat::identity(n_x, n_x)]);
    let g2 = &dp * linalg::vstack(&[&nt.piz, &Mat::zeros(n_x, k)]);
    Ok(DdValues { l1: g1 * &q1, l2: g2 * &q2, l3: &nt.nux * &q1, l4: &nt.nuz * &q2, q1, q2 })
}

/// Model-based stability matrix in the loop-transformed coordinates,
///
/// ```text
/// R̃_Vᵀ [[AᵀPA − P, AᵀPB], [BᵀPA, BᵀPB]] R̃_V + R̃_φᵀ diag(Λ, −Λ) R̃_φ,
/// ```
///
/// with `R̃_V = [[I, 0], [Ñπx, Ñπz]]` and `R̃_φ = [[Ñνx, Ñνz], [0, I]]`.
/// Negative definiteness certifies stability of the transformed loop.
pub fn transformed_stability_matrix(plant: &PlantModel, nt: &TransformedN, p: &Mat, lambda: &Vector) -> Mat {
    let (n_x, k) = (plant.n_x(), nt.n_phi());
    let cl = linalg::hstack(&[&(plant.a() + plant.b() * &nt.pix), &(plant.b() * &nt.piz)]);
    let e1 = linalg::hstack(&[&Mat::identity(n_x, n_x), &Mat::zeros(n_x, k)]);
    let nu = linalg::hstack(&[&nt.nux, &nt.nuz]);
    let e2 = linalg::hstack(&[&Mat::zeros(k, n_x), &Mat::identity(k, k)]);
    let lam = Mat::from_diagonal(lambda);
    cl.transpose() * p * &cl - e1.transpose() * p * &e1 + nu.transpose() * &lam * &nu
        - e2.transpose() * &lam * &e2
}

/// Model-based stability matrix in the original coordinates,
///
/// ```text
/// R_Vᵀ [[AᵀPA − P, AᵀPB], [BᵀPA, BᵀPB]] R_V + R_φᵀ M_φ R_φ,
/// ```
///
/// with `R_V = [[I, 0], [Nπx, Nπω]]`, `R_φ = [[Nνx, Nνω], [0, I]]` and `M_φ`
/// the stacked sector quadratic constraint.
pub fn model_stability_matrix(
    plant: &PlantModel,
    n: &BlockMatrixN,
    ctx: &SectorContext,
    p: &Mat,
    lambda: &Vector,
) -> Result<Mat> {
    let (n_x, k) = (plant.n_x(), n.n_phi());
    let cl = linalg::hstack(&[&(plant.a() + plant.b() * &n.pix), &(plant.b() * &n.piw)]);
    let e1 = linalg::hstack(&[&Mat::identity(n_x, n_x), &Mat::zeros(n_x, k)]);
    let r_phi = linalg::vstack(&[
        &linalg::hstack(&[&n.nux, &n.nuw]),
        &linalg::hstack(&[&Mat::zeros(k, n_x), &Mat::identity(k, k)]),
    ]);
    let qc = crate::sector::stacked_sector_qc(ctx, lambda)?;
    Ok(cl.transpose() * p * &cl - e1.transpose() * p * &e1 + r_phi.transpose() * qc * &r_phi)
}

/// Lyapunov matrix and multipliers of a model-based certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCertificate {
    #[serde(with = "crate::serde_util::matrix")]
    pub p: Mat,
    #[serde(with = "crate::serde_util::vector")]
    pub lambda: Vector,
    /// Largest eigenvalue of the stability matrix (negative when certified).
    pub max_eigenvalue: f64,
}

/// Model-based check with known `(A, B)`: find `P ≻ 0` and `λ ≥ 1e-8` with the
/// stability matrix negative definite and `E(P)` inside the constraint set,
/// minimizing `trace P`.
pub fn verify_model_based(
    plant: &PlantModel,
    nn: &NnController,
    state_box: &StateBox,
    solver: &dyn ConicSolver,
) -> Result<Verdict<ModelCertificate>> {
    if nn.n_x() != plant.n_x() || nn.n_u() != plant.n_u() || state_box.dim() != plant.n_x() {
        return dims("plant, controller and box dimensions disagree");
    }
    let ctx = SectorContext::for_controller(nn, state_box)?;
    let n = nn.assemble_n();
    let (n_x, k) = (plant.n_x(), n.n_phi());
    let eps = 1e-7;

    let mut prob = ConicProblem::new();
    let p = prob.new_symmetric(n_x);
    let lam = prob.new_diagonal(k);
    let cl = linalg::hstack(&[&(plant.a() + plant.b() * &n.pix), &(plant.b() * &n.piw)]);
    let e1 = linalg::hstack(&[&Mat::identity(n_x, n_x), &Mat::zeros(n_x, k)]);
    let r_phi = linalg::vstack(&[
        &linalg::hstack(&[&n.nux, &n.nuw]),
        &linalg::hstack(&[&Mat::zeros(k, n_x), &Mat::identity(k, k)]),
    ]);
    let mut qc = AffineMatrix::zeros(2 * k, 2 * k);
    for j in 0..k {
        let (a, b) = (ctx.alpha[j], ctx.beta[j]);
        let l = lam.get(j, j);
        qc.get_mut(j, j).add_scaled(l, -2.0 * a * b);
        qc.get_mut(j, k + j).add_scaled(l, a + b);
        qc.get_mut(k + j, j).add_scaled(l, a + b);
        qc.get_mut(k + j, k + j).add_scaled(l, -2.0);
        let mut lower = l.clone();
        lower.constant -= MIN_MULTIPLIER;
        prob.add_nonnegative(lower);
    }
    let quad = |m: &Mat, x: &AffineMatrix| AffineMatrix::left_mul(&m.transpose(), &AffineMatrix::right_mul(x, m));
    let stab = quad(&cl, &p).sub(&quad(&e1, &p)).add(&quad(&r_phi, &qc));
    prob.add_psd(stab.scale(-1.0).sub(&AffineMatrix::identity(n_x + k, eps)));
    for i in 0..state_box.h.nrows() {
        let mut m = AffineMatrix::zeros(n_x + 1, n_x + 1);
        m.get_mut(0, 0).constant = state_box.xbar[i] * state_box.xbar[i];
        for j in 0..n_x {
            m.get_mut(0, j + 1).constant = state_box.h[(i, j)];
            m.get_mut(j + 1, 0).constant = state_box.h[(i, j)];
            for c in 0..n_x {
                *m.get_mut(j + 1, c + 1) = p.get(j, c).clone();
            }
        }
        prob.add_psd(m);
    }
    for i in 0..n_x {
        prob.add_linear(p.get(i, i), 1.0);
    }

    let sol = solver.solve(&prob)?;
    if sol.status == SolveStatus::Infeasible {
        return Ok(Verdict::Infeasible { status: sol.status, detail: "model-based LMI infeasible".into() });
    }
    let pv = linalg::sym(&p.eval(&sol.x));
    let lv = lam.eval(&sol.x).diagonal();
    let m = model_stability_matrix(plant, &n, &ctx, &pv, &lv)?;
    let max_eig = linalg::max_eigenvalue(&linalg::sym(&m));
    let contained = state_constraint_lmi(&pv, state_box)?
        .iter()
        .all(|b| linalg::min_eigenvalue(b) >= -1e-9 * (1.0 + b.norm()));
    let valid = linalg::spd_inverse(&pv).is_some()
        && lv.iter().all(|&l| l >= MIN_MULTIPLIER * (1.0 - 1e-6))
        && max_eig < 0.0
        && contained;
    if valid {
        Ok(Verdict::Certified(ModelCertificate { p: pv, lambda: lv, max_eigenvalue: max_eig }))
    } else if sol.status.has_solution() {
        Ok(Verdict::Infeasible { status: sol.status, detail: format!("max eigenvalue {max_eig:.3e}") })
    } else {
        Err(solver_failure(sol.status, "model-based problem"))
    }
}

/// Ellipsoidal region of attraction `{x : xᵀ P x ≤ 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaEllipsoid {
    #[serde(with = "crate::serde_util::matrix")]
    pub p: Mat,
    pub log_det_q1: f64,
}

/// `P = Q1⁻¹` from a certificate, rejecting badly conditioned `Q1`.
pub fn roa_from_certificate(cert: &StabilityCertificate) -> Result<RoaEllipsoid> {
    let sv = linalg::singular_values(&cert.q1);
    let (hi, lo) = (sv.first().copied().unwrap_or(0.0), sv.last().copied().unwrap_or(0.0));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::IllConditionedCertificate(format!("Q1 condition number {:.3e}", hi / lo)));
    }
    let p = linalg::spd_inverse(&cert.q1)
        .ok_or_else(|| Error::IllConditionedCertificate("Q1 is not positive definite".into()))?;
    let log_det_q1 = linalg::spd_log_det(&cert.q1).unwrap_or(cert.log_det_q1);
    Ok(RoaEllipsoid { p: linalg::sym(&p), log_det_q1 })
}

impl RoaEllipsoid {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// `xᵀ P x`.
    pub fn level(&self, x: &Vector) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.level(x) <= 1.0
    }

    /// Semi-axis lengths (descending).
    pub fn semi_axes(&self) -> Vec<f64> {
        let mut ax: Vec<f64> = self.p.clone().symmetric_eigen().eigenvalues.iter().map(|l| 1.0 / l.sqrt()).collect();
        ax.sort_by(|a, b| b.total_cmp(a));
        ax
    }

    /// Boundary of the slice through the origin in coordinates `(i, j)`
    /// (all other coordinates zero), sampled at `n` equally spaced angles.
    pub fn slice_boundary(&self, i: usize, j: usize, n: usize) -> Result<Vec<[f64; 2]>> {
        if i >= self.dim() || j >= self.dim() || i == j {
            return dims(format!("invalid slice coordinates ({i}, {j})"));
        }
        let (pii, pij, pjj) = (self.p[(i, i)], self.p[(i, j)], self.p[(j, j)]);
        Ok((0..n)
            .map(|s| {
                let th = 2.0 * std::f64::consts::PI * s as f64 / n as f64;
                let (c, d) = (th.cos(), th.sin());
                let r = 1.0 / (pii * c * c + 2.0 * pij * c * d + pjj * d * d).sqrt();
                [r * c, r * d]
            })
            .collect())
    }
}
