//! Minimal structured fine-tuning of an existing controller until the
//! closed loop is certified from data.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cert::{
    default_margin, identity_initialization, loop_residual_value, solve_ql_update, verify_fixed_controller,
    DdValues, QlOutcome, QlWeights, StabilityCertificate, Verdict,
};
use crate::error::{dims, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::nn::{BlockMatrixN, NnController};
use crate::plant::{ExperimentData, StateBox};
use crate::sdp::{ConicSolver, SolveStatus};
use crate::sector::{loop_transform, SectorContext, TransformLinearization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub eta2: f64,
    /// Weight of `‖N_f‖²_F` in each inner step.
    pub eta3: f64,
    pub rho: f64,
    /// Threshold on the squared outer residual.
    pub sigma: f64,
    /// Inner loop stops once `‖N_f‖²_F ≤ sigma_prime`.
    pub sigma_prime: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub margin: Option<f64>,
    /// Upper bound on the diagonal of `Q2` in the `(Q, L)` update.
    pub q2_max: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            eta2: 100.0,
            eta3: 1.0,
            rho: 1000.0,
            sigma: 0.005,
            sigma_prime: 1e-6,
            max_outer_iters: 15,
            max_inner_iters: 200,
            margin: None,
            q2_max: Some(1.0),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return bad("rho and sigma must be positive");
        }
        if matches!(self.q2_max, Some(c) if !(c > 0.0)) {
            return bad("q2_max must be positive");
        }
        if !(self.sigma_prime > 0.0) {
            return bad("sigma_prime must be positive");
        }
        if !(self.eta3 > 0.0) {
            return bad("eta3 must be positive");
        }
        if !(self.eta2 >= 0.0) {
            return bad("eta2 must be nonnegative");
        }
        if self.max_inner_iters == 0 {
            return bad("max_inner_iters must be positive");
        }
        Ok(())
    }
}

/// One outer iteration of fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub iteration: usize,
    pub inner_iters: usize,
    /// `‖N_f‖_F` of every inner step of this iteration.
    pub step_norms: Vec<f64>,
    /// Exact inner objective after each accepted step.
    pub inner_objectives: Vec<f64>,
    pub residual_sq: f64,
    pub log_det_q1: f64,
    pub y_norm: f64,
    pub sdp_status: SolveStatus,
    pub verified: Option<bool>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneResult {
    /// The fine-tuned controller `N̄`.
    pub controller: NnController,
    /// `‖N̄ − N‖_F`.
    pub total_delta: f64,
    pub certificate: StabilityCertificate,
    pub already_stable: bool,
    pub records: Vec<FinetuneRecord>,
    pub wall_time_s: f64,
}

impl FinetuneResult {
    pub fn outer_iterations(&self) -> usize {
        self.records.len()
    }

    pub fn inner_iterations(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.inner_iters).collect()
    }

    /// The block matrix of the fine-tuned controller.
    pub fn n_bar(&self) -> BlockMatrixN {
        self.controller.assemble_n()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("stability program infeasible at outer iteration {iteration} ({status:?})")]
    SdpInfeasibleAtIteration {
        iteration: usize,
        status: SolveStatus,
        controller: Box<NnController>,
        records: Vec<FinetuneRecord>,
    },
    #[error("inner loop did not settle within the iteration budget at outer iteration {iteration}")]
    InnerLoopStalled { iteration: usize, controller: Box<NnController>, records: Vec<FinetuneRecord> },
    #[error("no certified controller after {} outer iterations", records.len())]
    NotConverged { controller: Box<NnController>, records: Vec<FinetuneRecord> },
}

/// Solution of one linearized inner problem.
#[derive(Debug, Clone)]
pub struct InnerStep {
    /// Weight-shaped step (`N_f` restricted to legal entries).
    pub delta: Vec<Mat>,
    /// `‖N_f‖_F`.
    pub norm: f64,
    /// Optimal value of the linearized objective.
    pub objective: f64,
}

/// Minimize `η₃‖N̄ + N_f − N₀‖²_F + ⟨Y, f̂(N̄+N_f)Q − ŪL⟩ + (ρ/2)‖f̂(N̄+N_f)Q − ŪL‖²_F`
/// over legal `N_f`, where `N₀` is `anchor` and `f̂` is the first-order
/// expansion of the loop transformation at `N̄` with the sector `ctx` held
/// fixed. With `D = N̄ − N₀` this is the ridge regression
/// `(2η₃ I + ρ GᵀG) δ = −Gᵀ(Y + ρ R₀) − 2η₃ D`.
pub fn linearized_inner_step(
    nn: &NnController,
    anchor: &NnController,
    values: &DdValues,
    y: &Mat,
    data: &ExperimentData,
    ctx: &SectorContext,
    eta3: f64,
    rho: f64,
) -> Result<InnerStep> {
    let n = nn.assemble_n();
    let lin = TransformLinearization::new(&n, ctx)?;
    let q = values.q();
    let ul = linalg::block2(&(&data.u0 * &values.l1), &(&data.u0 * &values.l2), &values.l3, &values.l4);
    let r0 = lin.base.to_dense() * &q - ul;
    if r0.shape() != y.shape() {
        return dims("multiplier and residual shapes differ");
    }
    let p = nn.num_params();
    let zero = vec![0.0; p];
    let mut g = Mat::zeros(r0.len(), p);
    for k in 0..p {
        let mut e = zero.clone();
        e[k] = 1.0;
        let dn = nn.with_params(&e)?.assemble_n();
        let col = lin.tangent(&dn).to_dense() * &q;
        g.column_mut(k).copy_from_slice(col.as_slice());
    }
    let r0v = Vector::from_column_slice(r0.as_slice());
    let yv = Vector::from_column_slice(y.as_slice());
    if anchor.layer_sizes() != nn.layer_sizes() {
        return dims("anchor has a different architecture");
    }
    let offset = Vector::from_vec(nn.params()) - Vector::from_vec(anchor.params());
    let lhs = g.transpose() * &g * rho + Mat::identity(p, p) * (2.0 * eta3);
    let rhs = -(g.transpose() * (&yv + &r0v * rho)) - &offset * (2.0 * eta3);
    let delta = lhs
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("inner normal equations are not positive definite".into()))?
        .solve(&rhs);
    let r1 = &r0v + &g * &delta;
    let objective = eta3 * (&offset + &delta).norm_squared() + yv.dot(&r1) + 0.5 * rho * r1.norm_squared();
    let weights = nn.with_params(delta.as_slice())?.weights().to_vec();
    Ok(InnerStep { norm: delta.norm(), delta: weights, objective })
}

/// `η₃‖N̄ − N₀‖²_F + ⟨Y, Ñ(N̄)Q − ŪL⟩ + (ρ/2)‖Ñ(N̄)Q − ŪL‖²_F` with the sector
/// recomputed at `N̄`.
pub fn inner_objective(
    nn: &NnController,
    anchor: &NnController,
    values: &DdValues,
    y: &Mat,
    data: &ExperimentData,
    state_box: &StateBox,
    eta3: f64,
    rho: f64,
) -> Result<f64> {
    let ctx = SectorContext::for_controller(nn, state_box)?;
    let r = loop_residual_value(&loop_transform(&nn.assemble_n(), &ctx)?, data, values);
    let d = nn.assemble_n().sub(&anchor.assemble_n()).norm();
    Ok(eta3 * d * d + y.dot(&r) + 0.5 * rho * r.norm_squared())
}

/// Halvings of an inner step before it is treated as zero.
const MAX_BACKTRACKS: usize = 30;

/// Verify `nn`; if no certificate exists, perturb its weights by repeated
/// linearized steps inside an augmented-Lagrangian loop until it verifies.
pub fn finetune(
    nn: &NnController,
    data: &ExperimentData,
    state_box: &StateBox,
    cfg: &FinetuneConfig,
    solver: &dyn ConicSolver,
) -> std::result::Result<FinetuneResult, FinetuneError> {
    let started = Instant::now();
    cfg.validate()?;
    data.require_pe()?;
    if nn.n_x() != data.n_x() || nn.n_u() != data.n_u() || state_box.dim() != data.n_x() {
        return Err(Error::InvalidDimensions("controller, data and box dimensions disagree".into()).into());
    }
    let check = |candidate: &NnController| -> Result<Verdict<StabilityCertificate>> {
        match verify_fixed_controller(candidate, data, state_box, solver) {
            Err(Error::Solver(detail)) => Ok(Verdict::Infeasible { status: SolveStatus::NumericalError, detail }),
            other => other,
        }
    };
    if let Verdict::Certified(certificate) = check(nn)? {
        return Ok(FinetuneResult {
            controller: nn.clone(),
            total_delta: 0.0,
            certificate,
            already_stable: true,
            records: Vec::new(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let margin = cfg.margin.unwrap_or_else(|| default_margin(data));
    let ql_weights = QlWeights { rho: cfg.rho, eta2: cfg.eta2, q2_max: cfg.q2_max };
    let original = nn.assemble_n();
    let mut current = nn.clone();
    let ctx = SectorContext::for_controller(&current, state_box)?;
    let nt = loop_transform(&current.assemble_n(), &ctx)?;
    let mut values = match solve_ql_update(&nt, data, state_box, None, &ql_weights, margin, solver)? {
        QlOutcome::Solved(u) => u.values,
        QlOutcome::Failed(_) => identity_initialization(&nt, data),
    };
    let mut y = Mat::zeros(data.n_u() + nn.n_phi(), data.n_x() + nn.n_phi());
    let mut records = Vec::new();

    for iteration in 1..=cfg.max_outer_iters {
        let iter_start = Instant::now();
        let mut step_norms = Vec::new();
        let mut inner_objectives = Vec::new();
        let objective = |c: &NnController, y: &Mat, values: &DdValues| {
            inner_objective(c, nn, values, y, data, state_box, cfg.eta3, cfg.rho)
        };
        let mut value = objective(&current, &y, &values)?;
        loop {
            let ctx = SectorContext::for_controller(&current, state_box)?;
            let step = linearized_inner_step(&current, nn, &values, &y, data, &ctx, cfg.eta3, cfg.rho)?;
            // The sector moves with the weights, so the full step can overshoot;
            // halve it until the exact objective does not increase.
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let weights: Vec<Mat> = current.weights().iter().zip(&step.delta).map(|(w, d)| w + d * t).collect();
                let candidate = current.with_weights(weights)?;
                let v = objective(&candidate, &y, &values)?;
                if v <= value {
                    accepted = Some((candidate, v));
                    break;
                }
                t *= 0.5;
            }
            let taken = match accepted {
                Some((candidate, v)) => {
                    current = candidate;
                    value = v;
                    step.norm * t
                }
                None => 0.0,
            };
            step_norms.push(taken);
            inner_objectives.push(value);
            if taken * taken <= cfg.sigma_prime {
                break;
            }
            if step_norms.len() >= cfg.max_inner_iters {
                return Err(FinetuneError::InnerLoopStalled { iteration, controller: Box::new(current), records });
            }
        }

        let ctx = SectorContext::for_controller(&current, state_box)?;
        let nt = loop_transform(&current.assemble_n(), &ctx)?;
        let update = match solve_ql_update(&nt, data, state_box, Some(&y), &ql_weights, margin, solver)? {
            QlOutcome::Solved(u) => u,
            QlOutcome::Failed(status) => {
                return Err(FinetuneError::SdpInfeasibleAtIteration {
                    iteration,
                    status,
                    controller: Box::new(current),
                    records,
                });
            }
        };
        y += &update.residual * cfg.rho;
        values = update.values;
        let residual_sq = loop_residual_value(&nt, data, &values).norm_squared();
        let mut record = FinetuneRecord {
            iteration,
            inner_iters: step_norms.len(),
            step_norms,
            inner_objectives,
            residual_sq,
            log_det_q1: update.log_det_q1,
            y_norm: y.norm(),
            sdp_status: update.status,
            verified: None,
            wall_time_s: 0.0,
        };
        if residual_sq <= cfg.sigma {
            let verdict = check(&current)?;
            record.verified = Some(verdict.is_certified());
            record.wall_time_s = iter_start.elapsed().as_secs_f64();
            records.push(record);
            if let Verdict::Certified(certificate) = verdict {
                return Ok(FinetuneResult {
                    total_delta: current.assemble_n().sub(&original).norm(),
                    controller: current,
                    certificate,
                    already_stable: false,
                    records,
                    wall_time_s: started.elapsed().as_secs_f64(),
                });
            }
        } else {
            record.wall_time_s = iter_start.elapsed().as_secs_f64();
            records.push(record);
        }
    }
    Err(FinetuneError::NotConverged { controller: Box::new(current), records })
}
