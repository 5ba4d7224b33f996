//! Controller synthesis by augmented-Lagrangian alternation between
//! imitation training of the network and the `(Q, L)` stability program.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cert::{
    default_margin, identity_initialization, loop_residual_value, solve_ql_update, verify_fixed_controller,
    DdValues, QlOutcome, QlWeights, StabilityCertificate, Verdict,
};
use crate::error::{dims, Error, Result};
use crate::expert::{Demonstrations, ExpertSpec};
use crate::linalg::{self, Mat};
use crate::nn::{gradient, Adam, ImitationLoss, NnController, Objective};
use crate::plant::{ExperimentData, StateBox};
use crate::sdp::{ConicSolver, SolveStatus};
use crate::sector::{loop_transform, SectorContext, TransformLinearization, TransformedN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Weight of the imitation loss.
    pub eta1: f64,
    /// Weight of `−log det Q1`.
    pub eta2: f64,
    pub rho: f64,
    /// Threshold on the squared Frobenius norm of `f(N) Q − Ū L`.
    pub sigma: f64,
    pub max_outer_iters: usize,
    /// Full-batch Adam steps per outer iteration.
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub expert: ExpertSpec,
    pub demo_count: usize,
    /// Strictness margin of the block LMI; defaults to `1e-6 (1 + ‖X1‖_F)`.
    pub margin: Option<f64>,
    /// Upper bound on the diagonal of `Q2` in the `(Q, L)` update.
    pub q2_max: Option<f64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            eta1: 100.0,
            eta2: 100.0,
            rho: 1000.0,
            sigma: 0.005,
            max_outer_iters: 20,
            inner_epochs: 200,
            learning_rate: 1e-3,
            seed: 0,
            expert: ExpertSpec::default(),
            demo_count: 500,
            margin: None,
            q2_max: Some(1.0),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return bad("eta1 and eta2 must be nonnegative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.demo_count == 0 {
            return bad("demo_count must be positive");
        }
        if matches!(self.margin, Some(m) if !(m > 0.0)) {
            return bad("margin must be positive");
        }
        if matches!(self.q2_max, Some(c) if !(c > 0.0)) {
            return bad("q2_max must be positive");
        }
        Ok(())
    }
}

/// One outer iteration of the alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub prediction_loss: f64,
    pub log_det_q1: f64,
    pub residual_norm: f64,
    /// The quantity compared with `sigma`.
    pub residual_sq: f64,
    pub y_norm: f64,
    pub sdp_status: SolveStatus,
    /// Outcome of the fixed-controller check, when it was run.
    pub verified: Option<bool>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTrace {
    pub records: Vec<IterationRecord>,
}

impl SynthesisTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// Successful synthesis: a verified controller.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub controller: NnController,
    pub certificate: StabilityCertificate,
    pub trace: SynthesisTrace,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("stability program infeasible at outer iteration {iteration} ({status:?})")]
    SdpInfeasibleAtIteration {
        iteration: usize,
        status: SolveStatus,
        controller: Box<NnController>,
        trace: SynthesisTrace,
    },
    #[error("no verified controller after {} outer iterations", trace.records.len())]
    NotConverged { controller: Box<NnController>, trace: SynthesisTrace },
}

/// `⟨Y, f(N)Q − ŪL⟩ + (ρ/2)‖f(N)Q − ŪL‖²_F` as a function of the weights,
/// with `Q`, `Ū L`, `Y` and the sector held fixed.
pub struct LagrangianPenalty<'a> {
    pub ctx: &'a SectorContext,
    pub q: Mat,
    pub ul: Mat,
    pub y: &'a Mat,
    pub rho: f64,
}

impl<'a> LagrangianPenalty<'a> {
    pub fn new(ctx: &'a SectorContext, values: &DdValues, data: &ExperimentData, y: &'a Mat, rho: f64) -> Self {
        let ul = linalg::block2(&(&data.u0 * &values.l1), &(&data.u0 * &values.l2), &values.l3, &values.l4);
        Self { ctx, q: values.q(), ul, y, rho }
    }
}

impl Objective for LagrangianPenalty<'_> {
    fn value_and_gradient(&self, nn: &NnController) -> Result<(f64, Vec<Mat>)> {
        let lin = TransformLinearization::new(&nn.assemble_n(), self.ctx)?;
        let r = lin.base.to_dense() * &self.q - &self.ul;
        if r.shape() != self.y.shape() {
            return dims("multiplier and residual shapes differ");
        }
        let value = self.y.dot(&r) + 0.5 * self.rho * r.norm_squared();
        let g = (self.y + &r * self.rho) * self.q.transpose();
        let g_nt = TransformedN::from_dense(&g, nn.n_u(), nn.n_x())?;
        Ok((value, nn.weight_gradient_from_n(&lin.adjoint(&g_nt))))
    }
}

/// `η₁ℒ − η₂ log det Q1 + ⟨Y, R⟩ + (ρ/2)‖R‖²_F` with `R = Ñ Q − Ū L`.
pub fn augmented_lagrangian_value(
    prediction_loss: f64,
    nt: &TransformedN,
    values: &DdValues,
    y: &Mat,
    data: &ExperimentData,
    cfg: &SynthesisConfig,
) -> Result<f64> {
    let log_det = linalg::spd_log_det(&values.q1)
        .ok_or_else(|| Error::DomainError("Q1 is not positive definite".into()))?;
    let r = loop_residual_value(nt, data, values);
    if r.shape() != y.shape() {
        return dims("multiplier and residual shapes differ");
    }
    Ok(cfg.eta1 * prediction_loss - cfg.eta2 * log_det + y.dot(&r) + 0.5 * cfg.rho * r.norm_squared())
}

/// Run the alternation from a seeded initial network.
///
/// Each outer iteration trains the weights for `inner_epochs` Adam steps on
/// `η₁ℒ + ⟨Y, R⟩ + (ρ/2)‖R‖²` (sector frozen at the iteration's start),
/// re-solves the `(Q, L)` program, and updates `Y ← Y + ρR`. Once
/// `‖R‖²_F ≤ σ` the network is checked with [`verify_fixed_controller`];
/// iteration continues while that check fails.
pub fn synthesize(
    data: &ExperimentData,
    state_box: &StateBox,
    layer_sizes: &[usize],
    demos: &Demonstrations,
    cfg: &SynthesisConfig,
    solver: &dyn ConicSolver,
) -> std::result::Result<SynthesisResult, SynthesisError> {
    cfg.validate()?;
    data.require_pe()?;
    if layer_sizes.first() != Some(&data.n_x()) || layer_sizes.last() != Some(&data.n_u()) {
        return Err(Error::InvalidDimensions(format!(
            "architecture {layer_sizes:?} must map {} states to {} inputs",
            data.n_x(),
            data.n_u()
        ))
        .into());
    }
    if state_box.dim() != data.n_x() {
        return Err(Error::InvalidDimensions("state box dimension differs from the data".into()).into());
    }
    let loss = ImitationLoss::new(demos.states.clone(), demos.actions.clone())?;
    let margin = cfg.margin.unwrap_or_else(|| default_margin(data));
    let ql_weights = QlWeights { rho: cfg.rho, eta2: cfg.eta2, q2_max: cfg.q2_max };
    let mut nn = NnController::init(layer_sizes, cfg.seed)?;

    let ctx = SectorContext::for_controller(&nn, state_box)?;
    let nt = loop_transform(&nn.assemble_n(), &ctx)?;
    let mut values = match solve_ql_update(&nt, data, state_box, None, &ql_weights, margin, solver)? {
        QlOutcome::Solved(u) => u.values,
        QlOutcome::Failed(_) => identity_initialization(&nt, data),
    };
    let mut y = Mat::zeros(data.n_u() + nn.n_phi(), data.n_x() + nn.n_phi());
    let mut trace = SynthesisTrace::default();
    let mut best: Option<(f64, NnController)> = None;

    for iteration in 1..=cfg.max_outer_iters {
        let started = Instant::now();
        let ctx = SectorContext::for_controller(&nn, state_box)?;
        {
            let mut adam = Adam::new(cfg.learning_rate);
            let penalty = LagrangianPenalty::new(&ctx, &values, data, &y, cfg.rho);
            for _ in 0..cfg.inner_epochs {
                let (_, gl) = loss.value_and_gradient(&nn)?;
                let gp = gradient(&nn, &penalty)?;
                let grads: Vec<Mat> = gl.iter().zip(&gp).map(|(a, b)| a * cfg.eta1 + b).collect();
                if grads.iter().any(|g| !linalg::all_finite(g)) {
                    return Err(Error::NumericalFailure("non-finite training gradient".into()).into());
                }
                let mut weights = nn.weights().to_vec();
                adam.step(&mut weights, &grads);
                nn = nn.with_weights(weights)?;
            }
        }

        let ctx = SectorContext::for_controller(&nn, state_box)?;
        let nt = loop_transform(&nn.assemble_n(), &ctx)?;
        let update = match solve_ql_update(&nt, data, state_box, Some(&y), &ql_weights, margin, solver)? {
            QlOutcome::Solved(u) => u,
            QlOutcome::Failed(status) => {
                return Err(SynthesisError::SdpInfeasibleAtIteration {
                    iteration,
                    status,
                    controller: Box::new(nn),
                    trace,
                });
            }
        };
        y += &update.residual * cfg.rho;
        values = update.values;
        let residual_sq = update.residual.norm_squared();
        let mut record = IterationRecord {
            iteration,
            prediction_loss: loss.value(&nn)?,
            log_det_q1: update.log_det_q1,
            residual_norm: residual_sq.sqrt(),
            residual_sq,
            y_norm: y.norm(),
            sdp_status: update.status,
            verified: None,
            wall_time_s: 0.0,
        };
        if best.as_ref().is_none_or(|(r, _)| residual_sq < *r) {
            best = Some((residual_sq, nn.clone()));
        }
        if residual_sq <= cfg.sigma {
            let verdict = match verify_fixed_controller(&nn, data, state_box, solver) {
                Ok(v) => v,
                Err(Error::Solver(_)) => Verdict::Infeasible { status: SolveStatus::NumericalError, detail: String::new() },
                Err(e) => return Err(e.into()),
            };
            record.verified = Some(verdict.is_certified());
            record.wall_time_s = started.elapsed().as_secs_f64();
            trace.records.push(record);
            if let Verdict::Certified(certificate) = verdict {
                return Ok(SynthesisResult { controller: nn, certificate, trace });
            }
        } else {
            record.wall_time_s = started.elapsed().as_secs_f64();
            trace.records.push(record);
        }
    }
    let controller = best.map_or(nn, |(_, c)| c);
    Err(SynthesisError::NotConverged { controller: Box::new(controller), trace })
}
