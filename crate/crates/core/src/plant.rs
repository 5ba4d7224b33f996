//! Discrete-time LTI plants, experiment data collection and rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::nn::NnController;

/// Relative singular-value threshold used for the rank condition.
pub const RANK_TOL: f64 = 1e-9;

/// Ground-truth plant `x(k+1) = A x(k) + B u(k)`.
///
/// Only simulation and test oracles look at `A` and `B`; every design and
/// verification routine works from [`ExperimentData`] alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    #[serde(with = "crate::serde_util::matrix")]
    a: Mat,
    #[serde(with = "crate::serde_util::matrix")]
    b: Mat,
    /// Sampling period in seconds (metadata only).
    dt: f64,
}

impl PlantModel {
    pub fn new(a: Mat, b: Mat, dt: f64) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return dims(format!("A must be square and nonempty, got {:?}", a.shape()));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return dims(format!("B must be {}×m with m ≥ 1, got {:?}", a.nrows(), b.shape()));
        }
        Ok(Self { a, b, dt })
    }

    /// One-state, one-input plant `x⁺ = a x + b u`.
    pub fn scalar(a: f64, b: f64) -> Self {
        Self { a: Mat::from_element(1, 1, a), b: Mat::from_element(1, 1, b), dt: 1.0 }
    }

    /// Linear bicycle model of vehicle lateral dynamics around a straight
    /// lane, state `[e, ė, e_θ, ė_θ]`, input front-wheel steering angle,
    /// discretized with zero-order hold at 0.02 s.
    ///
    /// The constants are textbook mid-size sedan values (mass 1573 kg, yaw
    /// inertia 2873 kg·m², axle distances 1.1 m / 1.58 m, cornering
    /// stiffness 80 kN/rad per tyre, longitudinal speed 30 m/s). They stand
    /// in for an unpublished parameter set with the same state and input
    /// dimensions.
    pub fn vehicle_lateral() -> Self {
        let (m, iz, lf, lr, cf, cr, vx) = (1573.0, 2873.0, 1.1, 1.58, 80_000.0, 80_000.0, 30.0);
        #[rustfmt::skip]
        let a = Mat::from_row_slice(4, 4, &[
            0.0, 1.0, 0.0, 0.0,
            0.0, -(2.0 * cf + 2.0 * cr) / (m * vx), (2.0 * cf + 2.0 * cr) / m,
                (-2.0 * cf * lf + 2.0 * cr * lr) / (m * vx),
            0.0, 0.0, 0.0, 1.0,
            0.0, -(2.0 * cf * lf - 2.0 * cr * lr) / (iz * vx), (2.0 * cf * lf - 2.0 * cr * lr) / iz,
                -(2.0 * cf * lf * lf + 2.0 * cr * lr * lr) / (iz * vx),
        ]);
        let b = Mat::from_column_slice(4, 1, &[0.0, 2.0 * cf / m, 0.0, 2.0 * cf * lf / iz]);
        Self::zero_order_hold(&a, &b, 0.02)
    }

    /// Exact zero-order-hold discretization of `ẋ = A x + B u`.
    pub fn zero_order_hold(a: &Mat, b: &Mat, dt: f64) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        let mut aug = Mat::zeros(n + m, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
        aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
        let e = aug.exp();
        Self {
            a: e.view((0, 0), (n, n)).into_owned(),
            b: e.view((0, n), (n, m)).into_owned(),
            dt,
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }
}

/// Input law used while collecting experiment data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Excitation {
    Uniform { lo: f64, hi: f64 },
    Gaussian { sigma: f64 },
}

impl Default for Excitation {
    fn default() -> Self {
        Self::Uniform { lo: -1.0, hi: 1.0 }
    }
}

impl Excitation {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Self::Uniform { lo, hi } if hi > lo => rng.random_range(lo..hi),
            Self::Uniform { lo, .. } => lo,
            Self::Gaussian { sigma } if sigma > 0.0 => {
                Normal::new(0.0, sigma).map(|d| d.sample(rng)).unwrap_or(0.0)
            }
            Self::Gaussian { .. } => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Self::Gaussian { sigma } => sigma.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad excitation {self:?}")))
        }
    }
}

/// Measured input/state/successor-state matrices of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub u0: Mat,
    pub x0: Mat,
    pub x1: Mat,
    /// Seed the data was generated with, if it came from [`collect`].
    pub seed: Option<u64>,
    /// `rank [U0; X0] = n_u + n_x` at [`RANK_TOL`].
    pub pe_ok: bool,
}

impl ExperimentData {
    /// Wrap measured matrices, evaluating the rank condition.
    pub fn new(u0: Mat, x0: Mat, x1: Mat, seed: Option<u64>) -> Result<Self> {
        let t = u0.ncols();
        if x0.ncols() != t || x1.ncols() != t {
            return dims(format!(
                "U0, X0, X1 column counts differ: {}, {}, {}",
                t,
                x0.ncols(),
                x1.ncols()
            ));
        }
        if x0.nrows() != x1.nrows() || x0.nrows() == 0 || u0.nrows() == 0 || t == 0 {
            return dims("X0 and X1 must share a nonzero row count; U0 must be nonempty");
        }
        let mut data = Self { u0, x0, x1, seed, pe_ok: false };
        data.pe_ok = check_rank_condition(&data, RANK_TOL);
        Ok(data)
    }

    pub fn t(&self) -> usize {
        self.u0.ncols()
    }

    pub fn n_x(&self) -> usize {
        self.x0.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u0.nrows()
    }

    /// `[U0; X0]`.
    pub fn stacked(&self) -> Mat {
        linalg::vstack(&[&self.u0, &self.x0])
    }

    pub fn require_pe(&self) -> Result<()> {
        if self.pe_ok {
            Ok(())
        } else {
            Err(Error::NotPersistentlyExciting)
        }
    }
}

/// Box of admissible states plus the polyhedral description `|H_i x| ≤ x̄_i`
/// used by the ellipsoid-containment constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    #[serde(with = "crate::serde_util::vector")]
    pub lower: Vector,
    #[serde(with = "crate::serde_util::vector")]
    pub upper: Vector,
    #[serde(with = "crate::serde_util::matrix")]
    pub h: Mat,
    #[serde(with = "crate::serde_util::vector")]
    pub xbar: Vector,
}

impl StateBox {
    /// Box with `H = I` and `x̄_i = min(|lower_i|, upper_i)`.
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        let n = lower.len();
        let xbar = Vector::from_fn(n, |i, _| lower[i].abs().min(upper.get(i).copied().unwrap_or(0.0)));
        Self::with_constraints(lower, upper, Mat::identity(n, n), xbar)
    }

    /// Symmetric box `[-r, r]`.
    pub fn symmetric(radii: &[f64]) -> Result<Self> {
        let r = Vector::from_column_slice(radii);
        Self::new(-r.clone(), r)
    }

    pub fn with_constraints(lower: Vector, upper: Vector, h: Mat, xbar: Vector) -> Result<Self> {
        let n = lower.len();
        if n == 0 || upper.len() != n {
            return Err(Error::InvalidBox("lower/upper lengths differ or are zero".into()));
        }
        if (0..n).any(|i| !(lower[i] < 0.0 && 0.0 < upper[i])) {
            return Err(Error::InvalidBox("origin must be interior: need lower < 0 < upper".into()));
        }
        if h.ncols() != n || h.nrows() != xbar.len() || xbar.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidBox("H must be r×n_x and x̄ positive with r entries".into()));
        }
        Ok(Self { lower, upper, h, xbar })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &Vector) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vector {
        Vector::from_fn(self.dim(), |i, _| rng.random_range(self.lower[i]..=self.upper[i]))
    }
}

/// Smallest experiment length compatible with the rank condition.
pub fn min_experiment_length(n_x: usize, n_u: usize) -> usize {
    (n_u + 1) * n_x + n_u
}

fn check_plant_dims(plant: &PlantModel, x0: &Vector) -> Result<()> {
    if x0.len() != plant.n_x() {
        return dims(format!("initial state has length {}, plant has n_x = {}", x0.len(), plant.n_x()));
    }
    Ok(())
}

/// Open-loop rollout: returns `inputs.len() + 1` states starting at `x0`.
pub fn simulate_open_loop(plant: &PlantModel, x0: &Vector, inputs: &[Vector]) -> Result<Vec<Vector>> {
    check_plant_dims(plant, x0)?;
    if inputs.is_empty() {
        return dims("need at least one input");
    }
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(x0.clone());
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != plant.n_u() {
            return dims(format!("input {k} has length {}, plant has n_u = {}", u.len(), plant.n_u()));
        }
        let next = plant.step(&traj[k], u);
        traj.push(next);
    }
    Ok(traj)
}

/// Run one experiment of length `t` from an initial state drawn uniformly in
/// `initial`, with i.i.d. inputs from `excitation`.
pub fn collect(
    plant: &PlantModel,
    t: usize,
    excitation: Excitation,
    initial: &StateBox,
    seed: u64,
) -> Result<ExperimentData> {
    let (n_x, n_u) = (plant.n_x(), plant.n_u());
    let min = min_experiment_length(n_x, n_u);
    if t < min {
        return Err(Error::DataTooShort { t, min });
    }
    if initial.dim() != n_x {
        return dims(format!("state box has dimension {}, plant has n_x = {n_x}", initial.dim()));
    }
    excitation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = initial.sample(&mut rng);
    let inputs: Vec<Vector> = (0..t)
        .map(|_| Vector::from_fn(n_u, |_, _| excitation.sample(&mut rng)))
        .collect();
    let traj = simulate_open_loop(plant, &x_init, &inputs)?;
    let u0 = Mat::from_fn(n_u, t, |i, j| inputs[j][i]);
    let x0 = Mat::from_fn(n_x, t, |i, j| traj[j][i]);
    let x1 = Mat::from_fn(n_x, t, |i, j| traj[j + 1][i]);
    ExperimentData::new(u0, x0, x1, Some(seed))
}

/// True iff `[U0; X0]` has numerical rank `n_u + n_x` (singular values above
/// `tol` times the largest).
pub fn check_rank_condition(data: &ExperimentData, tol: f64) -> bool {
    linalg::numerical_rank(&data.stacked(), tol) == data.n_u() + data.n_x()
}

/// Closed-loop rollout with the per-step control inputs and state norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub norms: Vec<f64>,
}

pub fn simulate_closed_loop(
    plant: &PlantModel,
    controller: &NnController,
    x0: &Vector,
    steps: usize,
) -> Result<ClosedLoopTrajectory> {
    check_plant_dims(plant, x0)?;
    if controller.n_x() != plant.n_x() || controller.n_u() != plant.n_u() {
        return dims(format!(
            "controller maps {} → {}, plant needs {} → {}",
            controller.n_x(),
            controller.n_u(),
            plant.n_x(),
            plant.n_u()
        ));
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut norms = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    norms.push(x0.norm());
    for k in 0..steps {
        let u = controller.control(&states[k])?;
        let next = plant.step(&states[k], &u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k + 1 });
        }
        norms.push(next.norm());
        inputs.push(u);
        states.push(next);
    }
    Ok(ClosedLoopTrajectory { states, inputs, norms })
}
