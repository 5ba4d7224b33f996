//! Linear expert laws and the demonstration sets used for imitation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::linalg::{self, Mat};
use crate::plant::{PlantModel, StateBox};

/// Expert law `u = −K x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertSpec {
    /// Discrete-time LQR with diagonal weights; empty vectors mean identity.
    Lqr {
        #[serde(default)]
        q_diag: Vec<f64>,
        #[serde(default)]
        r_diag: Vec<f64>,
    },
    /// User-supplied gain, rows of `K` (`n_u × n_x`).
    Gain { k: Vec<Vec<f64>> },
}

impl Default for ExpertSpec {
    fn default() -> Self {
        Self::Lqr { q_diag: Vec::new(), r_diag: Vec::new() }
    }
}

fn weight_matrix(diag: &[f64], n: usize, name: &str) -> Result<Mat> {
    if diag.is_empty() {
        return Ok(Mat::identity(n, n));
    }
    if diag.len() != n {
        return dims(format!("{name} has {} entries, expected {n}", diag.len()));
    }
    if diag.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::InvalidConfig(format!("{name} entries must be positive")));
    }
    Ok(Mat::from_diagonal(&crate::linalg::Vector::from_column_slice(diag)))
}

impl ExpertSpec {
    /// Feedback gain `K` with `u = −K x`.
    pub fn gain(&self, plant: &PlantModel) -> Result<Mat> {
        match self {
            Self::Lqr { q_diag, r_diag } => {
                let q = weight_matrix(q_diag, plant.n_x(), "q_diag")?;
                let r = weight_matrix(r_diag, plant.n_u(), "r_diag")?;
                lqr_gain(plant.a(), plant.b(), &q, &r)
            }
            Self::Gain { k } => {
                let m = linalg::from_rows(k, plant.n_x()).ok_or_else(|| {
                    Error::InvalidDimensions(format!("gain rows must have {} entries", plant.n_x()))
                })?;
                if m.nrows() != plant.n_u() {
                    return dims(format!("gain has {} rows, expected {}", m.nrows(), plant.n_u()));
                }
                Ok(m)
            }
        }
    }
}

/// Stabilizing solution of the discrete algebraic Riccati equation
/// `P = Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, by the structure-preserving
/// doubling iteration.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return dims("inconsistent Riccati dimensions");
    }
    let r_inv = linalg::spd_inverse(r).ok_or_else(|| Error::ExpertSynthesisFailed("R is not positive definite".into()))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = Mat::identity(n, n);
    for _ in 0..200 {
        let w = (&eye + &gk * &hk)
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::ExpertSynthesisFailed("singular doubling step".into()))?;
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let change = (&h_next - &hk).norm();
        ak = a_next;
        gk = linalg::sym(&g_next);
        hk = linalg::sym(&h_next);
        if !linalg::all_finite(&hk) {
            break;
        }
        if change <= 1e-13 * (1.0 + hk.norm()) {
            return Ok(hk);
        }
    }
    Err(Error::ExpertSynthesisFailed("Riccati iteration did not converge; (A, B) may not be stabilizable".into()))
}

/// LQR gain `K = (R + BᵀPB)⁻¹ BᵀPA`; fails unless `A − BK` is Schur stable.
pub fn lqr_gain(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let p = solve_dare(a, b, q, r)?;
    let btp = b.transpose() * &p;
    let k = (r + &btp * b)
        .lu()
        .solve(&(&btp * a))
        .ok_or_else(|| Error::ExpertSynthesisFailed("singular gain equation".into()))?;
    if linalg::spectral_radius(&(a - b * &k)) >= 1.0 {
        return Err(Error::ExpertSynthesisFailed("LQR closed loop is not stable".into()));
    }
    Ok(k)
}

/// States (columns, `n_x × M`) and expert actions (`n_u × M`).
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstrations {
    pub states: Mat,
    pub actions: Mat,
}

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sample `count` states uniformly in the box and label them with `u = −K x`.
pub fn generate_expert_demos(
    plant: &PlantModel,
    state_box: &StateBox,
    spec: &ExpertSpec,
    count: usize,
    seed: u64,
) -> Result<Demonstrations> {
    if state_box.dim() != plant.n_x() {
        return dims("state box dimension differs from the plant");
    }
    if count == 0 {
        return Err(Error::InvalidConfig("demonstration count must be positive".into()));
    }
    let k = spec.gain(plant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Mat::zeros(plant.n_x(), count);
    for j in 0..count {
        states.set_column(j, &state_box.sample(&mut rng));
    }
    let actions = -(&k * &states);
    Ok(Demonstrations { states, actions })
}
