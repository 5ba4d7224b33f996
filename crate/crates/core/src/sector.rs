//! Pre-activation bounds, local tanh sectors, and the loop transformation
//! that normalizes every sector to `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::nn::{BlockMatrixN, NnController};
use crate::plant::StateBox;

/// Pre-activation intervals and the sector slopes valid on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorContext {
    #[serde(with = "crate::serde_util::vector")]
    pub nu_lo: Vector,
    #[serde(with = "crate::serde_util::vector")]
    pub nu_hi: Vector,
    #[serde(with = "crate::serde_util::vector")]
    pub alpha: Vector,
    #[serde(with = "crate::serde_util::vector")]
    pub beta: Vector,
}

impl SectorContext {
    /// Tanh sectors for the given intervals.
    pub fn tanh(nu_lo: Vector, nu_hi: Vector) -> Result<Self> {
        if nu_lo.len() != nu_hi.len() {
            return dims("interval bound vectors differ in length");
        }
        let n = nu_lo.len();
        let mut alpha = Vector::zeros(n);
        let mut beta = Vector::zeros(n);
        for j in 0..n {
            let (a, b) = tanh_sector(nu_lo[j], nu_hi[j])?;
            alpha[j] = a;
            beta[j] = b;
        }
        Ok(Self { nu_lo, nu_hi, alpha, beta })
    }

    /// Sound sectors for `nn` on every state of `state_box`.
    pub fn for_controller(nn: &NnController, state_box: &StateBox) -> Result<Self> {
        let (lo, hi) = preactivation_bounds(nn, state_box)?;
        Self::tanh(lo, hi)
    }

    /// Arbitrary slopes `alpha ≤ beta`; the intervals are left unbounded.
    pub fn with_slopes(alpha: Vector, beta: Vector) -> Result<Self> {
        if alpha.len() != beta.len() {
            return dims("slope vectors differ in length");
        }
        if alpha.iter().zip(beta.iter()).any(|(a, b)| a > b) {
            return Err(Error::DomainError("sector needs alpha ≤ beta".into()));
        }
        let n = alpha.len();
        Ok(Self {
            nu_lo: Vector::from_element(n, f64::NEG_INFINITY),
            nu_hi: Vector::from_element(n, f64::INFINITY),
            alpha,
            beta,
        })
    }

    pub fn n_phi(&self) -> usize {
        self.alpha.len()
    }

    pub fn a_phi(&self) -> Mat {
        Mat::from_diagonal(&self.alpha)
    }

    pub fn b_phi(&self) -> Mat {
        Mat::from_diagonal(&self.beta)
    }

    /// Diagonal of `(B_φ − A_φ)/2`.
    pub fn half_width(&self) -> Vector {
        (&self.beta - &self.alpha) * 0.5
    }

    /// Diagonal of `(A_φ + B_φ)/2`.
    pub fn midpoint(&self) -> Vector {
        (&self.alpha + &self.beta) * 0.5
    }

    /// Normalized nonlinearity output `z = ((B−A)/2)⁻¹ (ω − ((A+B)/2) ν)`,
    /// taking `z_j = 0` on zero-width sectors where `ω_j = ν_j`.
    pub fn normalized_output(&self, nu: &Vector, omega: &Vector) -> Vector {
        let d = self.half_width();
        let s = self.midpoint();
        Vector::from_fn(nu.len(), |j, _| {
            if d[j] > 0.0 {
                (omega[j] - s[j] * nu[j]) / d[j]
            } else {
                0.0
            }
        })
    }
}

/// Secant slope `tanh(v)/v`, with its limit 1 at the origin.
fn tanh_secant(v: f64) -> f64 {
    let a = v.abs();
    if a < 1e-8 {
        1.0
    } else {
        a.tanh() / a
    }
}

/// Local sector `[α, 1]` of tanh on `[lo, hi] ∋ 0`: α is the smaller of the
/// two endpoint secant slopes.
pub fn tanh_sector(lo: f64, hi: f64) -> Result<(f64, f64)> {
    if !(lo <= 0.0 && 0.0 <= hi) {
        return Err(Error::InvalidInterval { lo, hi });
    }
    Ok((tanh_secant(lo).min(tanh_secant(hi)), 1.0))
}

/// Interval bound propagation of `ν_φ` through the network over the box.
pub fn preactivation_bounds(nn: &NnController, state_box: &StateBox) -> Result<(Vector, Vector)> {
    if state_box.dim() != nn.n_x() {
        return dims(format!("box has dimension {}, controller expects {}", state_box.dim(), nn.n_x()));
    }
    let n_phi = nn.n_phi();
    let mut nu_lo = Vector::zeros(n_phi);
    let mut nu_hi = Vector::zeros(n_phi);
    let mut lo = state_box.lower.clone();
    let mut hi = state_box.upper.clone();
    let offsets = nn.hidden_offsets();
    for (i, w) in nn.weights()[..nn.hidden_sizes().len()].iter().enumerate() {
        let mut next_lo = Vector::zeros(w.nrows());
        let mut next_hi = Vector::zeros(w.nrows());
        for r in 0..w.nrows() {
            let (mut a, mut b) = (0.0, 0.0);
            for c in 0..w.ncols() {
                let (p, q) = (w[(r, c)] * lo[c], w[(r, c)] * hi[c]);
                a += p.min(q);
                b += p.max(q);
            }
            next_lo[r] = a;
            next_hi[r] = b;
        }
        nu_lo.rows_mut(offsets[i], w.nrows()).copy_from(&next_lo);
        nu_hi.rows_mut(offsets[i], w.nrows()).copy_from(&next_hi);
        lo = next_lo.map(f64::tanh);
        hi = next_hi.map(f64::tanh);
    }
    Ok((nu_lo, nu_hi))
}

/// The `2n_φ × 2n_φ` quadratic-constraint matrix
/// `[[−2AΛB, (A+B)Λ], [(A+B)Λ, −2Λ]]` in the variables `(ν_φ, ω_φ)`.
pub fn stacked_sector_qc(ctx: &SectorContext, lambda: &Vector) -> Result<Mat> {
    let n = ctx.n_phi();
    if lambda.len() != n {
        return dims(format!("λ has length {}, expected {n}", lambda.len()));
    }
    if let Some(index) = lambda.iter().position(|&l| l < 0.0) {
        return Err(Error::InvalidMultiplier { index, value: lambda[index] });
    }
    let mut m = Mat::zeros(2 * n, 2 * n);
    for j in 0..n {
        let (a, b, l) = (ctx.alpha[j], ctx.beta[j], lambda[j]);
        m[(j, j)] = -2.0 * a * b * l;
        m[(j, n + j)] = (a + b) * l;
        m[(n + j, j)] = (a + b) * l;
        m[(n + j, n + j)] = -2.0 * l;
    }
    Ok(m)
}

/// Blocks of the loop-transformed matrix `Ñ`, with
/// `[π; ν_φ] = Ñ [x; z_φ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedN {
    #[serde(with = "crate::serde_util::matrix")]
    pub pix: Mat,
    #[serde(with = "crate::serde_util::matrix")]
    pub piz: Mat,
    #[serde(with = "crate::serde_util::matrix")]
    pub nux: Mat,
    #[serde(with = "crate::serde_util::matrix")]
    pub nuz: Mat,
}

impl TransformedN {
    pub fn to_dense(&self) -> Mat {
        linalg::block2(&self.pix, &self.piz, &self.nux, &self.nuz)
    }

    pub fn from_dense(m: &Mat, n_u: usize, n_x: usize) -> Result<Self> {
        let b = BlockMatrixN::from_dense(m, n_u, n_x)?;
        Ok(Self { pix: b.pix, piz: b.piw, nux: b.nux, nuz: b.nuw })
    }

    pub fn n_u(&self) -> usize {
        self.pix.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.pix.ncols()
    }

    pub fn n_phi(&self) -> usize {
        self.nuz.nrows()
    }
}

/// `C₁ … C₄` and `(I − C₄)⁻¹` for a given `N` and sector.
struct TransformParts {
    c1: Mat,
    c2: Mat,
    c3: Mat,
    inv: Mat,
}

fn transform_parts(n: &BlockMatrixN, ctx: &SectorContext) -> Result<TransformParts> {
    if ctx.n_phi() != n.n_phi() {
        return dims(format!("sector has {} neurons, N has {}", ctx.n_phi(), n.n_phi()));
    }
    let d = Mat::from_diagonal(&ctx.half_width());
    let s = Mat::from_diagonal(&ctx.midpoint());
    let c1 = &n.piw * &d;
    let c2 = &n.piw * &s;
    let c3 = &n.nuw * &d;
    let c4 = &n.nuw * &s;
    let k = n.n_phi();
    let inv = (Mat::identity(k, k) - c4)
        .lu()
        .try_inverse()
        .ok_or(Error::SingularTransform)?;
    if !linalg::all_finite(&inv) {
        return Err(Error::SingularTransform);
    }
    Ok(TransformParts { c1, c2, c3, inv })
}

/// Loop transformation `N ↦ Ñ` for the sector in `ctx`.
pub fn loop_transform(n: &BlockMatrixN, ctx: &SectorContext) -> Result<TransformedN> {
    let TransformParts { c1, c2, c3, inv } = transform_parts(n, ctx)?;
    let nux = &inv * &n.nux;
    let nuz = &inv * &c3;
    Ok(TransformedN {
        pix: &n.pix + &c2 * &nux,
        piz: &c1 + &c2 * &nuz,
        nux,
        nuz,
    })
}

/// First-order expansion of the loop transformation around a fixed `N`
/// with the sector held constant.
#[derive(Debug, Clone)]
pub struct TransformLinearization {
    pub base: TransformedN,
    n: BlockMatrixN,
    /// `(I − C₄)⁻¹`.
    inv: Mat,
    s: Mat,
    /// `D + S Ñ_νz`.
    dz: Mat,
}

impl TransformLinearization {
    pub fn new(n: &BlockMatrixN, ctx: &SectorContext) -> Result<Self> {
        let parts = transform_parts(n, ctx)?;
        let base = loop_transform(n, ctx)?;
        let d = Mat::from_diagonal(&ctx.half_width());
        let s = Mat::from_diagonal(&ctx.midpoint());
        let dz = &d + &s * &base.nuz;
        Ok(Self { base, n: n.clone(), inv: parts.inv, s, dz })
    }

    /// Directional derivative `dÑ` along `dn`.
    pub fn tangent(&self, dn: &BlockMatrixN) -> TransformedN {
        let sx = &self.s * &self.base.nux;
        let nux = &self.inv * (&dn.nux + &dn.nuw * &sx);
        let nuz = &self.inv * &dn.nuw * &self.dz;
        let ps = &self.n.piw * &self.s;
        TransformedN {
            pix: &dn.pix + &dn.piw * &sx + &ps * &nux,
            piz: &dn.piw * &self.dz + &ps * &nuz,
            nux,
            nuz,
        }
    }

    /// Adjoint of [`tangent`](Self::tangent): pulls a gradient with respect
    /// to `Ñ` back to a gradient with respect to `N`.
    pub fn adjoint(&self, g: &TransformedN) -> BlockMatrixN {
        let sx_t = (&self.s * &self.base.nux).transpose();
        let dz_t = self.dz.transpose();
        let ps_t = (&self.n.piw * &self.s).transpose();
        let gnux = &g.nux + &ps_t * &g.pix;
        let gnuz = &g.nuz + &ps_t * &g.piz;
        let inv_t = self.inv.transpose();
        let a = &inv_t * &gnux;
        let b = &inv_t * &gnuz;
        BlockMatrixN {
            pix: g.pix.clone(),
            piw: &g.pix * &sx_t + &g.piz * &dz_t,
            nux: a.clone(),
            nuw: &a * &sx_t + &b * &dz_t,
        }
    }
}
