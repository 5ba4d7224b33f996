//! Bias-free feed-forward tanh controllers, the block matrix `N` that
//! isolates their nonlinearities, and gradients of training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Tolerance for entries outside the feed-forward pattern of `N`.
pub const STRUCTURE_TOL: f64 = 1e-12;

/// Feed-forward network `π(x) = W^{l+1} tanh(W^l ⋯ tanh(W¹ x))`.
///
/// Biases are not represented, so `π(0) = 0` holds structurally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ControllerFile", into = "ControllerFile")]
pub struct NnController {
    layer_sizes: Vec<usize>,
    weights: Vec<Mat>,
}

/// On-disk JSON layout of a controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ControllerFile {
    layer_sizes: Vec<usize>,
    activation: String,
    /// One row-major nested array per layer.
    weights: Vec<Vec<Vec<f64>>>,
}

impl From<NnController> for ControllerFile {
    fn from(nn: NnController) -> Self {
        Self {
            weights: nn.weights.iter().map(linalg::to_rows).collect(),
            layer_sizes: nn.layer_sizes,
            activation: "tanh".into(),
        }
    }
}

impl TryFrom<ControllerFile> for NnController {
    type Error = Error;

    fn try_from(f: ControllerFile) -> Result<Self> {
        if f.activation != "tanh" {
            return Err(Error::InvalidConfig(format!("unsupported activation {:?}", f.activation)));
        }
        if f.weights.len() + 1 != f.layer_sizes.len() {
            return dims("weights must have one entry per layer transition");
        }
        let weights = f
            .weights
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                linalg::from_rows(rows, f.layer_sizes[i])
                    .ok_or_else(|| Error::InvalidDimensions(format!("layer {} has ragged rows", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        NnController::new(f.layer_sizes, weights)
    }
}

/// Output of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub u: Vector,
    /// Stacked pre-activations `ν_φ`.
    pub nu: Vector,
    /// Stacked post-activations `ω_φ = tanh(ν_φ)`.
    pub omega: Vector,
}

/// The matrix `N` with `[π; ν_φ] = N [x; ω_φ]`, kept in its four blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrixN {
    pub pix: Mat,
    pub piw: Mat,
    pub nux: Mat,
    pub nuw: Mat,
}

impl BlockMatrixN {
    pub fn zeros(n_u: usize, n_x: usize, n_phi: usize) -> Self {
        Self {
            pix: Mat::zeros(n_u, n_x),
            piw: Mat::zeros(n_u, n_phi),
            nux: Mat::zeros(n_phi, n_x),
            nuw: Mat::zeros(n_phi, n_phi),
        }
    }

    pub fn n_u(&self) -> usize {
        self.pix.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.pix.ncols()
    }

    pub fn n_phi(&self) -> usize {
        self.nuw.nrows()
    }

    pub fn to_dense(&self) -> Mat {
        linalg::block2(&self.pix, &self.piw, &self.nux, &self.nuw)
    }

    pub fn from_dense(m: &Mat, n_u: usize, n_x: usize) -> Result<Self> {
        if m.nrows() < n_u || m.ncols() < n_x || m.nrows() - n_u != m.ncols() - n_x {
            return dims(format!("N has shape {:?}, incompatible with n_u={n_u}, n_x={n_x}", m.shape()));
        }
        let n_phi = m.nrows() - n_u;
        Ok(Self {
            pix: m.view((0, 0), (n_u, n_x)).into_owned(),
            piw: m.view((0, n_x), (n_u, n_phi)).into_owned(),
            nux: m.view((n_u, 0), (n_phi, n_x)).into_owned(),
            nuw: m.view((n_u, n_x), (n_phi, n_phi)).into_owned(),
        })
    }

    pub fn norm(&self) -> f64 {
        (self.pix.norm_squared() + self.piw.norm_squared() + self.nux.norm_squared() + self.nuw.norm_squared())
            .sqrt()
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            pix: &self.pix + &other.pix,
            piw: &self.piw + &other.piw,
            nux: &self.nux + &other.nux,
            nuw: &self.nuw + &other.nuw,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { pix: &self.pix * s, piw: &self.piw * s, nux: &self.nux * s, nuw: &self.nuw * s }
    }
}

impl NnController {
    /// `layer_sizes = [n_x, n_1, …, n_l, n_π]` with at least one hidden layer;
    /// `weights[i]` maps layer `i` to layer `i + 1`.
    pub fn new(layer_sizes: Vec<usize>, weights: Vec<Mat>) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        if weights.len() + 1 != layer_sizes.len() {
            return dims(format!(
                "{} layer sizes need {} weight matrices, got {}",
                layer_sizes.len(),
                layer_sizes.len() - 1,
                weights.len()
            ));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != (layer_sizes[i + 1], layer_sizes[i]) {
                return dims(format!(
                    "W{} has shape {:?}, expected {:?}",
                    i + 1,
                    w.shape(),
                    (layer_sizes[i + 1], layer_sizes[i])
                ));
            }
        }
        Ok(Self { layer_sizes, weights })
    }

    /// Seeded initialization, entries uniform in `±1/√fan_in`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(layer_sizes, &mut rng, 1.0)
    }

    /// Like [`init`](Self::init) with an extra multiplicative scale.
    pub fn init_with(layer_sizes: &[usize], rng: &mut impl Rng, scale: f64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| {
                let bound = scale / (w[0] as f64).sqrt();
                Mat::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..=bound))
            })
            .collect();
        Self::new(layer_sizes.to_vec(), weights)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn n_x(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_u(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    /// Total number of neurons `n_φ`.
    pub fn n_phi(&self) -> usize {
        self.hidden_sizes().iter().sum()
    }

    /// Start offset of every hidden layer inside the stacked `ν_φ`.
    pub fn hidden_offsets(&self) -> Vec<usize> {
        hidden_offsets(&self.layer_sizes)
    }

    /// Copy with the output layer multiplied by `factor`.
    pub fn scale_output(&self, factor: f64) -> Self {
        let mut out = self.clone();
        let last = out.weights.len() - 1;
        out.weights[last] *= factor;
        out
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// All weights flattened layer by layer (column-major within a layer).
    pub fn params(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_params() {
            return dims(format!("expected {} parameters, got {}", self.num_params(), params.len()));
        }
        let mut offset = 0;
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let m = Mat::from_column_slice(w.nrows(), w.ncols(), &params[offset..offset + w.len()]);
                offset += w.len();
                m
            })
            .collect();
        Ok(Self { layer_sizes: self.layer_sizes.clone(), weights })
    }

    pub fn with_weights(&self, weights: Vec<Mat>) -> Result<Self> {
        Self::new(self.layer_sizes.clone(), weights)
    }

    pub fn forward(&self, x: &Vector) -> Result<Forward> {
        if x.len() != self.n_x() {
            return dims(format!("state has length {}, controller expects {}", x.len(), self.n_x()));
        }
        let mut nu = Vector::zeros(self.n_phi());
        let mut omega = Vector::zeros(self.n_phi());
        let mut act = x.clone();
        let offsets = self.hidden_offsets();
        let l = self.hidden_sizes().len();
        for i in 0..l {
            let pre = &self.weights[i] * &act;
            act = pre.map(f64::tanh);
            nu.rows_mut(offsets[i], pre.len()).copy_from(&pre);
            omega.rows_mut(offsets[i], act.len()).copy_from(&act);
        }
        let u = &self.weights[l] * &act;
        Ok(Forward { u, nu, omega })
    }

    pub fn control(&self, x: &Vector) -> Result<Vector> {
        self.forward(x).map(|f| f.u)
    }

    /// Forward pass over the columns of `x`; returns per-layer activations
    /// (`acts[0] = x`, `acts[i] = tanh(W^i acts[i-1])`) and the output.
    pub fn forward_batch(&self, x: &Mat) -> (Vec<Mat>, Mat) {
        let l = self.hidden_sizes().len();
        let mut acts = Vec::with_capacity(l + 1);
        acts.push(x.clone());
        for i in 0..l {
            let pre = &self.weights[i] * &acts[i];
            acts.push(pre.map(f64::tanh));
        }
        let out = &self.weights[l] * &acts[l];
        (acts, out)
    }

    pub fn assemble_n(&self) -> BlockMatrixN {
        let (n_u, n_x, n_phi) = (self.n_u(), self.n_x(), self.n_phi());
        let offsets = self.hidden_offsets();
        let hidden = self.hidden_sizes();
        let l = hidden.len();
        let mut n = BlockMatrixN::zeros(n_u, n_x, n_phi);
        n.nux.view_mut((0, 0), (hidden[0], n_x)).copy_from(&self.weights[0]);
        for i in 1..l {
            n.nuw
                .view_mut((offsets[i], offsets[i - 1]), (hidden[i], hidden[i - 1]))
                .copy_from(&self.weights[i]);
        }
        n.piw.view_mut((0, offsets[l - 1]), (n_u, hidden[l - 1])).copy_from(&self.weights[l]);
        n
    }

    /// Inverse of [`assemble_n`](Self::assemble_n). Entries outside the
    /// feed-forward pattern must be below [`STRUCTURE_TOL`].
    pub fn from_block_matrix(n: &BlockMatrixN, layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let n_x = layer_sizes[0];
        let n_u = *layer_sizes.last().unwrap();
        let hidden = &layer_sizes[1..layer_sizes.len() - 1];
        let n_phi: usize = hidden.iter().sum();
        if (n.n_u(), n.n_x(), n.n_phi()) != (n_u, n_x, n_phi)
            || n.piw.shape() != (n_u, n_phi)
            || n.nux.shape() != (n_phi, n_x)
        {
            return dims("block matrix shapes do not match the layer sizes");
        }
        let mask = StructureMask::new(layer_sizes);
        let check = |name: &str, m: &Mat, legal: &dyn Fn(usize, usize) -> bool| -> Result<()> {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if !legal(i, j) && m[(i, j)].abs() > STRUCTURE_TOL {
                        return Err(Error::MalformedN(format!(
                            "{name}[{i},{j}] = {:e} lies outside the legal pattern",
                            m[(i, j)]
                        )));
                    }
                }
            }
            Ok(())
        };
        check("N_πx", &n.pix, &|_, _| false)?;
        check("N_πω", &n.piw, &|i, j| mask.piw(i, j))?;
        check("N_νx", &n.nux, &|i, j| mask.nux(i, j))?;
        check("N_νω", &n.nuw, &|i, j| mask.nuw(i, j))?;
        Ok(Self { weights: mask.extract(n), layer_sizes: layer_sizes.to_vec() })
    }

    /// Adjoint of [`assemble_n`](Self::assemble_n): maps a gradient with
    /// respect to the blocks of `N` onto the weight matrices.
    pub fn weight_gradient_from_n(&self, grad: &BlockMatrixN) -> Vec<Mat> {
        StructureMask::new(&self.layer_sizes).extract(grad)
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 3 {
        return dims("need at least one hidden layer: layer_sizes = [n_x, n_1, …, n_π]");
    }
    if layer_sizes.contains(&0) {
        return dims("layer sizes must be positive");
    }
    Ok(())
}

fn hidden_offsets(layer_sizes: &[usize]) -> Vec<usize> {
    let hidden = &layer_sizes[1..layer_sizes.len() - 1];
    hidden
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect()
}

/// Legal (weight-carrying) positions of `N` for a given architecture.
#[derive(Debug, Clone)]
pub struct StructureMask {
    layer_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl StructureMask {
    pub fn new(layer_sizes: &[usize]) -> Self {
        Self { layer_sizes: layer_sizes.to_vec(), offsets: hidden_offsets(layer_sizes) }
    }

    fn hidden(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    fn layer_of(&self, idx: usize) -> usize {
        self.offsets.iter().rposition(|&o| o <= idx).unwrap()
    }

    pub fn nux(&self, i: usize, _j: usize) -> bool {
        self.layer_of(i) == 0
    }

    pub fn nuw(&self, i: usize, j: usize) -> bool {
        let (li, lj) = (self.layer_of(i), self.layer_of(j));
        li >= 1 && lj == li - 1
    }

    pub fn piw(&self, _i: usize, j: usize) -> bool {
        self.layer_of(j) == self.hidden().len() - 1
    }

    /// Read the weight matrices out of the legal blocks of `n`.
    pub fn extract(&self, n: &BlockMatrixN) -> Vec<Mat> {
        let hidden = self.hidden();
        let l = hidden.len();
        let n_x = self.layer_sizes[0];
        let n_u = *self.layer_sizes.last().unwrap();
        let mut out = Vec::with_capacity(l + 1);
        out.push(n.nux.view((0, 0), (hidden[0], n_x)).into_owned());
        for i in 1..l {
            out.push(
                n.nuw
                    .view((self.offsets[i], self.offsets[i - 1]), (hidden[i], hidden[i - 1]))
                    .into_owned(),
            );
        }
        out.push(n.piw.view((0, self.offsets[l - 1]), (n_u, hidden[l - 1])).into_owned());
        out
    }

    /// Zero every entry outside the legal pattern.
    pub fn project(&self, n: &BlockMatrixN) -> BlockMatrixN {
        let mut out = n.clone();
        out.pix.fill(0.0);
        for i in 0..out.nux.nrows() {
            for j in 0..out.nux.ncols() {
                if !self.nux(i, j) {
                    out.nux[(i, j)] = 0.0;
                }
            }
            for j in 0..out.nuw.ncols() {
                if !self.nuw(i, j) {
                    out.nuw[(i, j)] = 0.0;
                }
            }
        }
        for i in 0..out.piw.nrows() {
            for j in 0..out.piw.ncols() {
                if !self.piw(i, j) {
                    out.piw[(i, j)] = 0.0;
                }
            }
        }
        out
    }
}

/// Differentiable scalar training objective over controller weights.
pub trait Objective {
    fn value_and_gradient(&self, nn: &NnController) -> Result<(f64, Vec<Mat>)>;

    fn value(&self, nn: &NnController) -> Result<f64> {
        self.value_and_gradient(nn).map(|(v, _)| v)
    }
}

/// Weight-shaped gradient of `objective` at `nn`.
pub fn gradient(nn: &NnController, objective: &dyn Objective) -> Result<Vec<Mat>> {
    let (value, grads) = objective.value_and_gradient(nn)?;
    if !value.is_finite() || grads.iter().any(|g| !linalg::all_finite(g)) {
        return Err(Error::NumericalFailure("non-finite objective or gradient".into()));
    }
    Ok(grads)
}

/// Mean squared error between `π(x_j)` and expert actions `u_j`, averaged
/// over samples and output coordinates.
#[derive(Debug, Clone)]
pub struct ImitationLoss {
    /// States as columns (`n_x × M`).
    pub states: Mat,
    /// Expert actions as columns (`n_u × M`).
    pub targets: Mat,
}

impl ImitationLoss {
    pub fn new(states: Mat, targets: Mat) -> Result<Self> {
        if states.ncols() != targets.ncols() || states.ncols() == 0 {
            return dims("states and targets need the same nonzero sample count");
        }
        Ok(Self { states, targets })
    }
}

impl Objective for ImitationLoss {
    fn value_and_gradient(&self, nn: &NnController) -> Result<(f64, Vec<Mat>)> {
        if self.states.nrows() != nn.n_x() || self.targets.nrows() != nn.n_u() {
            return dims("demonstration dimensions do not match the controller");
        }
        let (acts, out) = nn.forward_batch(&self.states);
        let err = out - &self.targets;
        let count = err.len() as f64;
        let value = err.norm_squared() / count;

        let l = nn.hidden_sizes().len();
        let w = nn.weights();
        let mut grads = vec![Mat::zeros(0, 0); l + 1];
        let delta_out = err * (2.0 / count);
        grads[l] = &delta_out * acts[l].transpose();
        let mut delta = w[l].transpose() * delta_out;
        for i in (0..l).rev() {
            // d tanh = 1 - tanh²
            let local = delta.zip_map(&acts[i + 1], |d, a| d * (1.0 - a * a));
            grads[i] = &local * acts[i].transpose();
            if i > 0 {
                delta = w[i].transpose() * local;
            }
        }
        Ok((value, grads))
    }
}

/// Nonnegative combination of objectives.
#[derive(Default)]
pub struct WeightedSum<'a> {
    terms: Vec<(f64, &'a dyn Objective)>,
}

impl<'a> WeightedSum<'a> {
    pub fn new() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn with(mut self, weight: f64, objective: &'a dyn Objective) -> Self {
        self.terms.push((weight, objective));
        self
    }
}

impl Objective for WeightedSum<'_> {
    fn value_and_gradient(&self, nn: &NnController) -> Result<(f64, Vec<Mat>)> {
        let mut total = 0.0;
        let mut grads: Vec<Mat> = nn.weights().iter().map(|w| Mat::zeros(w.nrows(), w.ncols())).collect();
        for &(weight, obj) in &self.terms {
            if weight == 0.0 {
                continue;
            }
            let (v, g) = obj.value_and_gradient(nn)?;
            total += weight * v;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += gi * weight;
            }
        }
        Ok((total, grads))
    }
}

/// Constant objective, mostly useful in tests.
pub struct ConstantObjective(pub f64);

impl Objective for ConstantObjective {
    fn value_and_gradient(&self, nn: &NnController) -> Result<(f64, Vec<Mat>)> {
        Ok((self.0, nn.weights().iter().map(|w| Mat::zeros(w.nrows(), w.ncols())).collect()))
    }
}

/// Full-batch Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, weights: &mut [Mat], grads: &[Mat]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.nrows(), g.ncols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((w, g), (m, v)) in weights.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = &*m * self.beta1 + g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + g.map(|x| x * x) * (1.0 - self.beta2);
            let step = m.zip_map(v, |mi, vi| (mi / c1) / ((vi / c2).sqrt() + self.eps));
            *w -= step * self.lr;
        }
    }
}
