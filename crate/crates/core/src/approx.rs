//! Value-function models: linear features and deep ReLU networks.

use std::sync::Arc;

use base64::Engine;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Feature matrix `Phi` (one row per state) with its bound and Hölder data.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    dim: usize,
    phi: Vec<f64>,
    nnz: Vec<Vec<(usize, f64)>>,
    c_phi: f64,
    c_gamma: f64,
    holder_gamma: f64,
}

impl FeatureMap {
    /// Features from rows; `C_phi` is the largest row norm and the Hölder
    /// constant is measured for exponent 1 under the index metric `|s - s'|`.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidParameter("feature map needs at least one state".into()));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("feature dimension must be positive".into()));
        }
        let mut phi = Vec::with_capacity(n * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { what: "feature row", expected: dim, found: r.len() });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("features must be finite".into()));
            }
            phi.extend_from_slice(r);
        }
        Self::from_flat(n, dim, phi, 1.0)
    }

    fn from_flat(n: usize, dim: usize, phi: Vec<f64>, holder_gamma: f64) -> Result<Self> {
        let nnz = phi
            .chunks_exact(dim)
            .map(|r| r.iter().copied().enumerate().filter(|&(_, x)| x != 0.0).collect())
            .collect();
        let c_phi = phi.chunks_exact(dim).map(norm).fold(0.0, f64::max);
        let mut fm = Self { n_states: n, dim, phi, nnz, c_phi, c_gamma: 0.0, holder_gamma: 1.0 };
        fm = fm.with_holder(holder_gamma)?;
        Ok(fm)
    }

    /// Identity features: one coordinate per state.
    pub fn tabular(n_states: usize) -> Self {
        let mut phi = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            phi[s * n_states + s] = 1.0;
        }
        Self::from_flat(n_states, n_states, phi, 1.0).expect("tabular features are valid")
    }

    /// Features drawn uniformly from `[-1, 1]`.
    pub fn random(n_states: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed);
        let rows = (0..n_states).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        Self::new(rows)
    }

    /// Re-measure `C_gamma` for Hölder exponent `gamma` in `(0, 1]`.
    pub fn with_holder(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("holder_gamma must lie in (0, 1], got {gamma}")));
        }
        let mut c: f64 = 0.0;
        for s in 0..self.n_states {
            for t in s + 1..self.n_states {
                let d: f64 = self.row(s).iter().zip(self.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                c = c.max(d / ((t - s) as f64).powf(gamma));
            }
        }
        self.holder_gamma = gamma;
        self.c_gamma = c;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.phi[s * self.dim..(s + 1) * self.dim]
    }

    /// Non-zero entries of row `s`.
    #[inline]
    pub fn sparse_row(&self, s: usize) -> &[(usize, f64)] {
        &self.nnz[s]
    }

    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    pub fn c_gamma(&self) -> f64 {
        self.c_gamma
    }

    pub fn holder_gamma(&self) -> f64 {
        self.holder_gamma
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.phi
    }
}

/// `f_theta(s) = theta . phi(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub features: Arc<FeatureMap>,
    pub theta: Vec<f64>,
}

impl LinearModel {
    pub fn new(features: Arc<FeatureMap>, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::DimensionMismatch { what: "theta", expected: features.dim(), found: theta.len() });
        }
        Ok(Self { features, theta })
    }

    pub fn zeros(features: Arc<FeatureMap>) -> Self {
        let d = features.dim();
        Self { features, theta: vec![0.0; d] }
    }

    #[inline]
    pub fn value(&self, s: usize) -> f64 {
        self.features.sparse_row(s).iter().map(|&(i, x)| self.theta[i] * x).sum()
    }
}

/// How chain states are fed to a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Embedding {
    /// `scale * e_s` in `R^{n_states}`.
    OneHot { n_states: usize, scale: f64 },
    /// The scalar `s / n_states`.
    Coordinate { n_states: usize },
    /// Explicit input vector per state.
    Table { inputs: Vec<Vec<f64>> },
}

impl Embedding {
    pub fn n_states(&self) -> usize {
        match self {
            Embedding::OneHot { n_states, .. } | Embedding::Coordinate { n_states } => *n_states,
            Embedding::Table { inputs } => inputs.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Embedding::OneHot { n_states, .. } => *n_states,
            Embedding::Coordinate { .. } => 1,
            Embedding::Table { inputs } => inputs.first().map_or(0, Vec::len),
        }
    }

    pub fn input(&self, s: usize) -> Vec<f64> {
        match self {
            Embedding::OneHot { n_states, scale } => {
                let mut x = vec![0.0; *n_states];
                x[s] = *scale;
                x
            }
            Embedding::Coordinate { n_states } => vec![s as f64 / *n_states as f64],
            Embedding::Table { inputs } => inputs[s].clone(),
        }
    }

    fn max_norm(&self) -> f64 {
        (0..self.n_states()).map(|s| norm(&self.input(s))).fold(0.0, f64::max)
    }
}

/// Feed-forward ReLU network with scalar linear output.
///
/// Layer `l` maps `widths[l]` inputs to `widths[l+1]` outputs. Each layer is a
/// row-major `out x (in + bias)` block of the flat parameter vector, the bias
/// (when present) being the last column. Hidden layers apply ReLU; the output
/// layer is linear. Every layer satisfies `||W_l||_2 <= budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    widths: Vec<usize>,
    bias: bool,
    params: Vec<f64>,
    offsets: Vec<usize>,
    budget: f64,
    x_max: f64,
    embedding: Embedding,
}

/// Pre-activations of one forward pass, hidden layers first, output last.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> f64 {
        self.pre.last().expect("network has layers")[0]
    }
}

impl ReluNetwork {
    /// Network from explicit layer matrices (rows of `[W | b]`).
    pub fn from_layers(
        layers: Vec<Vec<Vec<f64>>>,
        bias: bool,
        budget: f64,
        x_max: f64,
        embedding: Embedding,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        let mut widths = vec![embedding.input_dim()];
        let mut params = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            let cols = widths[l] + usize::from(bias);
            for row in layer {
                if row.len() != cols {
                    return Err(Error::DimensionMismatch { what: "layer row", expected: cols, found: row.len() });
                }
                params.extend_from_slice(row);
            }
            widths.push(layer.len());
        }
        Self::assemble(widths, bias, params, budget, x_max, embedding)
    }

    fn assemble(
        widths: Vec<usize>,
        bias: bool,
        params: Vec<f64>,
        budget: f64,
        x_max: f64,
        embedding: Embedding,
    ) -> Result<Self> {
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidParameter("output layer must have width 1".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        if widths[0] != embedding.input_dim() {
            return Err(Error::DimensionMismatch { what: "input width", expected: embedding.input_dim(), found: widths[0] });
        }
        if !(budget >= 0.0 && budget.is_finite()) || !(x_max > 0.0 && x_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("need finite budget >= 0 and x_max > 0, got {budget}, {x_max}")));
        }
        let emb_norm = embedding.max_norm();
        if emb_norm > x_max * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!("embedding norm {emb_norm} exceeds x_max = {x_max}")));
        }
        let mut offsets = vec![0];
        for l in 0..widths.len() - 1 {
            offsets.push(offsets[l] + widths[l + 1] * (widths[l] + usize::from(bias)));
        }
        if params.len() != *offsets.last().unwrap() {
            return Err(Error::DimensionMismatch { what: "network parameters", expected: *offsets.last().unwrap(), found: params.len() });
        }
        Ok(Self { widths, bias, params, offsets, budget, x_max, embedding })
    }

    /// Uniform `[-w, w]` initialisation followed by spectral projection. The
    /// default `w` puts the top singular value of each layer near `budget / 2`.
    pub fn random(
        hidden: &[usize],
        bias: bool,
        budget: f64,
        x_max: f64,
        embedding: Embedding,
        seed: u64,
        init_scale: Option<f64>,
    ) -> Result<Self> {
        let mut widths = vec![embedding.input_dim()];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut rng = seeds::rng(seed);
        let mut params = Vec::new();
        for l in 0..widths.len() - 1 {
            let (rows, cols) = (widths[l + 1], widths[l] + usize::from(bias));
            // E sigma_1 of a uniform[-w, w] matrix ~ w (sqrt(rows) + sqrt(cols)) / sqrt(3)
            let w = init_scale.unwrap_or(0.5 * budget * 3f64.sqrt() / ((rows as f64).sqrt() + (cols as f64).sqrt()));
            params.extend((0..rows * cols).map(|_| rng.gen_range(-w..=w)));
        }
        let mut net = Self::assemble(widths, bias, params, budget, x_max, embedding)?;
        net.project_in_place();
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(rows, cols)` of layer `l`, bias column included.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l] + usize::from(self.bias))
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.params[self.offsets[l]..self.offsets[l + 1]]
    }

    fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let (a, b) = (self.offsets[l], self.offsets[l + 1]);
        &mut self.params[a..b]
    }

    pub fn input(&self, s: usize) -> Vec<f64> {
        self.embedding.input(s)
    }

    /// Forward pass keeping every layer input and pre-activation.
    pub fn forward(&self, x: &[f64]) -> ForwardPass {
        let depth = self.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut h = x.to_vec();
        for l in 0..depth {
            let (rows, cols) = self.layer_shape(l);
            let w = self.layer(l);
            let fan_in = self.widths[l];
            let mut z = vec![0.0; rows];
            for (i, zi) in z.iter_mut().enumerate() {
                let r = &w[i * cols..(i + 1) * cols];
                let mut acc = if self.bias { r[fan_in] } else { 0.0 };
                for j in 0..fan_in {
                    acc += r[j] * h[j];
                }
                *zi = acc;
            }
            let next: Vec<f64> = if l + 1 < depth { z.iter().map(|&v| v.max(0.0)).collect() } else { Vec::new() };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        ForwardPass { inputs, pre }
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.forward(x).output()
    }

    /// Parameter gradient of the output at input `x`. A unit whose
    /// pre-activation is exactly zero has its gate closed.
    pub fn grad_at(&self, x: &[f64]) -> Vec<f64> {
        let fwd = self.forward(x);
        let mut g = vec![0.0; self.params.len()];
        self.backward(&fwd, self.depth() - 1, vec![1.0], &mut g);
        g
    }

    /// Value and gradient from a single forward pass.
    pub fn value_and_grad_at(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let fwd = self.forward(x);
        let mut g = vec![0.0; self.params.len()];
        self.backward(&fwd, self.depth() - 1, vec![1.0], &mut g);
        (fwd.output(), g)
    }

    /// Back-propagate `upstream` (d out / d z at layer `top`) down to layer 0,
    /// accumulating parameter gradients into `g`.
    pub(crate) fn backward(&self, fwd: &ForwardPass, top: usize, mut upstream: Vec<f64>, g: &mut [f64]) {
        for l in (0..=top).rev() {
            let (rows, cols) = self.layer_shape(l);
            let fan_in = self.widths[l];
            let off = self.offsets[l];
            let h = &fwd.inputs[l];
            for i in 0..rows {
                let u = upstream[i];
                if u == 0.0 {
                    continue;
                }
                let gr = &mut g[off + i * cols..off + (i + 1) * cols];
                for j in 0..fan_in {
                    gr[j] += u * h[j];
                }
                if self.bias {
                    gr[fan_in] += u;
                }
            }
            if l == 0 {
                break;
            }
            let w = self.layer(l);
            let z_prev = &fwd.pre[l - 1];
            let mut down = vec![0.0; fan_in];
            for (j, d) in down.iter_mut().enumerate() {
                if z_prev[j] > 0.0 {
                    *d = (0..rows).map(|i| w[i * cols + j] * upstream[i]).sum();
                }
            }
            upstream = down;
        }
    }

    /// Rescale every layer whose spectral norm exceeds the budget. Returns
    /// whether any layer changed.
    pub fn project_in_place(&mut self) -> bool {
        let mut changed = false;
        for l in 0..self.depth() {
            let (rows, cols) = self.layer_shape(l);
            let budget = self.budget;
            let w = self.layer_mut(l);
            // ||W||_2 <= ||W||_F, so most within-budget layers skip the iteration
            if norm(w) <= budget {
                continue;
            }
            let sigma = spectral_norm(w, rows, cols);
            if sigma > budget {
                let scale = budget / sigma;
                w.iter_mut().for_each(|x| *x *= scale);
                changed = true;
            }
        }
        changed
    }

    /// Spectral norm of every layer.
    pub fn layer_norms(&self) -> Vec<f64> {
        (0..self.depth())
            .map(|l| {
                let (r, c) = self.layer_shape(l);
                spectral_norm(self.layer(l), r, c)
            })
            .collect()
    }
}

/// Top singular value by power iteration on the Gram matrix (50 iterations,
/// relative tolerance 1e-10), falling back to a symmetric eigensolve when the
/// iteration has not settled.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(w.len(), rows * cols);
    if w.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    // start from the heaviest row, nudged off any exact orthogonality
    let heavy = (0..rows)
        .max_by(|&a, &b| norm(&w[a * cols..(a + 1) * cols]).total_cmp(&norm(&w[b * cols..(b + 1) * cols])))
        .unwrap();
    let mut v: Vec<f64> = w[heavy * cols..(heavy + 1) * cols].iter().map(|x| x + 1e-3).collect();
    let mut sigma2 = 0.0;
    let mut converged = false;
    let mut wv = vec![0.0; rows];
    for _ in 0..50 {
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        for i in 0..rows {
            wv[i] = (0..cols).map(|j| w[i * cols + j] * v[j]).sum();
        }
        let next = wv.iter().map(|x| x * x).sum::<f64>();
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| w[i * cols + j] * wv[i]).sum();
        }
        if (next - sigma2).abs() <= 1e-10 * next {
            sigma2 = next;
            converged = true;
            break;
        }
        sigma2 = next;
    }
    if converged {
        return sigma2.sqrt();
    }
    let m = DMatrix::from_row_slice(rows, cols, w);
    let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
    gram.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max).max(0.0).sqrt()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Copy of `net` with every layer projected onto the spectral budget.
pub fn project_spectral(net: &ReluNetwork) -> ReluNetwork {
    let mut out = net.clone();
    out.project_in_place();
    out
}

/// Explicit constants of the uniform gradient bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradConstants {
    /// `n B^n (X_max + 1)`
    pub g: f64,
    /// `2 G (R_max + X_max)`
    pub g1: f64,
    /// `G1 (1 + R_max)`
    pub l: f64,
}

pub fn gradient_constants(net: &ReluNetwork, r_max: f64) -> GradConstants {
    grad_constants_from(net.depth(), net.budget(), net.x_max(), r_max)
}

pub fn grad_constants_from(depth: usize, budget: f64, x_max: f64, r_max: f64) -> GradConstants {
    let n = depth as f64;
    let g = n * budget.powi(depth as i32) * (x_max + 1.0);
    let g1 = 2.0 * g * (r_max + x_max);
    GradConstants { g, g1, l: g1 * (1.0 + r_max) }
}

/// A value model: linear in features or a ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueModel {
    Linear(LinearModel),
    Relu(ReluNetwork),
}

impl ValueModel {
    pub fn kind(&self) -> &'static str {
        match self {
            ValueModel::Linear(_) => "linear",
            ValueModel::Relu(_) => "relu",
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            ValueModel::Linear(m) => m.features.n_states(),
            ValueModel::Relu(n) => n.embedding.n_states(),
        }
    }

    #[inline]
    pub fn value(&self, s: usize) -> f64 {
        match self {
            ValueModel::Linear(m) => m.value(s),
            ValueModel::Relu(n) => n.value_at(&n.input(s)),
        }
    }

    /// Values at every state.
    pub fn values(&self) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.value(s)).collect()
    }

    pub fn grad(&self, s: usize) -> Vec<f64> {
        match self {
            ValueModel::Linear(m) => m.features.row(s).to_vec(),
            ValueModel::Relu(n) => n.grad_at(&n.input(s)),
        }
    }

    pub fn value_and_grad(&self, s: usize) -> (f64, Vec<f64>) {
        match self {
            ValueModel::Linear(m) => (m.value(s), m.features.row(s).to_vec()),
            ValueModel::Relu(n) => n.value_and_grad_at(&n.input(s)),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            ValueModel::Linear(m) => &m.theta,
            ValueModel::Relu(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            ValueModel::Linear(m) => &mut m.theta,
            ValueModel::Relu(n) => &mut n.params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }

    /// Same model with parameters replaced.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch { what: "parameters", expected: self.n_params(), found: params.len() });
        }
        let mut m = self.clone();
        m.params_mut().copy_from_slice(params);
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        f.try_into()
    }
}

/// Bit-exact base64 encoding of little-endian doubles.
pub fn encode_f64s(xs: &[f64]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("encoded doubles are not a multiple of 8 bytes".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// JSON layout of a model: `kind`, `dims`, base64 weights and (for networks)
/// `B`, `X_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: String,
    pub dims: Vec<usize>,
    pub weights: String,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(rename = "X_max", skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holder_gamma: Option<f64>,
}

impl From<&ValueModel> for ModelFile {
    fn from(m: &ValueModel) -> Self {
        match m {
            ValueModel::Linear(lm) => ModelFile {
                kind: "linear".into(),
                dims: vec![lm.features.n_states(), lm.features.dim()],
                weights: encode_f64s(&lm.theta),
                budget: None,
                x_max: None,
                bias: None,
                embedding: None,
                features: Some(encode_f64s(lm.features.as_flat())),
                holder_gamma: Some(lm.features.holder_gamma()),
            },
            ValueModel::Relu(n) => ModelFile {
                kind: "relu".into(),
                dims: n.widths.clone(),
                weights: encode_f64s(&n.params),
                budget: Some(n.budget),
                x_max: Some(n.x_max),
                bias: Some(n.bias),
                embedding: Some(n.embedding.clone()),
                features: None,
                holder_gamma: None,
            },
        }
    }
}

impl TryFrom<ModelFile> for ValueModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let weights = decode_f64s(&f.weights)?;
        let missing = |what: &str| Error::Format(format!("{} model is missing `{what}`", f.kind));
        match f.kind.as_str() {
            "linear" => {
                let [n, d] = f.dims[..] else {
                    return Err(Error::Format("linear model dims must be [n_states, d]".into()));
                };
                let phi = decode_f64s(f.features.as_deref().ok_or_else(|| missing("features"))?)?;
                if phi.len() != n * d {
                    return Err(Error::DimensionMismatch { what: "features", expected: n * d, found: phi.len() });
                }
                let fm = FeatureMap::from_flat(n, d, phi, f.holder_gamma.unwrap_or(1.0))?;
                Ok(ValueModel::Linear(LinearModel::new(Arc::new(fm), weights)?))
            }
            "relu" => {
                let net = ReluNetwork::assemble(
                    f.dims.clone(),
                    f.bias.ok_or_else(|| missing("bias"))?,
                    weights,
                    f.budget.ok_or_else(|| missing("B"))?,
                    f.x_max.ok_or_else(|| missing("X_max"))?,
                    f.embedding.clone().ok_or_else(|| missing("embedding"))?,
                )?;
                Ok(ValueModel::Relu(net))
            }
            other => Err(Error::Format(format!("unknown model kind `{other}`"))),
        }
    }
}
