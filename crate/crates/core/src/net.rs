//! Fully connected tanh network `h(z; θ)` with exact state gradients and the
//! mixed parameter/state derivatives needed by gradient-dependent losses.
//!
//! Parameters are stored flat, layer by layer, each layer as its weight
//! matrix (row-major, `out × in`) followed by its bias.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{norm, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// `max |tanh''|`, attained at `tanh(s) = ±1/√3`.
pub const TANH_CURVATURE: f64 = 0.769_800_358_919_501;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetMetadata {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierNet {
    dims: Vec<usize>,
    params: Vec<f64>,
    /// Start of each layer's weight block.
    offsets: Vec<usize>,
    pub metadata: NetMetadata,
}

fn layer_offsets(dims: &[usize]) -> Result<(Vec<usize>, usize)> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad layer dims {dims:?}")));
    }
    if *dims.last().unwrap() != 1 {
        return Err(Error::InvalidArgument("output layer must have width 1".into()));
    }
    let mut offsets = Vec::with_capacity(dims.len() - 1);
    let mut at = 0;
    for w in dims.windows(2) {
        offsets.push(at);
        at += (w[0] + 1) * w[1];
    }
    Ok((offsets, at))
}

impl BarrierNet {
    /// All-zero parameters.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let (offsets, n) = layer_offsets(dims)?;
        Ok(Self { dims: dims.to_vec(), params: vec![0.0; n], offsets, metadata: NetMetadata::default() })
    }

    /// Each layer uniform in `±1/√fan_in`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.num_layers() {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            let (start, end) = net.layer_range(l);
            net.params[start..end].iter_mut().for_each(|p| *p = dist.sample(&mut rng));
        }
        net.metadata.seed = seed;
        Ok(net)
    }

    /// Builds a net from row-major weights and biases per layer.
    pub fn from_layers(dims: &[usize], weights: &[Vec<f64>], biases: &[Vec<f64>]) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        Error::check_dim(net.num_layers(), weights.len())?;
        Error::check_dim(net.num_layers(), biases.len())?;
        for l in 0..net.num_layers() {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            Error::check_dim(n_in * n_out, weights[l].len())?;
            Error::check_dim(n_out, biases[l].len())?;
            let w = net.offsets[l];
            net.params[w..w + n_in * n_out].copy_from_slice(&weights[l]);
            net.params[w + n_in * n_out..w + (n_in + 1) * n_out].copy_from_slice(&biases[l]);
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        Error::check_dim(self.params.len(), theta.len())?;
        self.params.copy_from_slice(theta);
        Ok(())
    }

    fn layer_range(&self, l: usize) -> (usize, usize) {
        let start = self.offsets[l];
        (start, start + (self.dims[l] + 1) * self.dims[l + 1])
    }

    /// Row-major weight matrix of layer `l`.
    pub fn weight(&self, l: usize) -> &[f64] {
        let w = self.offsets[l];
        &self.params[w..w + self.dims[l] * self.dims[l + 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let b = self.offsets[l] + self.dims[l] * self.dims[l + 1];
        &self.params[b..b + self.dims[l + 1]]
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.dims)
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        Error::check_dim(self.input_dim(), z.len())
    }

    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        self.check_input(z)?;
        Ok(self.forward_ws(&mut self.workspace(), z))
    }

    pub fn grad_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(z)?.1)
    }

    pub fn value_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(z)?;
        let mut ws = self.workspace();
        let mut g = vec![0.0; self.input_dim()];
        let h = self.forward_ws(&mut ws, z);
        self.grad_ws(&mut ws, &mut g);
        Ok((h, g))
    }

    /// Forward pass caching activations in `ws`. `z` must have the input width.
    pub fn forward_ws(&self, ws: &mut Workspace, z: &[f64]) -> f64 {
        ws.act[0].copy_from_slice(z);
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = self.weight(l);
            let b = self.bias(l);
            if l == last {
                return dot_row(&w[..n_in], &ws.act[l]) + b[0];
            }
            let (prev, next) = ws.act.split_at_mut(l + 1);
            let (input, out) = (&prev[l], &mut next[0]);
            let d1 = &mut ws.d1[l + 1];
            for o in 0..n_out {
                let t = (dot_row(&w[o * n_in..(o + 1) * n_in], input) + b[o]).tanh();
                out[o] = t;
                d1[o] = 1.0 - t * t;
            }
        }
        unreachable!()
    }

    /// `∇_z h` at the point of the last [`forward_ws`](Self::forward_ws).
    pub fn grad_ws(&self, ws: &mut Workspace, out: &mut [f64]) {
        let last = self.num_layers() - 1;
        let n = self.dims[last];
        ws.adj_a[..n].copy_from_slice(&self.weight(last)[..n]);
        for l in (0..last).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = self.weight(l);
            let d1 = &ws.d1[l + 1];
            for o in 0..n_out {
                ws.adj_s[o] = ws.adj_a[o] * d1[o];
            }
            ws.adj_a[..n_in].fill(0.0);
            for o in 0..n_out {
                let s = ws.adj_s[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                ws.adj_a[..n_in].iter_mut().zip(row).for_each(|(a, wi)| *a += s * wi);
            }
        }
        out.copy_from_slice(&ws.adj_a[..self.dims[0]]);
    }

    /// Adds `∇_θ [c_h h(z) + ⟨∇_z h(z), r⟩]` (with `r` held fixed) to `grad`,
    /// using the activations cached by the last forward pass at `z`.
    pub fn accumulate_ws(&self, ws: &mut Workspace, c_h: f64, r: &[f64], grad: &mut [f64]) {
        let last = self.num_layers() - 1;
        // Tangent pass along r.
        ws.tan_a[0].copy_from_slice(r);
        for l in 0..last {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = self.weight(l);
            let (prev, next) = ws.tan_a.split_at_mut(l + 1);
            let (input, out) = (&prev[l], &mut next[0]);
            let d1 = &ws.d1[l + 1];
            let ts = &mut ws.tan_s[l + 1];
            for o in 0..n_out {
                let s = dot_row(&w[o * n_in..(o + 1) * n_in], input);
                ts[o] = s;
                out[o] = d1[o] * s;
            }
        }

        // Output layer.
        let n = self.dims[last];
        {
            let off = self.offsets[last];
            let (gw, gb) = grad[off..off + n + 1].split_at_mut(n);
            for i in 0..n {
                gw[i] += c_h * ws.act[last][i] + ws.tan_a[last][i];
            }
            gb[0] += c_h;
            let w = self.weight(last);
            for i in 0..n {
                ws.adj_a[i] = c_h * w[i];
                ws.adj_t[i] = w[i];
            }
        }

        for l in (0..last).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let d1 = &ws.d1[l + 1];
            let t = &ws.act[l + 1];
            let ts = &ws.tan_s[l + 1];
            for o in 0..n_out {
                let d2 = -2.0 * t[o] * d1[o];
                ws.adj_s[o] = ws.adj_a[o] * d1[o] + ws.adj_t[o] * d2 * ts[o];
                ws.adj_ts[o] = ws.adj_t[o] * d1[o];
            }
            let off = self.offsets[l];
            let (gw, gb) = grad[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            let a_prev = &ws.act[l];
            let t_prev = &ws.tan_a[l];
            for o in 0..n_out {
                let (s, st) = (ws.adj_s[o], ws.adj_ts[o]);
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row[i] += s * a_prev[i] + st * t_prev[i];
                }
                gb[o] += s;
            }
            if l > 0 {
                let w = self.weight(l);
                ws.adj_a[..n_in].fill(0.0);
                ws.adj_t[..n_in].fill(0.0);
                for o in 0..n_out {
                    let (s, st) = (ws.adj_s[o], ws.adj_ts[o]);
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        ws.adj_a[i] += s * row[i];
                        ws.adj_t[i] += st * row[i];
                    }
                }
            }
        }
    }

    /// Exact `∇_θ` of `Σ_k c_h h(z_k) + ⟨∇_z h(z_k), v_k⟩ + c_n ‖∇_z h(z_k)‖`.
    /// The norm term contributes nothing where `∇_z h = 0`.
    pub fn param_grad(&self, terms: &[LossTerm]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.num_params()];
        let mut ws = self.workspace();
        let n = self.input_dim();
        let mut g = vec![0.0; n];
        let mut r = vec![0.0; n];
        for term in terms {
            self.check_input(&term.z)?;
            if let Some(v) = &term.v {
                Error::check_dim(n, v.len())?;
            }
            self.forward_ws(&mut ws, &term.z);
            r.fill(0.0);
            if let Some(v) = &term.v {
                r.copy_from_slice(v);
            }
            if term.c_n != 0.0 {
                self.grad_ws(&mut ws, &mut g);
                let len = norm(&g);
                if len > 0.0 {
                    r.iter_mut().zip(&g).for_each(|(ri, gi)| *ri += term.c_n * gi / len);
                }
            }
            self.accumulate_ws(&mut ws, term.c_h, &r, &mut grad);
        }
        Ok(grad)
    }

    /// `Π_l ‖W_l‖₂`: a Lipschitz bound for `h` since `|tanh'| ≤ 1`.
    pub fn global_lipschitz_bound(&self) -> f64 {
        (0..self.num_layers()).map(|l| self.layer_norm(l)).product()
    }

    /// Bound on `sup_z ‖∇²_z h(z)‖₂` from the layer norms and `max |tanh''|`.
    pub fn hessian_bound(&self) -> f64 {
        let norms: Vec<f64> = (0..self.num_layers()).map(|l| self.layer_norm(l)).collect();
        let last = norms.len() - 1;
        let mut prefix = 1.0;
        let mut total = 0.0;
        for k in 0..last {
            prefix *= norms[k];
            let suffix: f64 = norms[k + 1..].iter().product();
            total += TANH_CURVATURE * prefix * prefix * suffix;
        }
        total
    }

    pub fn layer_norm(&self, l: usize) -> f64 {
        operator_norm(self.weight(l), self.dims[l + 1], self.dims[l])
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_dims: self.dims.clone(),
            weights: (0..self.num_layers()).map(|l| self.weight(l).to_vec()).collect(),
            biases: (0..self.num_layers()).map(|l| self.bias(l).to_vec()).collect(),
            activation: "tanh".into(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: c.version, expected: CHECKPOINT_VERSION });
        }
        if c.activation != "tanh" {
            return Err(Error::Parse(format!("unsupported activation {:?}", c.activation)));
        }
        let mut net = Self::from_layers(&c.layer_dims, &c.weights, &c.biases)?;
        net.metadata = c.metadata.clone();
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        Self::from_checkpoint(&c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A scalar barrier candidate with state gradient and global bounds.
pub trait Barrier: Send + Sync {
    fn input_dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>);
    /// A global Lipschitz bound (`+∞` when unknown).
    fn lipschitz_bound(&self) -> f64;
    /// A global bound on the Hessian operator norm (`+∞` when unknown).
    fn hessian_bound(&self) -> f64;
}

impl Barrier for BarrierNet {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }
    fn value(&self, z: &[f64]) -> f64 {
        self.forward_ws(&mut self.workspace(), z)
    }
    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let mut ws = self.workspace();
        let mut g = vec![0.0; self.dims[0]];
        let h = self.forward_ws(&mut ws, z);
        self.grad_ws(&mut ws, &mut g);
        (h, g)
    }
    fn lipschitz_bound(&self) -> f64 {
        self.global_lipschitz_bound()
    }
    fn hessian_bound(&self) -> f64 {
        BarrierNet::hessian_bound(self)
    }
}

type ValueFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A closed-form barrier.
pub struct AnalyticBarrier {
    dim: usize,
    value: ValueFn,
    grad: GradFn,
    lipschitz: f64,
    hessian: f64,
}

impl AnalyticBarrier {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, value: Box::new(value), grad: Box::new(grad), lipschitz: f64::INFINITY, hessian: f64::INFINITY }
    }

    pub fn with_bounds(mut self, lipschitz: f64, hessian: f64) -> Self {
        self.lipschitz = lipschitz;
        self.hessian = hessian;
        self
    }

    /// `h(z) = r² − ‖z‖²`.
    pub fn ball(dim: usize, radius: f64) -> Self {
        Self::new(dim, move |z| radius * radius - crate::dot(z, z), |z| z.iter().map(|x| -2.0 * x).collect())
            .with_bounds(f64::INFINITY, 2.0)
    }

    /// `h(z) = ⟨c, z⟩ + b`.
    pub fn affine(c: Vec<f64>, b: f64) -> Self {
        let dim = c.len();
        let lip = norm(&c);
        let g = c.clone();
        Self::new(dim, move |z| crate::dot(&c, z) + b, move |_| g.clone()).with_bounds(lip, 0.0)
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self::new(dim, move |_| value, move |_| vec![0.0; dim]).with_bounds(0.0, 0.0)
    }
}

impl Barrier for AnalyticBarrier {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn value(&self, z: &[f64]) -> f64 {
        (self.value)(z)
    }
    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        ((self.value)(z), (self.grad)(z))
    }
    fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }
    fn hessian_bound(&self) -> f64 {
        self.hessian
    }
}

/// A gradient-dependent loss term at `z`:
/// `c_h h(z) + ⟨∇_z h(z), v⟩ + c_n ‖∇_z h(z)‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub z: Vec<f64>,
    pub c_h: f64,
    pub v: Option<Vec<f64>>,
    pub c_n: f64,
}

impl LossTerm {
    pub fn value(z: &[f64], c_h: f64) -> Self {
        Self { z: z.to_vec(), c_h, v: None, c_n: 0.0 }
    }

    pub fn directional(z: &[f64], v: &[f64]) -> Self {
        Self { z: z.to_vec(), c_h: 0.0, v: Some(v.to_vec()), c_n: 0.0 }
    }

    pub fn grad_norm(z: &[f64], c_n: f64) -> Self {
        Self { z: z.to_vec(), c_h: 0.0, v: None, c_n }
    }

    /// Evaluates the term.
    pub fn eval(&self, net: &BarrierNet) -> Result<f64> {
        let (h, g) = net.value_and_grad(&self.z)?;
        let dir = self.v.as_ref().map_or(0.0, |v| crate::dot(&g, v));
        Ok(self.c_h * h + dir + self.c_n * norm(&g))
    }
}

/// JSON checkpoint schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: String,
    pub metadata: NetMetadata,
}

/// Scratch buffers for allocation-free evaluation.
#[derive(Debug, Clone)]
pub struct Workspace {
    act: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    tan_a: Vec<Vec<f64>>,
    tan_s: Vec<Vec<f64>>,
    adj_a: Vec<f64>,
    adj_t: Vec<f64>,
    adj_s: Vec<f64>,
    adj_ts: Vec<f64>,
}

impl Workspace {
    fn new(dims: &[usize]) -> Self {
        let hidden = &dims[..dims.len() - 1];
        let per_layer = || hidden.iter().map(|d| vec![0.0; *d]).collect::<Vec<_>>();
        let widest = *dims.iter().max().unwrap();
        Self {
            act: per_layer(),
            d1: per_layer(),
            tan_a: per_layer(),
            tan_s: per_layer(),
            adj_a: vec![0.0; widest],
            adj_t: vec![0.0; widest],
            adj_s: vec![0.0; widest],
            adj_ts: vec![0.0; widest],
        }
    }
}

#[inline]
fn dot_row(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spectral norm of a row-major `rows × cols` matrix by power iteration on
/// `WᵀW` (at most 50 iterations, relative tolerance 1e-10).
///
/// The start vector is fixed and non-uniform so results are deterministic;
/// the returned value is `‖W x‖` at the final unit iterate, raised by a
/// small relative safety factor.
pub fn operator_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 0 || cols == 0 || w.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    if rows == 1 || cols == 1 {
        return norm(w);
    }
    let mut x: Vec<f64> = (0..cols).map(|i| 1.0 + 0.37 * ((i * 7919) % 13) as f64 / 13.0).collect();
    let len = norm(&x);
    x.iter_mut().for_each(|v| *v /= len);
    let mut y = vec![0.0; rows];
    let mut sigma_sq = 0.0;
    for _ in 0..50 {
        for r in 0..rows {
            y[r] = dot_row(&w[r * cols..(r + 1) * cols], &x);
        }
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            next.iter_mut().zip(row).for_each(|(n, wi)| *n += y[r] * wi);
        }
        let est = norm(&next);
        if est == 0.0 {
            break;
        }
        next.iter_mut().for_each(|v| *v /= est);
        let converged = (est - sigma_sq).abs() <= 1e-10 * est;
        sigma_sq = est;
        x = next;
        if converged {
            break;
        }
    }
    let gram_bound = sigma_sq.sqrt();
    // Power iteration approaches from below; the Frobenius norm caps the
    // inflation so the result stays a valid bound when convergence is slow.
    let frob = norm(w);
    (gram_bound * (1.0 + 1e-6)).min(frob).max(gram_bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(w1: f64, b1: f64, w2: f64, b2: f64) -> BarrierNet {
        BarrierNet::from_layers(&[1, 1, 1], &[vec![w1], vec![w2]], &[vec![b1], vec![b2]]).unwrap()
    }

    #[test]
    fn parameter_count() {
        let net = BarrierNet::init(&[4, 32, 16, 1], 0).unwrap();
        assert_eq!(net.num_params(), 5 * 32 + 33 * 16 + 17);
        assert!(BarrierNet::zeros(&[4, 2]).is_err());
        assert!(BarrierNet::zeros(&[4]).is_err());
    }

    #[test]
    fn init_range_and_determinism() {
        let a = BarrierNet::init(&[4, 32, 16, 1], 9).unwrap();
        let b = BarrierNet::init(&[4, 32, 16, 1], 9).unwrap();
        assert_eq!(a, b);
        for l in 0..3 {
            let bound = 1.0 / (a.layer_dims()[l] as f64).sqrt();
            assert!(a.weight(l).iter().chain(a.bias(l)).all(|p| p.abs() <= bound));
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = BarrierNet::zeros(&[3, 5, 1]).unwrap();
        let n = net.num_params();
        net.params_mut()[n - 1] = 0.7;
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.7);
        assert_eq!(net.grad_z(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn closed_form_single_unit() {
        let net = tiny(1.0, 0.0, 1.0, 0.0);
        assert!((net.forward(&[0.5]).unwrap() - 0.5f64.tanh()).abs() < 1e-15);
        assert!((net.forward(&[0.5]).unwrap() - 0.462117).abs() < 1e-6);
        let g = net.grad_z(&[0.5]).unwrap()[0];
        assert!((g - 0.786448).abs() < 1e-6);
    }

    #[test]
    fn dimension_errors() {
        let net = BarrierNet::init(&[2, 3, 1], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(net.grad_z(&[1.0, 2.0, 3.0]).is_err());
        assert!(net.param_grad(&[LossTerm::directional(&[1.0, 2.0], &[1.0])]).is_err());
    }

    #[test]
    fn hidden_unit_permutation() {
        let net = BarrierNet::init(&[2, 3, 1], 5).unwrap();
        let w0 = net.weight(0).to_vec();
        let b0 = net.bias(0).to_vec();
        let w1 = net.weight(1).to_vec();
        let perm = [2, 0, 1];
        let pw0: Vec<f64> = perm.iter().flat_map(|&k| w0[2 * k..2 * k + 2].to_vec()).collect();
        let pb0: Vec<f64> = perm.iter().map(|&k| b0[k]).collect();
        let pw1: Vec<f64> = perm.iter().map(|&k| w1[k]).collect();
        let other = BarrierNet::from_layers(&[2, 3, 1], &[pw0, pw1], &[pb0, net.bias(1).to_vec()]).unwrap();
        for z in [[0.3, -1.2], [2.0, 0.1]] {
            assert!((net.forward(&z).unwrap() - other.forward(&z).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn directional_derivative_closed_form() {
        // ∂/∂w1 of w2 (1 − tanh²(w1 z + b1)) w1 v.
        let (w1, b1, w2, z, v) = (0.8, 0.1, -1.3, 0.5, 0.7);
        let net = tiny(w1, b1, w2, 0.2);
        let g = net.param_grad(&[LossTerm::directional(&[z], &[v])]).unwrap();
        let t = (w1 * z + b1).tanh();
        let d1 = 1.0 - t * t;
        let want_w1 = w2 * v * (d1 + w1 * (-2.0 * t * d1) * z);
        let want_b1 = w2 * v * w1 * (-2.0 * t * d1);
        let want_w2 = d1 * w1 * v;
        assert!((g[0] - want_w1).abs() < 1e-14);
        assert!((g[1] - want_b1).abs() < 1e-14);
        assert!((g[2] - want_w2).abs() < 1e-14);
        assert_eq!(g[3], 0.0);
    }

    fn central_diff(net: &BarrierNet, term: &LossTerm, k: usize, step: f64) -> f64 {
        let mut plus = net.clone();
        plus.params_mut()[k] += step;
        let mut minus = net.clone();
        minus.params_mut()[k] -= step;
        (term.eval(&plus).unwrap() - term.eval(&minus).unwrap()) / (2.0 * step)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let net = BarrierNet::init(&[3, 6, 4, 1], trial).unwrap();
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let term = LossTerm { z, c_h: rng.random_range(-1.0..1.0), v: Some(v), c_n: rng.random_range(-1.0..1.0) };
            let g = net.param_grad(std::slice::from_ref(&term)).unwrap();
            for k in 0..net.num_params() {
                let fd = central_diff(&net, &term, k, 1e-5);
                assert!(rel_err(g[k], fd) < 1e-5, "trial {trial} param {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn value_term_is_backprop() {
        let net = BarrierNet::init(&[2, 4, 1], 3).unwrap();
        let z = [0.4, -0.9];
        let g = net.param_grad(&[LossTerm::value(&z, 1.0)]).unwrap();
        // Output layer gradient is the hidden activation vector.
        let hidden: Vec<f64> = (0..4)
            .map(|o| (net.weight(0)[2 * o] * z[0] + net.weight(0)[2 * o + 1] * z[1] + net.bias(0)[o]).tanh())
            .collect();
        let off = 3 * 4;
        for o in 0..4 {
            assert!((g[off + o] - hidden[o]).abs() < 1e-15);
        }
        assert_eq!(g[off + 4], 1.0);
    }

    #[test]
    fn zero_gradient_norm_convention() {
        let net = BarrierNet::zeros(&[2, 3, 1]).unwrap();
        let g = net.param_grad(&[LossTerm::grad_norm(&[0.1, 0.2], 1.0)]).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn lipschitz_bounds() {
        let one = BarrierNet::from_layers(&[1, 1], &[vec![3.0]], &[vec![0.0]]).unwrap();
        assert!((one.global_lipschitz_bound() - 3.0).abs() < 1e-12);
        let two = BarrierNet::from_layers(&[2, 2, 1], &[vec![2.0, 0.0, 0.0, -1.0], vec![0.0, 3.0]], &[vec![0.0; 2], vec![0.0]])
            .unwrap();
        assert!((two.global_lipschitz_bound() - 6.0).abs() < 1e-5);
        let net = BarrierNet::init(&[4, 32, 16, 1], 1).unwrap();
        let bound = net.global_lipschitz_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(norm(&net.grad_z(&z).unwrap()) <= bound);
        }
    }

    #[test]
    fn hessian_bound_dominates_sampled_curvature() {
        let net = BarrierNet::init(&[2, 8, 6, 1], 2).unwrap();
        let bound = net.hessian_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        for _ in 0..2000 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let dir: Vec<f64> = crate::hybrid::sample_sphere(2, &mut rng);
            let zp: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let zm: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
            let gp = net.grad_z(&zp).unwrap();
            let gm = net.grad_z(&zm).unwrap();
            let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            assert!(norm(&hv) <= bound);
        }
    }

    #[test]
    fn operator_norm_known_matrices() {
        assert_eq!(operator_norm(&[0.0; 4], 2, 2), 0.0);
        let diag = [5.0, 0.0, 0.0, 0.0, -2.0, 0.0];
        assert!((operator_norm(&diag, 2, 3) - 5.0).abs() < 1e-5);
        let rank_one = [1.0, 2.0, 2.0, 4.0];
        assert!((operator_norm(&rank_one, 2, 2) - 5.0).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = BarrierNet::init(&[4, 32, 16, 1], 12).unwrap();
        net.metadata.config_hash = "abc".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = BarrierNet::load(&path).unwrap();
        assert_eq!(back, net);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(net.forward(&z).unwrap().to_bits(), back.forward(&z).unwrap().to_bits());
        }
        let text = net.to_json().unwrap();
        assert!(matches!(BarrierNet::from_json(&text[..text.len() / 2]), Err(Error::Parse(_))));
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            BarrierNet::from_json(&bumped),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
        let mut c = net.to_checkpoint();
        c.weights[0].pop();
        assert!(matches!(BarrierNet::from_checkpoint(&c), Err(Error::DimensionMismatch { .. })));
    }

    fn net_and_point() -> impl Strategy<Value = (u64, Vec<f64>)> {
        (0u64..10_000, prop::collection::vec(-2.0f64..2.0, 4))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn grad_z_matches_finite_differences((seed, z) in net_and_point()) {
            let net = BarrierNet::init(&[4, 32, 16, 1], seed).unwrap();
            let g = net.grad_z(&z).unwrap();
            for i in 0..4 {
                let mut zp = z.clone();
                zp[i] += 1e-5;
                let mut zm = z.clone();
                zm[i] -= 1e-5;
                let fd = (net.forward(&zp).unwrap() - net.forward(&zm).unwrap()) / 2e-5;
                prop_assert!(rel_err(g[i], fd) < 1e-6, "{} vs {}", g[i], fd);
            }
        }

        #[test]
        fn param_grad_is_linear((seed, z) in net_and_point(), c in -5.0f64..5.0) {
            let net = BarrierNet::init(&[4, 8, 1], seed).unwrap();
            let v = vec![0.3, -0.1, 0.5, 1.0];
            let base = LossTerm { z: z.clone(), c_h: 0.4, v: Some(v.clone()), c_n: 0.2 };
            let scaled = LossTerm { z, c_h: 0.4 * c, v: Some(v.iter().map(|x| x * c).collect()), c_n: 0.2 * c };
            let g = net.param_grad(&[base]).unwrap();
            let gs = net.param_grad(&[scaled]).unwrap();
            for (a, b) in g.iter().zip(&gs) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn shrinking_weights_never_raises_bound(seed in 0u64..1000, layer in 0usize..3, s in 0.0f64..1.0) {
            let mut net = BarrierNet::init(&[4, 32, 16, 1], seed).unwrap();
            let before = net.global_lipschitz_bound();
            let start = net.offsets[layer];
            let len = net.dims[layer] * net.dims[layer + 1];
            net.params_mut()[start..start + len].iter_mut().for_each(|w| *w *= s);
            prop_assert!(net.global_lipschitz_bound() <= before);
        }

        #[test]
        fn second_differences_converge_quadratically(seed in 0u64..1000, z in prop::collection::vec(-1.0f64..1.0, 4)) {
            let net = BarrierNet::init(&[4, 16, 1], seed).unwrap();
            let e = [0.6, -0.3, 0.2, 0.7];
            let along = |h: f64| {
                let zp: Vec<f64> = z.iter().zip(&e).map(|(a, d)| a + h * d).collect();
                let zm: Vec<f64> = z.iter().zip(&e).map(|(a, d)| a - h * d).collect();
                (net.forward(&zp).unwrap() - 2.0 * net.forward(&z).unwrap() + net.forward(&zm).unwrap()) / (h * h)
            };
            // Richardson: the error of the second difference shrinks ~4x per halving.
            let (d1, d2, d3) = (along(0.08), along(0.04), along(0.02));
            let (e1, e2) = ((d1 - d2).abs(), (d2 - d3).abs());
            prop_assume!(e2 > 1e-9);
            prop_assert!(e1 / e2 > 3.0, "ratio {}", e1 / e2);
        }
    }
}
