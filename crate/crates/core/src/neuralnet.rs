//! Small fully connected networks with hand-written backpropagation and
//! an Adam optimizer.
//!
//! Parameters of a network live in one flat vector, layer by layer, each
//! layer storing its `out x in` weight matrix row-major followed by its
//! bias. The output layer is always linear.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::measures::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Activation::Linear),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Lookup(other.to_string())),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    /// Start of each layer's weights in `params`.
    offsets: Vec<usize>,
}

/// Reusable buffers for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Mlp {
    /// Zero-initialized network. `sizes` lists input width, hidden widths
    /// and output width; an empty hidden list gives an affine map.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::param(format!(
                "layer sizes {sizes:?} need an input and an output of positive width"
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut total = 0;
        for w in sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; total],
            offsets,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        for l in 0..net.layers() {
            let (n_in, n_out) = (net.sizes[l], net.sizes[l + 1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let start = net.offsets[l];
            for w in &mut net.params[start..start + n_in * n_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Linear map `x -> x` on R^d.
    pub fn identity(d: usize) -> Result<Self> {
        let mut net = Self::zeros(&[d, d], Activation::Linear)?;
        for i in 0..d {
            net.params[i * d + i] = 1.0;
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Bias vector of the output layer.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.layers() - 1;
        let start = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        &mut self.params[start..start + self.sizes[l + 1]]
    }

    fn weights(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + n_in * n_out];
        let b = &self.params[start + n_in * n_out..start + n_in * n_out + n_out];
        (w, b)
    }

    pub fn workspace(&self) -> Workspace {
        let mut ws = Workspace::default();
        self.prepare(&mut ws);
        ws
    }

    fn prepare(&self, ws: &mut Workspace) {
        if ws.acts.len() != self.sizes.len()
            || ws.acts.iter().zip(&self.sizes).any(|(a, &s)| a.len() != s)
        {
            ws.acts = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        }
    }

    /// Forward pass caching every layer output in `ws`. Panics on a
    /// dimension mismatch; [`Mlp::forward`] is the checked entry point.
    pub fn forward_ws<'w>(&self, x: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        self.prepare(ws);
        assert_eq!(x.len(), self.sizes[0], "input dimension");
        ws.acts[0].copy_from_slice(x);
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let (w, b) = self.weights(l);
            let n_in = self.sizes[l];
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
                let z = bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *o = if l == last { z } else { self.activation.apply(z) };
            }
        }
        &ws.acts[self.layers()]
    }

    /// Backpropagates `upstream` (the gradient of a scalar with respect to
    /// the output of the last [`Mlp::forward_ws`] call on `ws`). Parameter
    /// gradients, when requested, are added into `grad`; the input gradient
    /// overwrites `input_grad`.
    pub fn backward_ws(
        &self,
        ws: &mut Workspace,
        upstream: &[f64],
        mut grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        assert_eq!(upstream.len(), self.output_dim(), "upstream dimension");
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "gradient length");
        }
        ws.delta.clear();
        ws.delta.extend_from_slice(upstream);
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, _) = self.weights(l);
            let start = self.offsets[l];
            let input = &ws.acts[l];
            if let Some(grad) = grad.as_deref_mut() {
                let (gw, gb) = grad[start..start + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (k, &dk) in ws.delta.iter().enumerate() {
                    if dk == 0.0 {
                        continue;
                    }
                    gb[k] += dk;
                    for (g, a) in gw[k * n_in..(k + 1) * n_in].iter_mut().zip(input) {
                        *g += dk * a;
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            ws.next_delta.clear();
            ws.next_delta.resize(n_in, 0.0);
            for (k, &dk) in ws.delta.iter().enumerate() {
                if dk == 0.0 {
                    continue;
                }
                for (nd, wv) in ws.next_delta.iter_mut().zip(&w[k * n_in..(k + 1) * n_in]) {
                    *nd += dk * wv;
                }
            }
            if l > 0 {
                for (nd, &a) in ws.next_delta.iter_mut().zip(input) {
                    *nd *= self.activation.slope_from_output(a);
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.next_delta);
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&ws.delta);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut ws = self.workspace();
        Ok(self.forward_ws(x, &mut ws).to_vec())
    }

    /// Gradients of `upstream . forward(x)` with respect to the parameters
    /// and to `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws);
        let mut grad = vec![0.0; self.params.len()];
        let mut input_grad = vec![0.0; self.input_dim()];
        self.backward_ws(&mut ws, upstream, Some(&mut grad), Some(&mut input_grad));
        Ok((grad, input_grad))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update using the learning rate from the
    /// config. `Ascend` follows the gradient instead of descending it.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], dir: Direction) {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, dir, lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], dir: Direction, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let sign = match dir {
            Direction::Descend => 1.0,
            Direction::Ascend => -1.0,
        };
        let c1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = sign * g;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Plain stochastic gradient steps or Adam, behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { t: u64 },
    Adam(AdamState),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamConfig),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { t: 0 },
            OptimizerKind::Adam(cfg) => Optimizer::Adam(AdamState::new(n_params, cfg)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], dir: Direction, lr: f64) {
        match self {
            Optimizer::Sgd { t } => {
                *t += 1;
                let sign = match dir {
                    Direction::Descend => -lr,
                    Direction::Ascend => lr,
                };
                for (p, g) in params.iter_mut().zip(grads) {
                    *p += sign * g;
                }
            }
            Optimizer::Adam(state) => state.step_with_lr(params, grads, dir, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::seeded_rng;

    /// Straightforward forward pass written without the workspace machinery.
    fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        let sizes = net.sizes();
        for l in 0..sizes.len() - 1 {
            let (ni, no) = (sizes[l], sizes[l + 1]);
            let p = net.params();
            let mut z = vec![0.0; no];
            for k in 0..no {
                z[k] = p[off + ni * no + k];
                for i in 0..ni {
                    z[k] += p[off + k * ni + i] * a[i];
                }
                if l + 1 < sizes.len() - 1 {
                    z[k] = match net.activation() {
                        Activation::Tanh => z[k].tanh(),
                        Activation::Relu => z[k].max(0.0),
                        Activation::Linear => z[k],
                    };
                }
            }
            off += ni * no + no;
            a = z;
        }
        a
    }

    #[test]
    fn parameter_count() {
        let net = Mlp::zeros(&[1, 4, 4, 1], Activation::Tanh).unwrap();
        assert_eq!(net.param_count(), (4 + 4) + (16 + 4) + (4 + 1));
        let net = Mlp::zeros(&[20, 50, 20], Activation::Tanh).unwrap();
        assert_eq!(net.param_count(), 20 * 50 + 50 + 50 * 20 + 20);
        assert!(Mlp::zeros(&[3], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_net_outputs_final_bias() {
        let mut net = Mlp::zeros(&[2, 3, 2], Activation::Tanh).unwrap();
        net.output_bias_mut().copy_from_slice(&[0.5, -1.5]);
        assert_eq!(net.forward(&[3.0, -7.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_net() {
        let net = Mlp::identity(3).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.25]).unwrap(), vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_naive_implementation() {
        let mut rng = seeded_rng(8);
        for act in [Activation::Tanh, Activation::Relu] {
            let net = Mlp::new(&[1, 4, 4, 1], act, &mut rng).unwrap();
            let fast = net.forward(&[0.7]).unwrap();
            let slow = naive_forward(&net, &[0.7]);
            assert!((fast[0] - slow[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[2, 1], Activation::Linear).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            net.backward(&[1.0, 2.0], &[1.0, 1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn linear_net_gradients() {
        // u(x) = theta . x
        let mut net = Mlp::zeros(&[3, 1], Activation::Linear).unwrap();
        net.params_mut()[..3].copy_from_slice(&[0.5, -1.0, 2.0]);
        let (pg, ig) = net.backward(&[1.0, 2.0, 3.0], &[1.0]).unwrap();
        assert_eq!(&pg[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(pg[3], 1.0);
        assert_eq!(ig, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(&[2, 5, 3], Activation::Tanh, &mut seeded_rng(1)).unwrap();
        let (pg, ig) = net.backward(&[0.3, -0.2], &[0.0; 3]).unwrap();
        assert!(pg.iter().chain(&ig).all(|&g| g == 0.0));
    }

    fn fd_check(net: &Mlp, x: &[f64], upstream: &[f64]) -> f64 {
        let (pg, ig) = net.backward(x, upstream).unwrap();
        let f = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for i in 0..net.param_count() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let fp = f(&p, x);
            p.params_mut()[i] -= 2.0 * h;
            let fm = f(&p, x);
            worst = worst.max(rel((fp - fm) / (2.0 * h), pg[i]));
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let fp = f(net, &xp);
            xp[i] -= 2.0 * h;
            let fm = f(net, &xp);
            worst = worst.max(rel((fp - fm) / (2.0 * h), ig[i]));
        }
        worst
    }

    #[test]
    fn small_net_matches_finite_differences() {
        let net = Mlp::new(&[1, 4, 1], Activation::Tanh, &mut seeded_rng(2)).unwrap();
        assert!(fd_check(&net, &[0.4], &[1.0]) < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, -2.0];
        st.step(&mut p, &[0.0, 0.0], Direction::Descend);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_constant_gradient_descends_monotonically() {
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        let mut prev = p[0];
        for _ in 0..1000 {
            st.step(&mut p, &[3.0], Direction::Descend);
            assert!(p[0] < prev);
            prev = p[0];
        }
        // with a constant gradient every bias-corrected step has size lr
        assert!((p[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_ascends_concave_function() {
        // maximize f(w) = -w^2 from w = 1
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(1, cfg);
        let mut w = vec![1.0];
        for _ in 0..10_000 {
            let g = -2.0 * w[0];
            st.step(&mut w, &[g], Direction::Ascend);
        }
        assert!(w[0].abs() < 1e-2, "w = {}", w[0]);
    }
}
