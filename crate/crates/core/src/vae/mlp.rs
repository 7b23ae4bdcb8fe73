//! Dense layers and their reverse-mode derivatives.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    /// x * sigmoid(x)
    Silu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Silu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Silu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 + pre * (1.0 - s))
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine map `y = act(W x + b)` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::invalid(format!(
                "layer {rows}x{cols} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite layer parameter".into()));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(rows: usize, cols: usize, activation: Activation) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            activation,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Writes the pre-activation into `pre` and the activation into `out`.
    #[inline]
    pub(crate) fn forward_into(&self, x: &[f64], pre: &mut [f64], out: &mut [f64]) {
        for (o, row) in self.weights.chunks_exact(self.cols).enumerate() {
            let z = self.bias[o] + dot(row, x);
            pre[o] = z;
            out[o] = self.activation.apply(z);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut pre = vec![0.0; self.rows];
        let mut out = vec![0.0; self.rows];
        self.forward_into(x, &mut pre, &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad` and writes `dL/dx` into `dx` (if given).
    ///
    /// `dy` is `dL/d(output)`; it is overwritten with `dL/d(pre-activation)`.
    #[inline]
    pub(crate) fn backward_into(
        &self,
        x: &[f64],
        pre: &[f64],
        dy: &mut [f64],
        grad: &mut Layer,
        dx: Option<&mut [f64]>,
    ) {
        for (d, p) in dy.iter_mut().zip(pre) {
            *d *= self.activation.derivative(*p);
        }
        for (o, grow) in grad.weights.chunks_exact_mut(self.cols).enumerate() {
            let d = dy[o];
            grad.bias[o] += d;
            axpy(d, x, grow);
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            for (o, row) in self.weights.chunks_exact(self.cols).enumerate() {
                axpy(dy[o], row, dx);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct MlpTrace {
    /// `inputs[l]` is the input of layer `l`; the final entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub(crate) fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace holds the input")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].rows != w[1].cols {
                return Err(Error::invalid(format!(
                    "layer output {} does not feed next layer input {}",
                    w[0].rows, w[1].cols
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols, l.activation))
                .collect(),
        }
    }

    pub(crate) fn new_trace(&self) -> MlpTrace {
        let mut inputs = vec![vec![0.0; self.input_dim()]];
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            inputs.push(vec![0.0; l.rows]);
            pre.push(vec![0.0; l.rows]);
        }
        MlpTrace { inputs, pre }
    }

    pub(crate) fn forward_trace(&self, x: &[f64], trace: &mut MlpTrace) {
        trace.inputs[0].copy_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = trace.inputs.split_at_mut(l + 1);
            layer.forward_into(&head[l], &mut trace.pre[l], &mut tail[0]);
        }
    }

    /// Backpropagates `dout = dL/d(output)` through the traced pass, accumulating into
    /// `grad` and returning `dL/d(input)` in `dx`.
    pub(crate) fn backward_trace(
        &self,
        trace: &MlpTrace,
        dout: &[f64],
        grad: &mut Mlp,
        dx: &mut [f64],
    ) {
        let mut dy = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let mut dprev = vec![0.0; layer.cols];
            layer.backward_into(
                &trace.inputs[l],
                &trace.pre[l],
                &mut dy,
                &mut grad.layers[l],
                Some(&mut dprev),
            );
            dy = dprev;
        }
        dx.copy_from_slice(&dy);
    }
}

/// Applies the network to `x`.
pub fn mlp_forward(params: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} entries, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut h = x.to_vec();
    for layer in &params.layers {
        h = layer.forward(&h);
    }
    Ok(h)
}
