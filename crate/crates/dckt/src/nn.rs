//! Dense neural-network substrate: fully-connected layers with ReLU,
//! softmax cross-entropy, exact reverse-mode gradients, and plain SGD
//! with weight decay.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

/// A fully-connected layer `y = activation(W x + b)`.
///
/// Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// Forward-pass bookkeeping one backward call needs.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    pre_activation: Matrix,
}

impl LayerCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Parameter gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrads {
            weights: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        self.weights.add_scaled(&other.weights, 1.0);
        for (a, b) in self.bias.iter_mut().zip(other.bias.iter()) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, weight_decay: f64, seed: u64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {learning_rate}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(SgdConfig {
            learning_rate,
            weight_decay,
            seed,
        })
    }
}

impl DenseLayer {
    /// Uniform fan-in/fan-out initialization with bound `sqrt(6/(in+out))`,
    /// zero bias. Deterministic for a given generator state.
    pub fn init<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer dims must be >= 1, got {in_dim}x{out_dim}"
            )));
        }
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Ok(DenseLayer {
            weights: Matrix::from_vec(out_dim, in_dim, data)?,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch(format!(
                "bias length {} vs {} weight rows",
                bias.len(),
                weights.rows()
            )));
        }
        if !weights.is_finite() || !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Row-wise `activation(W x + b)` over a batch.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, LayerCache)> {
        if input.cols() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                input.cols()
            )));
        }
        let n = input.rows();
        let mut pre = Matrix::zeros(n, self.out_dim());
        for r in 0..n {
            let x = input.row(r);
            let out = pre.row_mut(r);
            for (o, out_v) in out.iter_mut().enumerate() {
                let w = self.weights.row(o);
                let mut acc = self.bias[o];
                for (wi, xi) in w.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                *out_v = acc;
            }
        }
        let mut post = pre.clone();
        for v in post.data_mut() {
            *v = self.activation.apply(*v);
        }
        let cache = LayerCache {
            input: input.clone(),
            pre_activation: pre,
        };
        Ok((post, cache))
    }

    /// Exact gradients of the forward map. `grad_output` is the gradient at
    /// the post-activation output.
    pub fn backward(
        &self,
        grad_output: &Matrix,
        cache: &LayerCache,
    ) -> Result<(Matrix, LayerGrads)> {
        if cache.input.cols() != self.in_dim()
            || cache.pre_activation.cols() != self.out_dim()
            || cache.input.rows() != cache.pre_activation.rows()
        {
            return Err(Error::DimensionMismatch(
                "cache does not match this layer".into(),
            ));
        }
        if grad_output.cols() != self.out_dim() || grad_output.rows() != cache.input.rows() {
            return Err(Error::DimensionMismatch(format!(
                "grad_output {}x{} vs expected {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                cache.input.rows(),
                self.out_dim()
            )));
        }
        let n = cache.input.rows();
        let mut grad_w = Matrix::zeros(self.out_dim(), self.in_dim());
        let mut grad_b = vec![0.0; self.out_dim()];
        let mut grad_in = Matrix::zeros(n, self.in_dim());
        for r in 0..n {
            let x = cache.input.row(r);
            let pre = cache.pre_activation.row(r);
            let go = grad_output.row(r);
            for o in 0..self.out_dim() {
                let gz = go[o] * self.activation.derivative(pre[o]);
                if gz == 0.0 {
                    continue;
                }
                grad_b[o] += gz;
                let wrow = self.weights.row(o);
                let gwrow = grad_w.row_mut(o);
                let girow = grad_in.row_mut(r);
                for i in 0..self.in_dim() {
                    gwrow[i] += gz * x[i];
                    girow[i] += gz * wrow[i];
                }
            }
        }
        Ok((grad_in, LayerGrads { weights: grad_w, bias: grad_b }))
    }

    /// `p <- p - lr * (grad + weight_decay * p)` for every parameter.
    pub fn apply_update(&mut self, grads: &LayerGrads, cfg: &SgdConfig) -> Result<()> {
        if !grads.weights.same_shape(&self.weights) || grads.bias.len() != self.bias.len() {
            return Err(Error::DimensionMismatch(
                "gradient shape does not match layer".into(),
            ));
        }
        let lr = cfg.learning_rate;
        let wd = cfg.weight_decay;
        for (p, g) in self.weights.data_mut().iter_mut().zip(grads.weights.data()) {
            *p -= lr * (g + wd * *p);
        }
        for (p, g) in self.bias.iter_mut().zip(grads.bias.iter()) {
            *p -= lr * (g + wd * *p);
        }
        Ok(())
    }
}

/// One SGD update over a set of layers with shape-matched gradients.
pub fn sgd_step(layers: &mut [&mut DenseLayer], grads: &[LayerGrads], cfg: &SgdConfig) -> Result<()> {
    if layers.len() != grads.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} layers vs {} gradient sets",
            layers.len(),
            grads.len()
        )));
    }
    for (layer, g) in layers.iter_mut().zip(grads.iter()) {
        layer.apply_update(g, cfg)?;
    }
    Ok(())
}

/// Row-wise stable softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean negative log-likelihood over the batch and its logit gradient
/// `(softmax - onehot) / batch_size`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for batch of {}",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Empty("softmax_cross_entropy batch".into()));
    }
    let num_classes = logits.cols();
    for &y in labels {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
    }
    let probs = softmax(logits);
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        loss -= probs[(r, y)].max(1e-12).ln();
        grad[(r, y)] -= 1.0;
    }
    for v in grad.data_mut() {
        *v /= n;
    }
    Ok((loss / n, grad))
}

/// Named per-layer record of one forward pass: post-activations plus the
/// caches backward needs. Entries keep insertion order.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    entries: Vec<(String, Matrix, Option<LayerCache>)>,
}

impl ForwardTrace {
    pub fn new(batch: usize) -> Self {
        ForwardTrace {
            batch,
            entries: Vec::new(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn push(&mut self, name: &str, post: Matrix, cache: Option<LayerCache>) {
        assert_eq!(post.rows(), self.batch, "trace batch dimension mismatch");
        self.entries.push((name.to_string(), post, cache));
    }

    pub fn activation(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, m, _)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("trace has no layer `{name}`")))
    }

    pub fn cache(&self, name: &str) -> Result<&LayerCache> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .and_then(|(_, _, c)| c.as_ref())
            .ok_or_else(|| Error::InvalidArgument(format!("trace has no cache for `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }
}
