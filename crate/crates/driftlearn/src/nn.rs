//! Minimal dense network kernel: bias-free MLP forward pass, reverse-mode
//! gradients, plain SGD with a multi-step learning-rate schedule, and a
//! finite-difference gradient checker.
//!
//! The model is a stack of bias-free linear layers with smooth activations
//! producing an embedding `Z`, topped by a bias-free linear head producing
//! logits `L = Z · Wᵀ`. Backward accepts upstream gradients on both `Z`
//! (metric-loss path, backbone only) and `L` (classification path, head and
//! backbone) and sums their contributions, so one backward pass serves both
//! loss paths of a training step.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, salt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// One bias-free dense layer: output = act(input · Wᵀ), W is (out, in).
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub activation: Activation,
}

/// Architecture of the model; weights are materialized by [`ModelState::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64, 64],
            embedding_dim: 32,
            num_classes: 6,
            activation: Activation::Tanh,
        }
    }
}

/// Forward/backward invocation counters, for asserting the
/// one-forward-one-backward-per-step contract in tests.
#[derive(Debug, Default)]
pub struct CallCounters {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl CallCounters {
    pub fn forward_calls(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn backward_calls(&self) -> u64 {
        self.backward.load(Ordering::Relaxed)
    }
}

impl Clone for CallCounters {
    fn clone(&self) -> Self {
        Self {
            forward: AtomicU64::new(self.forward_calls()),
            backward: AtomicU64::new(self.backward_calls()),
        }
    }
}

/// Backbone layers θ plus the bias-free head φ; together ω.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub layers: Vec<Layer>,
    /// (num_classes, embedding_dim); no bias term.
    pub head: Array2<f64>,
    pub iteration: u64,
    pub counters: CallCounters,
}

impl ModelState {
    pub fn new(layers: Vec<Layer>, head: Array2<f64>) -> Result<Self> {
        let model = Self {
            layers,
            head,
            iteration: 0,
            counters: CallCounters::default(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Scaled uniform fan-in initialization, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = seeding::rng(&[seed, salt::INIT]);
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(config.embedding_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(Layer {
                weights: init_matrix(&mut rng, fan_out, fan_in),
                activation: config.activation,
            });
        }
        let head = init_matrix(&mut rng, config.num_classes, config.embedding_dim);
        Self::new(layers, head)
    }

    fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.ncols() != dim {
                return Err(Error::Shape {
                    context: "layer chain",
                    expected: format!("layer {i} input {dim}"),
                    actual: format!("{}", layer.weights.ncols()),
                });
            }
            dim = layer.weights.nrows();
        }
        if self.head.ncols() != dim {
            return Err(Error::Shape {
                context: "head",
                expected: format!("embedding {dim}"),
                actual: format!("{}", self.head.ncols()),
            });
        }
        let finite = self
            .layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .chain(self.head.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("model weights must be finite".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.head.ncols(), |l| l.weights.ncols())
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum::<usize>() + self.head.len()
    }

    /// Run the network on a batch (rows are examples) and keep the
    /// intermediate activations for the matching backward pass.
    pub fn forward(&self, batch: &Array2<f64>) -> Result<ForwardPass> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "forward input",
                expected: format!("{} columns", self.input_dim()),
                actual: format!("{}", batch.ncols()),
            });
        }
        self.counters.forward.fetch_add(1, Ordering::Relaxed);
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for layer in &self.layers {
            let pre = activations.last().unwrap().dot(&layer.weights.t());
            activations.push(pre.mapv(|x| layer.activation.apply(x)));
        }
        let logits = activations.last().unwrap().dot(&self.head.t());
        Ok(ForwardPass {
            activations,
            logits,
        })
    }

    /// Reverse-mode gradients for the pass. `d_embeddings` feeds the backbone
    /// only; `d_logits` flows through the head into the backbone; both
    /// contributions are summed. Either may be `None` (treated as zero).
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_embeddings: Option<&Array2<f64>>,
        d_logits: Option<&Array2<f64>>,
    ) -> Result<GradientSet> {
        let z = pass.embeddings();
        let n = z.nrows();
        if let Some(dz) = d_embeddings {
            if dz.dim() != z.dim() {
                return Err(Error::Shape {
                    context: "backward d_embeddings",
                    expected: format!("{:?}", z.dim()),
                    actual: format!("{:?}", dz.dim()),
                });
            }
        }
        if let Some(dl) = d_logits {
            if dl.dim() != pass.logits.dim() {
                return Err(Error::Shape {
                    context: "backward d_logits",
                    expected: format!("{:?}", pass.logits.dim()),
                    actual: format!("{:?}", dl.dim()),
                });
            }
        }
        self.counters.backward.fetch_add(1, Ordering::Relaxed);

        let mut head_grad = Array2::zeros(self.head.dim());
        let mut d_hidden = match d_embeddings {
            Some(dz) => dz.clone(),
            None => Array2::zeros((n, z.ncols())),
        };
        if let Some(dl) = d_logits {
            head_grad = dl.t().dot(z);
            d_hidden = d_hidden + dl.dot(&self.head);
        }

        let mut backbone = vec![Array2::zeros((0, 0)); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let output = &pass.activations[i + 1];
            let d_pre = &d_hidden * &output.mapv(|y| layer.activation.derivative_from_output(y));
            backbone[i] = d_pre.t().dot(&pass.activations[i]);
            if i > 0 {
                d_hidden = d_pre.dot(&layer.weights);
            }
        }
        Ok(GradientSet {
            backbone,
            head: head_grad,
        })
    }
}

fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (1.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Cached activations of one forward invocation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    activations: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardPass {
    pub fn embeddings(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn logits_row(&self, i: usize) -> Array1<f64> {
        self.logits.row(i).to_owned()
    }
}

/// Per-parameter gradients, shape-congruent with the model: backbone part
/// ∇θ and head part ∇φ.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub backbone: Vec<Array2<f64>>,
    pub head: Array2<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            backbone: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.dim()))
                .collect(),
            head: Array2::zeros(model.head.dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.backbone
            .iter()
            .flat_map(|g| g.iter())
            .chain(self.head.iter())
            .all(|v| v.is_finite())
    }

    pub fn add(&mut self, other: &GradientSet) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            *a += b;
        }
        self.head += &other.head;
    }

    /// Drop the head part, keeping only ∇θ.
    pub fn backbone_only(mut self) -> Self {
        self.head.fill(0.0);
        self
    }
}

/// SGD with a multi-step schedule: the learning rate is multiplied by
/// `decay_factor` at each milestone iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub decay_factor: f64,
    pub iteration: u64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            base_lr: 0.0111,
            milestones: vec![1000, 2000],
            decay_factor: 0.1,
            iteration: 0,
        }
    }
}

impl OptimizerState {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config("decay_factor must be in (0,1)".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Pure function of the iteration counter: base_lr scaled once per
    /// passed milestone (a milestone counts as passed at its own iteration).
    pub fn current_lr(&self) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| self.iteration >= m)
            .count();
        let mut lr = self.base_lr;
        for _ in 0..passed {
            lr *= self.decay_factor;
        }
        lr
    }
}

/// In-place parameter update without touching the iteration counter.
pub fn apply_gradients(model: &mut ModelState, lr: f64, grads: &GradientSet) {
    for (layer, g) in model.layers.iter_mut().zip(&grads.backbone) {
        layer.weights.scaled_add(-lr, g);
    }
    model.head.scaled_add(-lr, &grads.head);
}

/// One SGD step at the optimizer's current learning rate; increments the
/// iteration counter. Non-finite gradients abort the step.
pub fn sgd_step(
    model: &mut ModelState,
    opt: &mut OptimizerState,
    grads: &GradientSet,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at iteration {}",
            opt.iteration
        )));
    }
    apply_gradients(model, opt.current_lr(), grads);
    opt.iteration += 1;
    model.iteration = opt.iteration;
    Ok(())
}

/// Central finite differences against analytic gradients over a random
/// subsample of parameters. Returns the maximum relative error, with small
/// denominators floored to keep near-zero gradients from dominating.
pub fn grad_check<F>(
    model: &ModelState,
    analytic: &GradientSet,
    loss: F,
    samples: usize,
    step: f64,
    seed: u64,
) -> f64
where
    F: Fn(&ModelState) -> f64,
{
    let mut rng = seeding::rng(&[seed, 0x6664]);
    let mut max_err = 0.0f64;
    let n_tensors = model.layers.len() + 1;
    for _ in 0..samples {
        let t = rng.random_range(0..n_tensors);
        let mut probe = model.clone();
        let (slot, expected) = if t < model.layers.len() {
            let len = model.layers[t].weights.len();
            let idx = rng.random_range(0..len);
            (
                (t, idx),
                analytic.backbone[t].as_slice().unwrap()[idx],
            )
        } else {
            let idx = rng.random_range(0..model.head.len());
            ((t, idx), analytic.head.as_slice().unwrap()[idx])
        };
        let read = |m: &mut ModelState, delta: f64| {
            let (t, idx) = slot;
            if t < m.layers.len() {
                m.layers[t].weights.as_slice_mut().unwrap()[idx] += delta;
            } else {
                m.head.as_slice_mut().unwrap()[idx] += delta;
            }
        };
        read(&mut probe, step);
        let plus = loss(&probe);
        read(&mut probe, -2.0 * step);
        let minus = loss(&probe);
        let numeric = (plus - minus) / (2.0 * step);
        let denom = expected.abs().max(numeric.abs()).max(1e-3);
        max_err = max_err.max((numeric - expected).abs() / denom);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_model(seed: u64, dims: (usize, usize, usize, usize)) -> ModelState {
        let (d, h, e, c) = dims;
        ModelState::init(
            &ModelConfig {
                input_dim: d,
                hidden: vec![h],
                embedding_dim: e,
                num_classes: c,
                activation: Activation::Tanh,
            },
            seed,
        )
        .unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = seeding::rng(&[seed, 0xbadc]);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let model = ModelState::new(
            vec![Layer {
                weights: Array2::zeros((3, 2)),
                activation: Activation::Tanh,
            }],
            Array2::zeros((4, 3)),
        )
        .unwrap();
        let pass = model.forward(&random_batch(1, 5, 2)).unwrap();
        assert!(pass.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_backbone_passes_input_through() {
        let model = ModelState::new(
            vec![Layer {
                weights: Array2::eye(3),
                activation: Activation::Linear,
            }],
            Array2::zeros((2, 3)),
        )
        .unwrap();
        let batch = array![[1.0, -2.0, 0.5]];
        let pass = model.forward(&batch).unwrap();
        assert_eq!(pass.embeddings(), &batch);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let model = random_model(3, (4, 5, 3, 6));
        let batch = random_batch(4, 7, 4);
        let pass = model.forward(&batch).unwrap();

        // Naive per-element recomputation.
        for n in 0..batch.nrows() {
            let mut h: Vec<f64> = batch.row(n).to_vec();
            for layer in &model.layers {
                let mut next = vec![0.0; layer.weights.nrows()];
                for (o, slot) in next.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (i, &x) in h.iter().enumerate() {
                        acc += layer.weights[[o, i]] * x;
                    }
                    *slot = layer.activation.apply(acc);
                }
                h = next;
            }
            for c in 0..model.num_classes() {
                let mut acc = 0.0;
                for (i, &x) in h.iter().enumerate() {
                    acc += model.head[[c, i]] * x;
                }
                assert_abs_diff_eq!(pass.logits()[[n, c]], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_shape_error() {
        let model = random_model(5, (4, 5, 3, 6));
        assert!(matches!(
            model.forward(&random_batch(0, 2, 7)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let model = random_model(6, (4, 5, 3, 6));
        let batch = random_batch(7, 3, 4);
        let pass = model.forward(&batch).unwrap();
        let grads = model.backward(&pass, None, None).unwrap();
        assert!(grads.backbone.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(grads.head.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_single_layer_closed_form() {
        // One linear layer as full model: logits = x·Wᵀ·Hᵀ. With dL = rows of
        // identity, head grad is Zᵀ per class and layer grad the outer product.
        let w = array![[0.5, -1.0], [2.0, 0.25]];
        let head = array![[1.0, 0.0], [0.0, 1.0]];
        let model = ModelState::new(
            vec![Layer {
                weights: w.clone(),
                activation: Activation::Linear,
            }],
            head,
        )
        .unwrap();
        let x = array![[3.0, -2.0]];
        let pass = model.forward(&x).unwrap();
        let dl = array![[1.0, 0.0]];
        let grads = model.backward(&pass, None, Some(&dl)).unwrap();
        // dP = dl · head = [1, 0]; grad_W = dPᵀ·x
        assert_eq!(grads.backbone[0], array![[3.0, -2.0], [0.0, 0.0]]);
        // grad_head = dlᵀ·Z with Z = x·Wᵀ = [3.5, 5.5]
        assert_eq!(grads.head, array![[3.5, 5.5], [0.0, 0.0]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = random_model(8, (4, 6, 3, 5));
        let batch = random_batch(9, 4, 4);
        // Scalar test loss: sum of squared logits plus sum of embeddings.
        let pass = model.forward(&batch).unwrap();
        let d_logits = pass.logits().mapv(|v| 2.0 * v);
        let d_z = pass.embeddings().mapv(|_| 1.0);
        let analytic = model.backward(&pass, Some(&d_z), Some(&d_logits)).unwrap();
        let loss = |m: &ModelState| {
            let p = m.forward(&batch).unwrap();
            p.logits().iter().map(|v| v * v).sum::<f64>()
                + p.embeddings().iter().sum::<f64>()
        };
        let err = grad_check(&model, &analytic, loss, 60, 1e-5, 42);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sgd_zero_grads_only_advances_counter() {
        let mut model = random_model(10, (4, 5, 3, 6));
        let before = model.clone();
        let zeros = GradientSet::zeros_like(&model);
        let mut opt = OptimizerState::default();
        sgd_step(&mut model, &mut opt, &zeros).unwrap();
        assert_eq!(opt.iteration, 1);
        assert_eq!(model.iteration, 1);
        for (a, b) in model.layers.iter().zip(&before.layers) {
            assert_eq!(a.weights, b.weights);
        }
        assert_eq!(model.head, before.head);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let mut model = ModelState::new(vec![], array![[1.0]]).unwrap();
        let mut opt = OptimizerState {
            base_lr: 0.1,
            milestones: vec![],
            decay_factor: 0.5,
            iteration: 0,
        };
        let grads = GradientSet {
            backbone: vec![],
            head: array![[2.0]],
        };
        sgd_step(&mut model, &mut opt, &grads).unwrap();
        assert_abs_diff_eq!(model.head[[0, 0]], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn sgd_update_is_linear_in_gradients() {
        let base = random_model(11, (3, 4, 2, 3));
        let batch = random_batch(12, 3, 3);
        let pass = base.forward(&batch).unwrap();
        let dl = pass.logits().mapv(|v| v.cos());
        let half = base
            .backward(&pass, None, Some(&dl.mapv(|v| 0.5 * v)))
            .unwrap();
        let full = base.backward(&pass, None, Some(&dl)).unwrap();

        let mut summed = half.clone();
        summed.add(&half);
        let mut opt1 = OptimizerState::default();
        let mut opt2 = OptimizerState::default();
        let mut a = base.clone();
        let mut b = base.clone();
        sgd_step(&mut a, &mut opt1, &summed).unwrap();
        sgd_step(&mut b, &mut opt2, &full).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_abs_diff_eq!(
                la.weights.as_slice().unwrap(),
                lb.weights.as_slice().unwrap(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut model = ModelState::new(vec![], array![[1.0]]).unwrap();
        let mut opt = OptimizerState::default();
        let grads = GradientSet {
            backbone: vec![],
            head: array![[f64::NAN]],
        };
        assert!(matches!(
            sgd_step(&mut model, &mut opt, &grads),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn lr_schedule_reproduces_configured_values() {
        let mut opt = OptimizerState::default();
        assert_eq!(opt.current_lr(), 0.0111);
        opt.iteration = 999;
        assert_eq!(opt.current_lr(), 0.0111);
        opt.iteration = 1000;
        assert_eq!(opt.current_lr(), 0.00111);
        opt.iteration = 2500;
        assert!((opt.current_lr() - 0.000111).abs() / 0.000111 < 1e-15);
    }

    #[test]
    fn milestones_must_increase() {
        let opt = OptimizerState {
            milestones: vec![1000, 1000],
            ..OptimizerState::default()
        };
        assert!(opt.validate().is_err());
    }

    #[test]
    fn head_is_bias_free() {
        let model = random_model(13, (16, 64, 32, 6));
        assert_eq!(model.head.len(), 6 * 32);
        let backbone_params: usize = model.layers.iter().map(|l| l.weights.len()).sum();
        assert_eq!(model.num_parameters(), backbone_params + 6 * 32);
    }

    #[test]
    fn grad_check_linear_loss_is_exact() {
        let model = random_model(14, (3, 4, 2, 3));
        // Loss linear in every parameter: sum of all weights.
        let analytic = GradientSet {
            backbone: model
                .layers
                .iter()
                .map(|l| Array2::ones(l.weights.dim()))
                .collect(),
            head: Array2::ones(model.head.dim()),
        };
        let loss = |m: &ModelState| {
            m.layers
                .iter()
                .flat_map(|l| l.weights.iter())
                .chain(m.head.iter())
                .sum::<f64>()
        };
        let err = grad_check(&model, &analytic, loss, 40, 1e-5, 7);
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::init(&ModelConfig::default(), 3).unwrap();
        let b = ModelState::init(&ModelConfig::default(), 3).unwrap();
        assert_eq!(a.head, b.head);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weights, lb.weights);
        }
    }

    #[test]
    fn forward_counter_counts_invocations() {
        let model = random_model(15, (4, 5, 3, 6));
        let batch = random_batch(16, 2, 4);
        assert_eq!(model.counters.forward_calls(), 0);
        let pass = model.forward(&batch).unwrap();
        let _ = model.forward(&batch).unwrap();
        assert_eq!(model.counters.forward_calls(), 2);
        let _ = model.backward(&pass, None, None).unwrap();
        assert_eq!(model.counters.backward_calls(), 1);
    }
}
