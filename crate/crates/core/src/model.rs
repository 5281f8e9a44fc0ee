//! The multimodal captioning model: image and word projections into a shared
//! `h`-dimensional space, a GRU stack, and a softmax output layer.
//!
//! For caption `w_0 = <start>, w_1, …, w_N = <stop>`:
//!
//! ```text
//! v       = feature · W_I + b_I
//! h_{-1}  = Stack(v, 0)                 image enters once, from a zero state
//! s_t     = row w_t of W_s               t = 0 … N-1
//! h_t     = Stack(s_t, h_{t-1})
//! p_{t+1} = softmax(h_t · W_d + b_d)
//! loss    = −Σ_{t=1..N} ln p_t[w_t] + λ·‖θ‖²
//! ```
//!
//! `‖θ‖²` sums the squares of every weight matrix; biases are not penalized.

use crate::data::{validate_caption, CaptionDataset};
use crate::error::{Error, Result};
use crate::gru::{init_stack, param_count, stack_backward_into, stack_forward, GruParams, StackCache, StackKind, Unit, GRU_TENSOR_NAMES};
use crate::linalg::{init_uniform, log_softmax, softmax, Matrix, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub stack: StackKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_i: Matrix,
    pub b_i: Vector,
    pub w_s: Matrix,
    pub layers: Vec<GruParams>,
    pub w_d: Matrix,
    pub b_d: Vector,
    pub stack: StackKind,
}

/// Name, shape and regularization status of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub weight: bool,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            feature_dim,
            hidden,
            vocab_size,
            stack,
        } = dims;
        ModelParams {
            w_i: Matrix::zeros(feature_dim, hidden),
            b_i: Vector::zeros(hidden),
            w_s: Matrix::zeros(vocab_size, hidden),
            layers: (0..stack.layer_count())
                .map(|_| GruParams::zeros(hidden, hidden))
                .collect(),
            w_d: Matrix::zeros(hidden, vocab_size),
            b_d: Vector::zeros(vocab_size),
            stack,
        }
    }

    /// Uniform `[-scale, scale]` weights, zero biases.
    pub fn init(dims: ModelDims, scale: f64, rng: &mut Rng) -> Result<Self> {
        let ModelDims {
            feature_dim,
            hidden,
            vocab_size,
            stack,
        } = dims;
        if hidden == 0 || vocab_size == 0 || feature_dim == 0 {
            return Err(Error::Param(format!("model dimensions must be positive: {dims:?}")));
        }
        Ok(ModelParams {
            w_i: init_uniform(rng, feature_dim, hidden, scale)?,
            b_i: Vector::zeros(hidden),
            w_s: init_uniform(rng, vocab_size, hidden, scale)?,
            layers: init_stack(rng, stack, hidden, hidden, scale)?,
            w_d: init_uniform(rng, hidden, vocab_size, scale)?,
            b_d: Vector::zeros(vocab_size),
            stack,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.w_i.rows(),
            hidden: self.w_i.cols(),
            vocab_size: self.w_s.rows(),
            stack: self.stack,
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let ModelDims {
            feature_dim,
            hidden,
            vocab_size,
            stack,
        } = self.dims();
        let expect = |name: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::shape(name, format!("{}x{}", want.0, want.1), format!("{}x{}", got.0, got.1)))
            } else {
                Ok(())
            }
        };
        expect("b_I", (1, self.b_i.len()), (1, hidden))?;
        expect("W_s", self.w_s.shape(), (vocab_size, hidden))?;
        expect("W_d", self.w_d.shape(), (hidden, vocab_size))?;
        expect("b_d", (1, self.b_d.len()), (1, vocab_size))?;
        if self.layers.len() != stack.layer_count() {
            return Err(Error::Config(format!(
                "{stack} stack needs {} layers, got {}",
                stack.layer_count(),
                self.layers.len()
            )));
        }
        for l in &self.layers {
            l.check_shapes()?;
            expect("GRU layer", (l.input_dim(), l.hidden_dim()), (hidden, hidden))?;
        }
        let _ = feature_dim;
        Ok(())
    }

    /// Every tensor in a fixed order; [`ModelParams::tensor_data`] and
    /// [`ModelParams::tensor_data_mut`] follow the same order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let spec = |name: String, rows, cols, weight| TensorSpec { name, rows, cols, weight };
        let mut out = vec![
            spec("W_I".into(), self.w_i.rows(), self.w_i.cols(), true),
            spec("b_I".into(), 1, self.b_i.len(), false),
            spec("W_s".into(), self.w_s.rows(), self.w_s.cols(), true),
        ];
        for (j, layer) in self.layers.iter().enumerate() {
            for (name, (rows, cols, _)) in GRU_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push(spec(format!("gru{j}.{name}"), rows, cols, !name.starts_with('b')));
            }
        }
        out.push(spec("W_d".into(), self.w_d.rows(), self.w_d.cols(), true));
        out.push(spec("b_d".into(), 1, self.b_d.len(), false));
        out
    }

    pub fn tensor_data(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w_i.as_slice(), self.b_i.as_slice(), self.w_s.as_slice()];
        for layer in &self.layers {
            out.extend(layer.tensors().into_iter().map(|(_, _, d)| d));
        }
        out.push(self.w_d.as_slice());
        out.push(self.b_d.as_slice());
        out
    }

    pub fn tensor_data_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.w_i.as_mut_slice(),
            self.b_i.as_mut_slice(),
            self.w_s.as_mut_slice(),
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(self.w_d.as_mut_slice());
        out.push(self.b_d.as_mut_slice());
        out
    }

    /// `‖θ‖²` over weight matrices.
    pub fn weight_norm_sq(&self) -> f64 {
        self.w_i.frobenius_sq()
            + self.w_s.frobenius_sq()
            + self.w_d.frobenius_sq()
            + self.layers.iter().map(GruParams::weight_norm_sq).sum::<f64>()
    }

    /// Euclidean norm over all tensors (used for gradient clipping).
    pub fn global_norm(&self) -> f64 {
        self.tensor_data()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.tensor_data_mut().into_iter().zip(other.tensor_data()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    /// Trainable parameters: GRU stack (per [`param_count`]) plus the two
    /// embeddings and the output layer.
    pub fn param_count(&self) -> usize {
        let d = self.dims();
        param_count(Unit::Gru, d.hidden, d.hidden, d.stack)
            + d.feature_dim * d.hidden
            + d.hidden
            + d.vocab_size * d.hidden
            + d.hidden * d.vocab_size
            + d.vocab_size
    }
}

pub fn embed_image(params: &ModelParams, feature: &[f64]) -> Result<Vector> {
    if feature.len() != params.w_i.rows() {
        return Err(Error::shape("embed_image", params.w_i.rows(), feature.len()));
    }
    let mut v = params.w_i.vecmat(feature)?;
    v.add_assign(&params.b_i);
    Ok(v)
}

pub fn embed_word(params: &ModelParams, word: usize) -> Result<Vector> {
    if word >= params.w_s.rows() {
        return Err(Error::Index {
            index: word,
            size: params.w_s.rows(),
        });
    }
    Ok(params.w_s.row(word).into())
}

/// Per-layer stack state.
pub type StackState = Vec<Vector>;

fn zero_state(params: &ModelParams) -> StackState {
    vec![Vector::zeros(params.w_i.cols()); params.stack.layer_count()]
}

/// `h_{-1}`: the stack state after consuming the projected image from a zero
/// initial state.
pub fn image_state(params: &ModelParams, feature: &[f64]) -> Result<StackState> {
    let v = embed_image(params, feature)?;
    Ok(stack_forward(params.stack, &params.layers, &v, &zero_state(params))?.0)
}

/// Output logits `h · W_d + b_d` for the top-layer state.
pub fn logits(params: &ModelParams, state: &StackState) -> Result<Vector> {
    let top = state.last().ok_or_else(|| Error::Config("empty stack state".into()))?;
    let mut y = params.w_d.vecmat(top)?;
    y.add_assign(&params.b_d);
    Ok(y)
}

/// Feeds `word` and returns the new state with its output logits.
pub fn step(params: &ModelParams, state: &StackState, word: usize) -> Result<(StackState, Vector)> {
    let s = embed_word(params, word)?;
    let (next, _) = stack_forward(params.stack, &params.layers, &s, state)?;
    let y = logits(params, &next)?;
    Ok((next, y))
}

/// `ln p_{t+1}[w_{t+1}]` for every predicted position, starting from an
/// arbitrary `h_{-1}`.
pub fn caption_logprobs_from_state(params: &ModelParams, state: &StackState, caption: &[usize]) -> Result<Vec<f64>> {
    validate_caption(caption, params.w_s.rows())?;
    let mut state = state.clone();
    let mut out = Vec::with_capacity(caption.len() - 1);
    for pair in caption.windows(2) {
        let (next, y) = step(params, &state, pair[0])?;
        out.push(log_softmax(&y)[pair[1]]);
        state = next;
    }
    Ok(out)
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub feature: Vector,
    pub caption: Vec<usize>,
    pub image_cache: StackCache,
    /// `states[0]` is `h_{-1}`; `states[t + 1]` is `h_t`.
    pub states: Vec<StackState>,
    pub caches: Vec<StackCache>,
    /// `probs[t]` is `p_{t+1}`, the distribution over word `t + 1`.
    pub probs: Vec<Vector>,
    pub log_probs: Vec<f64>,
    pub data_loss: f64,
}

/// Returns the regularized loss and the trace for [`backward`].
pub fn forward(params: &ModelParams, feature: &[f64], caption: &[usize], l2_lambda: f64) -> Result<(f64, StepTrace)> {
    validate_caption(caption, params.w_s.rows())?;
    let v = embed_image(params, feature)?;
    let (h_img, image_cache) = stack_forward(params.stack, &params.layers, &v, &zero_state(params))?;

    let n = caption.len() - 1;
    let mut states = Vec::with_capacity(n + 1);
    let mut caches = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    states.push(h_img);
    for t in 0..n {
        let s = embed_word(params, caption[t])?;
        let (next, cache) = stack_forward(params.stack, &params.layers, &s, &states[t])?;
        let y = logits(params, &next)?;
        log_probs.push(log_softmax(&y)[caption[t + 1]]);
        probs.push(softmax(&y));
        caches.push(cache);
        states.push(next);
    }
    let data_loss = -log_probs.iter().sum::<f64>();
    let loss = data_loss + l2_lambda * params.weight_norm_sq();
    Ok((
        loss,
        StepTrace {
            feature: feature.into(),
            caption: caption.to_vec(),
            image_cache,
            states,
            caches,
            probs,
            log_probs,
            data_loss,
        },
    ))
}

/// Exact gradient of [`forward`]'s loss by backpropagation through time.
pub fn backward(params: &ModelParams, trace: &StepTrace, l2_lambda: f64) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let layers = params.stack.layer_count();
    let hidden = params.w_i.cols();
    let mut d_state: Vec<Vector> = vec![Vector::zeros(hidden); layers];

    for t in (0..trace.caches.len()).rev() {
        let mut dy = trace.probs[t].clone();
        dy[trace.caption[t + 1]] -= 1.0;
        let top = trace.states[t + 1].last().expect("nonempty state");
        grads.w_d.add_outer(top, &dy)?;
        grads.b_d.add_assign(&dy);
        let dh_top = params.w_d.matvec(&dy)?;
        d_state[layers - 1].add_assign(&dh_top);

        let (dx, d_prev) = stack_backward_into(params.stack, &params.layers, &trace.caches[t], &d_state, &mut grads.layers)?;
        let word = trace.caption[t];
        for (g, d) in grads.w_s.row_mut(word).iter_mut().zip(dx.iter()) {
            *g += d;
        }
        d_state = d_prev;
    }

    let (dv, _) = stack_backward_into(params.stack, &params.layers, &trace.image_cache, &d_state, &mut grads.layers)?;
    grads.w_i.add_outer(&trace.feature, &dv)?;
    grads.b_i.add_assign(&dv);

    if l2_lambda != 0.0 {
        let specs = params.tensor_specs();
        for ((spec, g), p) in specs.iter().zip(grads.tensor_data_mut()).zip(params.tensor_data()) {
            if spec.weight {
                for (gi, pi) in g.iter_mut().zip(p) {
                    *gi += 2.0 * l2_lambda * pi;
                }
            }
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub hidden_size: usize,
    pub stack: StackKind,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            l2_lambda: 1e-4,
            epochs: 10,
            seed: 0,
            max_grad_norm: None,
            hidden_size: 256,
            stack: StackKind::Single,
            init_scale: 0.08,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Param(format!("l2 lambda must be finite and non-negative, got {}", self.l2_lambda)));
        }
        if let Some(c) = self.max_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Param(format!("max grad norm must be positive, got {c}")));
            }
        }
        if self.hidden_size == 0 {
            return Err(Error::Param("hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// One SGD pass over every (image, caption) pair in a shuffled order drawn
/// from `rng`. Updates `params` in place after each pair and returns the
/// mean data loss (regularizer excluded) measured before each update.
pub fn sgd_epoch(params: &mut ModelParams, dataset: &CaptionDataset, config: &TrainConfig, rng: &mut Rng) -> Result<f64> {
    config.validate()?;
    let mut pairs: Vec<(usize, usize)> = dataset
        .records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..r.captions.len()).map(move |j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Param("cannot train on an empty dataset".into()));
    }
    rng.shuffle(&mut pairs);

    let mut total = 0.0;
    for &(i, j) in &pairs {
        let record = &dataset.records[i];
        let (_, trace) = forward(params, &record.feature, &record.captions[j], config.l2_lambda)?;
        total += trace.data_loss;
        let mut grads = backward(params, &trace, config.l2_lambda)?;
        if let Some(max) = config.max_grad_norm {
            let norm = grads.global_norm();
            if norm > max {
                let s = max / norm;
                for t in grads.tensor_data_mut() {
                    t.iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        params.axpy(-config.learning_rate, &grads);
    }
    Ok(total / pairs.len() as f64)
}

/// Initializes a model for `dataset` from `config.seed` and runs
/// `config.epochs` epochs, calling `on_epoch(epoch, mean_loss)` after each.
pub fn train(dataset: &CaptionDataset, config: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<(ModelParams, Vec<f64>)> {
    config.validate()?;
    let dims = ModelDims {
        feature_dim: dataset.feature_dim,
        hidden: config.hidden_size,
        vocab_size: dataset.vocab.len(),
        stack: config.stack,
    };
    let mut rng = Rng::new(config.seed);
    let mut params = ModelParams::init(dims, config.init_scale, &mut rng)?;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let loss = sgd_epoch(&mut params, dataset, config, &mut rng)?;
        on_epoch(epoch + 1, loss);
        losses.push(loss);
    }
    Ok((params, losses))
}
