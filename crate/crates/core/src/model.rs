//! Post-norm transformer encoder with a cell-selection pointer head.
//!
//! Headers and cells are embedded as the mean of their token embeddings;
//! position and segment embeddings are added on top (each can be switched
//! off). After the encoder, every cell position gets the score
//! `selector · hidden + bias`, and a softmax over cell positions only gives
//! the answer distribution.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{target_position, EncodedInput};
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, layer_norm_backward, GradCheckReport, layer_norm_forward, matmul, matmul_nt, matmul_tn_acc,
    softmax_backward, softmax_masked, softmax_masked_in_place, LayerNormCache, Matrix, Scalar,
};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Probability floor inside the loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub use_position_embeddings: bool,
    pub use_segment_embeddings: bool,
}

impl ModelConfig {
    /// d=64, L=2, 4 heads, d_ff=256, max_len=256.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 256,
            vocab_size,
            use_position_embeddings: true,
            use_segment_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameters of one encoder layer. Weights are stored `d_in x d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub query_w: Matrix<T>,
    pub query_b: Matrix<T>,
    pub key_w: Matrix<T>,
    pub key_b: Matrix<T>,
    pub value_w: Matrix<T>,
    pub value_b: Matrix<T>,
    pub output_w: Matrix<T>,
    pub output_b: Matrix<T>,
    pub attn_norm_gain: Matrix<T>,
    pub attn_norm_bias: Matrix<T>,
    pub ff_in_w: Matrix<T>,
    pub ff_in_b: Matrix<T>,
    pub ff_out_w: Matrix<T>,
    pub ff_out_b: Matrix<T>,
    pub ff_norm_gain: Matrix<T>,
    pub ff_norm_bias: Matrix<T>,
}

const LAYER_GROUPS: [&str; 16] = [
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "attention.norm.gain",
    "attention.norm.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn.norm.gain",
    "ffn.norm.bias",
];

impl<T: Scalar> LayerParams<T> {
    fn zeros(d: usize, d_ff: usize) -> Self {
        let z = Matrix::zeros;
        LayerParams {
            query_w: z(d, d),
            query_b: z(1, d),
            key_w: z(d, d),
            key_b: z(1, d),
            value_w: z(d, d),
            value_b: z(1, d),
            output_w: z(d, d),
            output_b: z(1, d),
            attn_norm_gain: z(1, d),
            attn_norm_bias: z(1, d),
            ff_in_w: z(d, d_ff),
            ff_in_b: z(1, d_ff),
            ff_out_w: z(d_ff, d),
            ff_out_b: z(1, d),
            ff_norm_gain: z(1, d),
            ff_norm_bias: z(1, d),
        }
    }

    fn fields(&self) -> [&Matrix<T>; 16] {
        [
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.key_b,
            &self.value_w,
            &self.value_b,
            &self.output_w,
            &self.output_b,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ff_in_w,
            &self.ff_in_b,
            &self.ff_out_w,
            &self.ff_out_b,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix<T>; 16] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.output_w,
            &mut self.output_b,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ff_in_w,
            &mut self.ff_in_b,
            &mut self.ff_out_w,
            &mut self.ff_out_b,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
        ]
    }
}

/// All learnable tensors. The same type doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embeddings: Matrix<T>,
    pub position_embeddings: Matrix<T>,
    pub segment_embeddings: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_selector: Matrix<T>,
    pub head_bias: Matrix<T>,
}

/// Layer number (1-based) a group belongs to, if any.
pub fn group_layer(name: &str) -> Option<usize> {
    name.strip_prefix("layer.")?.split('.').next()?.parse().ok()
}

/// Parameter group names in declaration (and checkpoint) order.
pub fn group_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "embeddings.token".to_string(),
        "embeddings.position".to_string(),
        "embeddings.segment".to_string(),
    ];
    for l in 1..=config.n_layers {
        names.extend(LAYER_GROUPS.iter().map(|g| format!("layer.{l}.{g}")));
    }
    names.push("head.selector".into());
    names.push("head.bias".into());
    names
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        ModelParams {
            token_embeddings: Matrix::zeros(config.vocab_size, d),
            position_embeddings: Matrix::zeros(config.max_len, d),
            segment_embeddings: Matrix::zeros(2, d),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(d, config.d_ff))
                .collect(),
            head_selector: Matrix::zeros(1, d),
            head_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.groups_mut().into_iter().for_each(|(_, m)| m.fill_zero());
        z
    }

    /// `(name, tensor)` pairs in declaration order.
    pub fn groups(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embeddings),
            ("embeddings.position".to_string(), &self.position_embeddings),
            ("embeddings.segment".to_string(), &self.segment_embeddings),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (g, m) in LAYER_GROUPS.iter().zip(layer.fields()) {
                out.push((format!("layer.{}.{g}", l + 1), m));
            }
        }
        out.push(("head.selector".into(), &self.head_selector));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &mut self.token_embeddings),
            ("embeddings.position".to_string(), &mut self.position_embeddings),
            ("embeddings.segment".to_string(), &mut self.segment_embeddings),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (g, m) in LAYER_GROUPS.iter().zip(layer.fields_mut()) {
                out.push((format!("layer.{}.{g}", l + 1), m));
            }
        }
        out.push(("head.selector".into(), &mut self.head_selector));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn group(&self, name: &str) -> Option<&Matrix<T>> {
        self.groups().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.groups_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            token_embeddings: self.token_embeddings.cast(),
            position_embeddings: self.position_embeddings.cast(),
            segment_embeddings: self.segment_embeddings.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut out = LayerParams::zeros(0, 0);
                    for (dst, src) in out.fields_mut().into_iter().zip(l.fields()) {
                        *dst = src.cast();
                    }
                    out
                })
                .collect(),
            head_selector: self.head_selector.cast(),
            head_bias: self.head_bias.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, m)| m.is_finite())
    }

    pub fn n_values(&self) -> usize {
        self.groups().iter().map(|(_, m)| m.data().len()).sum()
    }
}

fn is_weight(name: &str) -> bool {
    name.starts_with("embeddings.") || name.ends_with(".weight") || name == "head.selector"
}

/// Deterministic initialization: weights and embeddings from a normal
/// with standard deviation 0.02 truncated at ±2σ; biases zero, norm gains one.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    init_params_scaled(config, seed, INIT_STD, INIT_STD)
}

/// Initialization used by gradient checks. Unit-scale embedding tables keep
/// the first layer norm away from its high-curvature region, so central
/// differences at eps = 1e-3 stay accurate.
pub const GRADCHECK_WEIGHT_STD: f64 = 0.05;
pub const GRADCHECK_EMBEDDING_STD: f64 = 1.0;

/// [`init_params`] with separate scales for the embedding tables and for the
/// remaining weights.
pub fn init_params_scaled<T: Scalar>(
    config: &ModelConfig,
    seed: u64,
    weight_std: f64,
    embedding_std: f64,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    for (name, m) in params.groups_mut() {
        if is_weight(&name) {
            let std = if name.starts_with("embeddings.") {
                embedding_std
            } else {
                weight_std
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            for v in m.data_mut() {
                let x = loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                };
                *v = T::from_f64_lossy(x);
            }
        } else if name.ends_with(".gain") {
            m.data_mut().iter_mut().for_each(|v| *v = T::one());
        }
    }
    Ok(params)
}

/// Groups updated during training when the first `freeze_first_k` layers are
/// frozen. Embeddings are trainable only when nothing is frozen; the head is
/// always trainable.
pub fn trainable_set(config: &ModelConfig, freeze_first_k: usize) -> Result<BTreeSet<String>> {
    if freeze_first_k > config.n_layers {
        return Err(Error::Config(format!(
            "freeze_first_k {freeze_first_k} exceeds {} layers",
            config.n_layers
        )));
    }
    Ok(group_names(config)
        .into_iter()
        .filter(|name| match group_layer(name) {
            Some(l) => l > freeze_first_k,
            None if name.starts_with("embeddings.") => freeze_first_k == 0,
            None => true,
        })
        .collect())
}

/// Input embeddings: mean token embedding per item, plus position and
/// segment embeddings when enabled.
pub fn embed<T: Scalar>(
    encoded: &EncodedInput,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Matrix<T>> {
    let len = encoded.len();
    if len > config.max_len {
        return Err(Error::IndexOutOfRange {
            what: "sequence length",
            index: len,
            len: config.max_len,
        });
    }
    let d = config.d_model;
    let mut x = Matrix::zeros(len, d);
    for (p, item) in encoded.items.iter().enumerate() {
        let ids = item.token_ids();
        let inv = T::one() / T::from_usize(ids.len()).expect("bag size fits");
        let row = x.row_mut(p);
        for &id in ids {
            if id as usize >= config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id as usize,
                    len: config.vocab_size,
                });
            }
            for (o, e) in row.iter_mut().zip(params.token_embeddings.row(id as usize)) {
                *o += *e * inv;
            }
        }
        if config.use_position_embeddings {
            let pos = encoded.position_ids[p];
            if pos >= config.max_len {
                return Err(Error::IndexOutOfRange {
                    what: "position id",
                    index: pos,
                    len: config.max_len,
                });
            }
            for (o, e) in row.iter_mut().zip(params.position_embeddings.row(pos)) {
                *o += *e;
            }
        }
        if config.use_segment_embeddings {
            let seg = encoded.segment_ids[p] as usize;
            for (o, e) in row.iter_mut().zip(params.segment_embeddings.row(seg)) {
                *o += *e;
            }
        }
    }
    Ok(x)
}

/// Activations saved by one layer's forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    input: Matrix<T>,
    q_heads: Vec<Matrix<T>>,
    k_heads: Vec<Matrix<T>>,
    v_heads: Vec<Matrix<T>>,
    /// Attention probabilities per head, `L x L`, rows sum to one.
    pub attention: Vec<Matrix<T>>,
    context: Matrix<T>,
    attn_norm: LayerNormCache<T>,
    attn_out: Matrix<T>,
    ff_pre: Matrix<T>,
    ff_act: Matrix<T>,
    ff_norm: LayerNormCache<T>,
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = matmul(x, w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    grad_out: &Matrix<T>,
    dw: &mut Matrix<T>,
    db: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    matmul_tn_acc(x, grad_out, dw)?;
    grad_out.accumulate_column_sums(db)?;
    matmul_nt(grad_out, w)
}

fn split_heads<T: Scalar>(x: &Matrix<T>, n_heads: usize) -> Vec<Matrix<T>> {
    let dh = x.cols() / n_heads;
    (0..n_heads)
        .map(|h| {
            let mut m = Matrix::zeros(x.rows(), dh);
            for i in 0..x.rows() {
                m.row_mut(i).copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
            }
            m
        })
        .collect()
}

fn merge_head<T: Scalar>(dst: &mut Matrix<T>, head: &Matrix<T>, h: usize) {
    let dh = head.cols();
    for i in 0..head.rows() {
        dst.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(head.row(i));
    }
}

fn layer_forward<T: Scalar>(
    x: &Matrix<T>,
    p: &LayerParams<T>,
    config: &ModelConfig,
) -> Result<(Matrix<T>, LayerCache<T>)> {
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let scale = T::one() / T::from_usize(config.head_dim()).expect("fits").sqrt();
    let q_heads = split_heads(&linear(x, &p.query_w, &p.query_b)?, config.n_heads);
    let k_heads = split_heads(&linear(x, &p.key_w, &p.key_b)?, config.n_heads);
    let v_heads = split_heads(&linear(x, &p.value_w, &p.value_b)?, config.n_heads);

    let mut context = Matrix::zeros(x.rows(), config.d_model);
    let mut attention = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let mut scores = matmul_nt(&q_heads[h], &k_heads[h])?;
        scores.scale(scale);
        for i in 0..scores.rows() {
            softmax_masked_in_place(scores.row_mut(i), None)?;
        }
        merge_head(&mut context, &matmul(&scores, &v_heads[h])?, h);
        attention.push(scores);
    }
    let mut residual = linear(&context, &p.output_w, &p.output_b)?;
    residual.add_assign(x)?;
    let (attn_out, attn_norm) =
        layer_norm_forward(&residual, &p.attn_norm_gain, &p.attn_norm_bias, eps)?;

    let ff_pre = linear(&attn_out, &p.ff_in_w, &p.ff_in_b)?;
    let mut ff_act = ff_pre.clone();
    ff_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut residual = linear(&ff_act, &p.ff_out_w, &p.ff_out_b)?;
    residual.add_assign(&attn_out)?;
    let (out, ff_norm) = layer_norm_forward(&residual, &p.ff_norm_gain, &p.ff_norm_bias, eps)?;

    Ok((
        out,
        LayerCache {
            input: x.clone(),
            q_heads,
            k_heads,
            v_heads,
            attention,
            context,
            attn_norm,
            attn_out,
            ff_pre,
            ff_act,
            ff_norm,
        },
    ))
}

fn layer_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    p: &LayerParams<T>,
    cache: &LayerCache<T>,
    g: &mut LayerParams<T>,
    config: &ModelConfig,
) -> Result<Matrix<T>> {
    let scale = T::one() / T::from_usize(config.head_dim()).expect("fits").sqrt();

    // Feed-forward block.
    let d_res = layer_norm_backward(
        &cache.ff_norm,
        &p.ff_norm_gain,
        grad_out,
        &mut g.ff_norm_gain,
        &mut g.ff_norm_bias,
    );
    let mut d_act = linear_backward(&cache.ff_act, &p.ff_out_w, &d_res, &mut g.ff_out_w, &mut g.ff_out_b)?;
    for (d, pre) in d_act.data_mut().iter_mut().zip(cache.ff_pre.data()) {
        *d *= gelu_grad(*pre);
    }
    let mut d_attn_out =
        linear_backward(&cache.attn_out, &p.ff_in_w, &d_act, &mut g.ff_in_w, &mut g.ff_in_b)?;
    d_attn_out.add_assign(&d_res)?;

    // Attention block.
    let d_res = layer_norm_backward(
        &cache.attn_norm,
        &p.attn_norm_gain,
        &d_attn_out,
        &mut g.attn_norm_gain,
        &mut g.attn_norm_bias,
    );
    let d_context =
        linear_backward(&cache.context, &p.output_w, &d_res, &mut g.output_w, &mut g.output_b)?;
    let d_ctx_heads = split_heads(&d_context, config.n_heads);
    let (rows, d) = (cache.input.rows(), config.d_model);
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    for h in 0..config.n_heads {
        let attn = &cache.attention[h];
        let d_attn = matmul_nt(&d_ctx_heads[h], &cache.v_heads[h])?;
        let mut dv_h = Matrix::zeros(rows, config.head_dim());
        matmul_tn_acc(attn, &d_ctx_heads[h], &mut dv_h)?;
        let mut d_scores = Matrix::zeros(rows, rows);
        for i in 0..rows {
            softmax_backward(attn.row(i), d_attn.row(i), d_scores.row_mut(i));
        }
        d_scores.scale(scale);
        let dq_h = matmul(&d_scores, &cache.k_heads[h])?;
        let mut dk_h = Matrix::zeros(rows, config.head_dim());
        matmul_tn_acc(&d_scores, &cache.q_heads[h], &mut dk_h)?;
        merge_head(&mut dq, &dq_h, h);
        merge_head(&mut dk, &dk_h, h);
        merge_head(&mut dv, &dv_h, h);
    }
    let mut dx = d_res;
    dx.add_assign(&linear_backward(&cache.input, &p.query_w, &dq, &mut g.query_w, &mut g.query_b)?)?;
    dx.add_assign(&linear_backward(&cache.input, &p.key_w, &dk, &mut g.key_w, &mut g.key_b)?)?;
    dx.add_assign(&linear_backward(&cache.input, &p.value_w, &dv, &mut g.value_w, &mut g.value_b)?)?;
    Ok(dx)
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub hidden: Matrix<T>,
}

fn check_input<T: Scalar>(x: &Matrix<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<()> {
    if x.cols() != config.d_model || params.layers.len() != config.n_layers {
        return Err(Error::Shape {
            op: "encoder_forward",
            left: x.shape(),
            right: (params.layers.len(), config.d_model),
        });
    }
    Ok(())
}

/// Runs the encoder stack and keeps the activations for backpropagation.
pub fn encoder_forward_cached<T: Scalar>(
    x: &Matrix<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<ForwardCache<T>> {
    check_input(x, params, config)?;
    let mut hidden = x.clone();
    let mut layers = Vec::with_capacity(config.n_layers);
    for p in &params.layers {
        let (out, cache) = layer_forward(&hidden, p, config)?;
        layers.push(cache);
        hidden = out;
    }
    Ok(ForwardCache { layers, hidden })
}

pub fn encoder_forward<T: Scalar>(
    x: &Matrix<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Matrix<T>> {
    encoder_forward_cached(x, params, config).map(|c| c.hidden)
}

/// Pointer head output.
#[derive(Clone, Debug)]
pub struct PointerOutput<T> {
    /// Score per linear cell index.
    pub cell_logits: Vec<T>,
    /// Probability per linear cell index.
    pub cell_probs: Vec<T>,
    /// Probabilities over every sequence position; zero off cell positions.
    pub sequence_probs: Matrix<T>,
}

impl<T: Scalar> PointerOutput<T> {
    /// Most probable cell (lowest index on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.cell_logits)
    }
}

pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn pointer_logits<T: Scalar>(
    hidden: &Matrix<T>,
    encoded: &EncodedInput,
    params: &ModelParams<T>,
) -> Result<PointerOutput<T>> {
    if hidden.rows() != encoded.len() || hidden.cols() != params.head_selector.cols() {
        return Err(Error::Shape {
            op: "pointer_logits",
            left: hidden.shape(),
            right: (encoded.len(), params.head_selector.cols()),
        });
    }
    let bias = params.head_bias.get(0, 0);
    let selector = params.head_selector.data();
    let mut scores = Matrix::zeros(1, hidden.rows());
    let mut cell_logits = Vec::with_capacity(encoded.n_cells());
    for &p in &encoded.cell_positions {
        let s = hidden
            .row(p)
            .iter()
            .zip(selector)
            .fold(T::zero(), |acc, (h, w)| acc + *h * *w)
            + bias;
        scores.set(0, p, s);
        cell_logits.push(s);
    }
    let sequence_probs = softmax_masked(&scores, &encoded.cell_mask())?;
    let cell_probs = encoded
        .cell_positions
        .iter()
        .map(|&p| sequence_probs.get(0, p))
        .collect();
    Ok(PointerOutput {
        cell_logits,
        cell_probs,
        sequence_probs,
    })
}

/// `−ln p[gold]` with `p` floored at 1e−12.
pub fn loss<T: Scalar>(probs: &[T], gold_cell: usize) -> Result<T> {
    let p = *probs.get(gold_cell).ok_or(Error::IndexOutOfRange {
        what: "gold cell",
        index: gold_cell,
        len: probs.len(),
    })?;
    Ok(-p.max(T::from_f64_lossy(PROB_FLOOR)).ln())
}

/// Gradient of [`loss`] with respect to the cell logits: `p − onehot(gold)`,
/// or zero when the floor is active.
pub fn loss_grad_logits<T: Scalar>(probs: &[T], gold_cell: usize) -> Vec<T> {
    if probs[gold_cell] < T::from_f64_lossy(PROB_FLOOR) {
        return vec![T::zero(); probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| if k == gold_cell { p - T::one() } else { p })
        .collect()
}

/// Result of a full forward pass on one example.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub cache: ForwardCache<T>,
    pub pointer: PointerOutput<T>,
}

/// Embedding, encoder and pointer head in one call.
pub fn forward<T: Scalar>(
    encoded: &EncodedInput,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Forward<T>> {
    let x = embed(encoded, params, config)?;
    let cache = encoder_forward_cached(&x, params, config)?;
    let pointer = pointer_logits(&cache.hidden, encoded, params)?;
    Ok(Forward { cache, pointer })
}

/// Backpropagates the loss for `gold_cell` and accumulates into `grads`.
///
/// Layers `1..=freeze_first_k` and (when `freeze_first_k > 0`) the
/// embeddings receive no gradient.
pub fn backward<T: Scalar>(
    encoded: &EncodedInput,
    params: &ModelParams<T>,
    config: &ModelConfig,
    fwd: &Forward<T>,
    gold_cell: usize,
    freeze_first_k: usize,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    if gold_cell >= encoded.n_cells() {
        return Err(Error::IndexOutOfRange {
            what: "gold cell",
            index: gold_cell,
            len: encoded.n_cells(),
        });
    }
    let d_logits = loss_grad_logits(&fwd.pointer.cell_probs, gold_cell);
    let hidden = &fwd.cache.hidden;
    let mut d_hidden = Matrix::zeros(hidden.rows(), hidden.cols());
    for (k, &p) in encoded.cell_positions.iter().enumerate() {
        let dl = d_logits[k];
        for (g, h) in grads.head_selector.data_mut().iter_mut().zip(hidden.row(p)) {
            *g += dl * *h;
        }
        grads.head_bias.data_mut()[0] += dl;
        for (dh, w) in d_hidden.row_mut(p).iter_mut().zip(params.head_selector.data()) {
            *dh = dl * *w;
        }
    }

    let mut d = d_hidden;
    for l in (freeze_first_k..config.n_layers).rev() {
        d = layer_backward(&d, &params.layers[l], &fwd.cache.layers[l], &mut grads.layers[l], config)?;
    }
    if freeze_first_k > 0 {
        return Ok(());
    }

    for (p, item) in encoded.items.iter().enumerate() {
        let row = d.row(p);
        let ids = item.token_ids();
        let inv = T::one() / T::from_usize(ids.len()).expect("bag size fits");
        for &id in ids {
            for (g, v) in grads.token_embeddings.row_mut(id as usize).iter_mut().zip(row) {
                *g += *v * inv;
            }
        }
        if config.use_position_embeddings {
            let pos = encoded.position_ids[p];
            for (g, v) in grads.position_embeddings.row_mut(pos).iter_mut().zip(row) {
                *g += *v;
            }
        }
        if config.use_segment_embeddings {
            let seg = encoded.segment_ids[p] as usize;
            for (g, v) in grads.segment_embeddings.row_mut(seg).iter_mut().zip(row) {
                *g += *v;
            }
        }
    }
    Ok(())
}

/// Loss and accumulated gradient for one example.
pub fn loss_and_grad<T: Scalar>(
    encoded: &EncodedInput,
    params: &ModelParams<T>,
    config: &ModelConfig,
    gold_cell: usize,
    freeze_first_k: usize,
    grads: &mut ModelParams<T>,
) -> Result<(T, Forward<T>)> {
    let fwd = forward(encoded, params, config)?;
    let value = loss(&fwd.pointer.cell_probs, gold_cell)?;
    backward(encoded, params, config, &fwd, gold_cell, freeze_first_k, grads)?;
    Ok((value, fwd))
}

/// Finite-difference check of every trainable group at 64-bit precision.
/// Returns the worst element per group.
pub fn check_gradients(
    encoded: &EncodedInput,
    params: &ModelParams<f64>,
    config: &ModelConfig,
    answer_index: usize,
    freeze_first_k: usize,
    eps: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::numerics::{grad_check_report, FnObjective};

    target_position(encoded, answer_index)?;
    let trainable = trainable_set(config, freeze_first_k)?;
    let mut grads = params.zeros_like();
    loss_and_grad(encoded, params, config, answer_index, freeze_first_k, &mut grads)?;

    let mut report = Vec::new();
    for name in group_names(config).into_iter().filter(|n| trainable.contains(n)) {
        let analytic = grads.group(&name).expect("known group").data().to_vec();
        let initial = params.group(&name).expect("known group").data().to_vec();
        let mut probe = params.clone();
        let value = |v: &[f64]| {
            probe
                .group_mut(&name)
                .expect("known group")
                .data_mut()
                .copy_from_slice(v);
            let fwd = forward(encoded, &probe, config)?;
            loss(&fwd.pointer.cell_probs, answer_index)
        };
        let gradient = |_: &[f64]| Ok(analytic.clone());
        let err = grad_check_report(&mut FnObjective(value, gradient), &initial, eps)?;
        report.push((name, err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, Table};
    use crate::encoding::encode_example;
    use crate::text::build_vocab;

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 32,
            vocab_size,
            use_position_embeddings: true,
            use_segment_embeddings: true,
        }
    }

    fn example(rows: usize, cols: usize) -> Example {
        let headers = (0..cols).map(|j| format!("col{j}")).collect();
        let body = (0..rows)
            .map(|i| (0..cols).map(|j| format!("v{i} w{j}")).collect())
            .collect();
        Example::new(
            Table::new("t", headers, body).unwrap(),
            "what is col1 where col0 is v0",
            rows * cols - 1,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(10);
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn group_names_match_params() {
        let c = tiny_config(10);
        let p: ModelParams<f32> = init_params(&c, 1).unwrap();
        let names: Vec<String> = p.groups().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, group_names(&c));
        assert_eq!(names.len(), 3 + 16 * 2 + 2);
        assert_eq!(group_layer("layer.2.ffn.in.weight"), Some(2));
        assert_eq!(group_layer("head.bias"), None);
    }

    #[test]
    fn init_determinism_and_layout() {
        let c = tiny_config(10);
        let a: ModelParams<f32> = init_params(&c, 5).unwrap();
        let b: ModelParams<f32> = init_params(&c, 5).unwrap();
        let other: ModelParams<f32> = init_params(&c, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!(a.layers[0].query_b.data().iter().all(|&v| v == 0.0));
        assert!(a.layers[1].ff_norm_gain.data().iter().all(|&v| v == 1.0));
        assert!(a.head_bias.data()[0] == 0.0);
        assert!(a.token_embeddings.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn init_statistics() {
        let c = ModelConfig {
            vocab_size: 100_000,
            d_model: 1,
            n_heads: 1,
            n_layers: 0,
            d_ff: 1,
            max_len: 1,
            ..tiny_config(1)
        };
        let p: ModelParams<f64> = init_params(&c, 17).unwrap();
        let w = p.token_embeddings.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // Truncation at ±2σ shrinks the standard deviation by a known factor.
        let phi = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let z = 0.954_499_736_103_641_6; // P(|X| < 2)
        let expected_sd = INIT_STD * (1.0 - 2.0 * 2.0 * phi(2.0) / z).sqrt();
        let se_mean = expected_sd / n.sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        let sd = var.sqrt();
        let se_sd = expected_sd / (2.0 * n).sqrt();
        assert!((sd - expected_sd).abs() < 3.0 * se_sd, "sd {sd} vs {expected_sd}");
    }

    #[test]
    fn trainable_set_policy() {
        let c = tiny_config(10);
        let all = trainable_set(&c, 0).unwrap();
        assert_eq!(all.len(), group_names(&c).len());
        let k1 = trainable_set(&c, 1).unwrap();
        assert!(k1.iter().all(|n| !n.starts_with("layer.1.") && !n.starts_with("embeddings")));
        assert!(k1.contains("layer.2.attention.query.weight") && k1.contains("head.selector"));
        let k2 = trainable_set(&c, 2).unwrap();
        assert_eq!(
            k2.into_iter().collect::<Vec<_>>(),
            vec!["head.bias".to_string(), "head.selector".to_string()]
        );
        assert!(trainable_set(&c, 3).is_err());

        let base = ModelConfig { n_layers: 12, ..c };
        let k9 = trainable_set(&base, 9).unwrap();
        let layers: BTreeSet<usize> = k9.iter().filter_map(|n| group_layer(n)).collect();
        assert_eq!(layers, BTreeSet::from([10, 11, 12]));
        assert!(k9.contains("head.selector"));
    }

    #[test]
    fn embed_averages_bags() {
        let e = example(1, 2);
        let v = build_vocab(std::slice::from_ref(&e), 1);
        let mut c = tiny_config(v.len());
        c.use_position_embeddings = false;
        c.use_segment_embeddings = false;
        let p: ModelParams<f64> = init_params(&c, 2).unwrap();
        let enc = encode_example(&e, &v, 32).unwrap();
        let x = embed(&enc, &p, &c).unwrap();
        // Cell 0 is "v0 w0".
        let a = v.id("v0").unwrap() as usize;
        let b = v.id("w0").unwrap() as usize;
        let pos = enc.cell_positions[0];
        for j in 0..c.d_model {
            let expected = (p.token_embeddings.get(a, j) + p.token_embeddings.get(b, j)) / 2.0;
            assert!((x.get(pos, j) - expected).abs() < 1e-15);
        }
        // A question word that is also a single-token header embeds identically.
        let col1 = enc.items.iter().position(|i| matches!(i, crate::Item::Header { column: 1, .. })).unwrap();
        let q = enc
            .items
            .iter()
            .position(|i| matches!(i, crate::Item::QWord(id) if *id == v.id("col1").unwrap()))
            .unwrap();
        assert_eq!(x.row(col1), x.row(q));
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let e = example(1, 1);
        let v = build_vocab(std::slice::from_ref(&e), 1);
        let c = tiny_config(4);
        let p: ModelParams<f32> = init_params(&c, 2).unwrap();
        let enc = encode_example(&e, &v, 32).unwrap();
        assert!(matches!(embed(&enc, &p, &c), Err(Error::IndexOutOfRange { what: "token id", .. })));
        let c = ModelConfig { max_len: 4, ..tiny_config(v.len()) };
        let p: ModelParams<f32> = init_params(&c, 2).unwrap();
        assert!(embed(&enc, &p, &c).is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let c = ModelConfig { n_layers: 0, ..tiny_config(10) };
        let p: ModelParams<f64> = init_params(&c, 1).unwrap();
        let x = init_params::<f64>(&tiny_config(5), 9).unwrap().token_embeddings;
        assert_eq!(encoder_forward(&x, &p, &c).unwrap(), x);
        let bad = Matrix::<f64>::zeros(3, 5);
        assert!(encoder_forward(&bad, &p, &c).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = tiny_config(10);
        let p: ModelParams<f64> = init_params_scaled(&c, 3, 0.5, 0.5).unwrap();
        let x = init_params_scaled::<f64>(&ModelConfig { vocab_size: 7, ..c.clone() }, 4, 1.0, 1.0)
            .unwrap()
            .token_embeddings;
        let cache = encoder_forward_cached(&x, &p, &c).unwrap();
        for layer in &cache.layers {
            for a in &layer.attention {
                for i in 0..a.rows() {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    /// One layer, d=4, one head, hand-picked weights on three positions,
    /// against a step-by-step evaluation written out independently.
    #[test]
    fn single_layer_matches_manual_forward() {
        let c = ModelConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_len: 3,
            vocab_size: 3,
            use_position_embeddings: false,
            use_segment_embeddings: false,
        };
        let mut p: ModelParams<f64> = ModelParams::zeros(&c);
        let l = &mut p.layers[0];
        let ident = Matrix::<f64>::identity(4);
        l.query_w = ident.clone();
        l.key_w = ident.clone();
        l.value_w = ident.clone();
        l.output_w = ident.clone();
        l.ff_in_w = ident.clone();
        l.ff_out_w = ident;
        l.attn_norm_gain = Matrix::filled(1, 4, 1.0);
        l.ff_norm_gain = Matrix::filled(1, 4, 1.0);
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ])
        .unwrap();
        let out = encoder_forward(&x, &p, &c).unwrap();

        // Manual pass.
        let rows: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).to_vec()).collect();
        let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let norm = |v: Vec<f64>| {
            let mean = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            v.iter().map(|x| (x - mean) / (var + 1e-12).sqrt()).collect::<Vec<_>>()
        };
        let gelu_ref = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        for i in 0..3 {
            let scores: Vec<f64> = (0..3).map(|j| dotp(&rows[i], &rows[j]) / 2.0).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let weights: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            let ctx: Vec<f64> = (0..4)
                .map(|d| (0..3).map(|j| weights[j] * rows[j][d]).sum())
                .collect();
            let h1 = norm((0..4).map(|d| rows[i][d] + ctx[d]).collect());
            let h2 = norm((0..4).map(|d| h1[d] + gelu_ref(h1[d])).collect());
            for d in 0..4 {
                assert!((out.get(i, d) - h2[d]).abs() < 1e-12, "row {i} col {d}");
            }
        }
    }

    #[test]
    fn pointer_cases() {
        let e = example(2, 2);
        let v = build_vocab(std::slice::from_ref(&e), 1);
        let c = tiny_config(v.len());
        let mut p: ModelParams<f64> = init_params(&c, 1).unwrap();
        p.head_selector.fill_zero();
        let enc = encode_example(&e, &v, 32).unwrap();
        let f = forward(&enc, &p, &c).unwrap();
        assert!(f.pointer.cell_probs.iter().all(|q| (q - 0.25).abs() < 1e-15));
        assert!((loss(&f.pointer.cell_probs, 0).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(loss(&f.pointer.cell_probs, 4).is_err());

        let single = example(1, 1);
        let v = build_vocab(std::slice::from_ref(&single), 1);
        let c = tiny_config(v.len());
        let p: ModelParams<f64> = init_params(&c, 1).unwrap();
        let enc = encode_example(&single, &v, 32).unwrap();
        let f = forward(&enc, &p, &c).unwrap();
        assert_eq!(f.pointer.cell_probs, vec![1.0]);
        assert_eq!(loss(&f.pointer.cell_probs, 0).unwrap(), 0.0);
    }

    #[test]
    fn loss_grad_is_probs_minus_onehot() {
        let probs = [0.1, 0.6, 0.3];
        assert_eq!(loss_grad_logits(&probs, 1), vec![0.1, 0.6 - 1.0, 0.3]);
        assert_eq!(loss(&[0.0, 1.0], 0).unwrap(), -(1e-12f64).ln());
        assert_eq!(loss_grad_logits(&[0.0, 1.0], 0), vec![0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = example(2, 2);
        let v = build_vocab(std::slice::from_ref(&e), 1);
        let c = tiny_config(v.len());
        let p: ModelParams<f64> =
            init_params_scaled(&c, 7, GRADCHECK_WEIGHT_STD, GRADCHECK_EMBEDDING_STD).unwrap();
        let enc = encode_example(&e, &v, 32).unwrap();
        let report = check_gradients(&enc, &p, &c, e.answer_index, 0, 1e-4).unwrap();
        assert_eq!(report.len(), group_names(&c).len());
        for (name, r) in report {
            assert!(r.max_relative_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let e = example(2, 2);
        let v = build_vocab(std::slice::from_ref(&e), 1);
        let c = tiny_config(v.len());
        let p: ModelParams<f64> = init_params_scaled(&c, 7, 0.3, 0.3).unwrap();
        let enc = encode_example(&e, &v, 32).unwrap();
        let mut g = p.zeros_like();
        loss_and_grad(&enc, &p, &c, 1, 1, &mut g).unwrap();
        let trainable = trainable_set(&c, 1).unwrap();
        for (name, m) in g.groups() {
            let nonzero = m.data().iter().any(|&x| x != 0.0);
            if !trainable.contains(&name) {
                assert!(!nonzero, "{name} should have zero gradient");
            }
        }
        assert!(g.head_selector.data().iter().any(|&x| x != 0.0));
        assert!(g.layers[1].query_w.data().iter().any(|&x| x != 0.0));
    }
}
