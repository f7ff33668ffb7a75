//! The forecasting network: seasonal/trend split, per-variate instance
//! normalization, token embedding, encoder blocks (multivariate
//! self-attention + FFN with residual layer norm), seasonal projection with
//! de-normalization, and trend projection add-back.

mod config;

pub use config::{EmbeddingMode, ModelConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::series::SeriesBatch;

/// Floor for the per-variate instance-normalization standard deviation.
pub const EPS_NORM: f64 = 1e-5;
/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

/// Forward activations retained for explainability: per-layer attention
/// weights and token embeddings.
#[derive(Debug, Clone, Default)]
pub struct AttributionContext {
    pub layers: Vec<LayerCapture>,
}

#[derive(Debug, Clone)]
pub struct LayerCapture {
    /// Softmax attention weights, flattened `[batch, heads, tokens, tokens]`.
    pub attention: Vec<f64>,
    pub attention_shape: [usize; 4],
    /// Block output tokens, flattened `[batch, tokens, width]`.
    pub tokens: Vec<f64>,
    pub token_shape: [usize; 3],
}

impl AttributionContext {
    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for layer in &self.layers {
            let t = layer.attention_shape[3];
            for row in layer.attention.chunks(t) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }
}

/// Options for one forward build on a tape.
pub struct ForwardOptions<'a> {
    /// `Some(rng)` enables dropout (train mode); `None` is eval mode.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Capture per-layer attention and token activations.
    pub capture: Option<&'a mut AttributionContext>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            dropout_rng: None,
            capture: None,
        }
    }
}

/// Output of a forward build: the forecast node plus every parameter's leaf
/// node, aligned with the model's parameter order.
pub struct BoundForward {
    pub output: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// The model: hyperparameters plus named parameter tensors.
pub struct EdFormer {
    cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl EdFormer {
    /// Build a model with seeded initialization: weights uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases and positional encoding
    /// zero, layer-norm gains one.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = EdFormer {
            cfg,
            names: Vec::new(),
            tensors: Vec::new(),
        };
        model.init_params(&mut rng);
        Ok(model)
    }

    /// Reassemble a model from named parameters (checkpoint load). The set of
    /// names and shapes must exactly match a fresh model of the same config.
    pub fn from_parts(cfg: ModelConfig, parts: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut model = EdFormer::new(cfg)?;
        if parts.len() != model.names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                parts.len(),
                model.names.len()
            )));
        }
        for (i, (name, shape, data)) in parts.into_iter().enumerate() {
            if model.names[i] != name {
                return Err(Error::Config(format!(
                    "checkpoint parameter {i} is `{name}`, expected `{}`",
                    model.names[i]
                )));
            }
            if model.tensors[i].shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    lhs: model.tensors[i].shape().to_vec(),
                    rhs: shape,
                });
            }
            model.tensors[i] = Tensor::new(shape, data)?.requires_grad();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn param_tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn add_param(&mut self, name: &str, tensor: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(tensor.requires_grad());
    }

    fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("finite init")
    }

    fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        let c = self.cfg.clone();
        let (l, h, n, d, f) = (c.lookback, c.horizon, c.variates, c.model_width, c.ffn_width);

        match c.embedding_mode {
            EmbeddingMode::Variate => {
                self.add_param("embed.w", Self::uniform_init(rng, vec![l, d], l));
                self.add_param("embed.b", Tensor::zeros(vec![d]));
                if c.embedding_depth == 2 {
                    self.add_param("embed2.w", Self::uniform_init(rng, vec![d, d], d));
                    self.add_param("embed2.b", Tensor::zeros(vec![d]));
                }
                if c.embed_trend {
                    self.add_param("trend_embed.w", Self::uniform_init(rng, vec![l, d], l));
                    self.add_param("trend_embed.b", Tensor::zeros(vec![d]));
                    if c.embedding_depth == 2 {
                        self.add_param("trend_embed2.w", Self::uniform_init(rng, vec![d, d], d));
                        self.add_param("trend_embed2.b", Tensor::zeros(vec![d]));
                    }
                }
            }
            EmbeddingMode::Temporal => {
                self.add_param("embed.w", Self::uniform_init(rng, vec![n, d], n));
                self.add_param("embed.b", Tensor::zeros(vec![d]));
                if c.embedding_depth == 2 {
                    self.add_param("embed2.w", Self::uniform_init(rng, vec![d, d], d));
                    self.add_param("embed2.b", Tensor::zeros(vec![d]));
                }
                self.add_param("pos", Tensor::zeros(vec![l, d]));
            }
        }

        for layer in 0..c.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                self.add_param(
                    &format!("enc{layer}.attn.{w}"),
                    Self::uniform_init(rng, vec![d, d], d),
                );
            }
            self.add_param(&format!("enc{layer}.ln1.gain"), ones(vec![d]));
            self.add_param(&format!("enc{layer}.ln1.bias"), Tensor::zeros(vec![d]));
            self.add_param(
                &format!("enc{layer}.ffn.w1"),
                Self::uniform_init(rng, vec![d, f], d),
            );
            self.add_param(&format!("enc{layer}.ffn.b1"), Tensor::zeros(vec![f]));
            self.add_param(
                &format!("enc{layer}.ffn.w2"),
                Self::uniform_init(rng, vec![f, d], f),
            );
            self.add_param(&format!("enc{layer}.ffn.b2"), Tensor::zeros(vec![d]));
            self.add_param(&format!("enc{layer}.ln2.gain"), ones(vec![d]));
            self.add_param(&format!("enc{layer}.ln2.bias"), Tensor::zeros(vec![d]));
        }

        match c.embedding_mode {
            EmbeddingMode::Variate => {
                if c.embedding_depth == 2 {
                    self.add_param("proj1.w", Self::uniform_init(rng, vec![d, d], d));
                    self.add_param("proj1.b", Tensor::zeros(vec![d]));
                }
                self.add_param("proj.w", Self::uniform_init(rng, vec![d, h], d));
                self.add_param("proj.b", Tensor::zeros(vec![h]));
            }
            EmbeddingMode::Temporal => {
                self.add_param("head_feat.w", Self::uniform_init(rng, vec![d, n], d));
                self.add_param("head_feat.b", Tensor::zeros(vec![n]));
                self.add_param("head_time.w", Self::uniform_init(rng, vec![l, h], l));
                self.add_param("head_time.b", Tensor::zeros(vec![h]));
            }
        }

        if c.use_decomposition && !c.embed_trend {
            self.add_param("trend.w", Self::uniform_init(rng, vec![l, h], l));
            self.add_param("trend.b", Tensor::zeros(vec![h]));
        }
    }

    fn idx(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Register the input window batch as a tape leaf.
    pub fn input_leaf(tape: &mut Tape, x: &SeriesBatch, requires_grad: bool) -> NodeId {
        let mut t = Tensor::from(x);
        if requires_grad {
            t = t.requires_grad();
        }
        tape.leaf(&t)
    }

    /// Build the full forecast graph on `tape` from the input node `x`
    /// (shape `[B, L, N]`). Returns the `[B, H, N]` output node and the
    /// parameter leaves in parameter order.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mut opts: ForwardOptions,
    ) -> Result<BoundForward> {
        let c = &self.cfg;
        if tape.shape(x) != [tape.shape(x)[0], c.lookback, c.variates] {
            return Err(Error::ShapeMismatch {
                op: "forecast",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![0, c.lookback, c.variates],
            });
        }

        let params: Vec<NodeId> = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        let p = |name: &str| params[self.idx(name)];

        let x = if c.time_flip { tape.flip_axis1(x)? } else { x };

        // seasonal/trend split; without decomposition the raw series takes
        // the seasonal path and there is no trend term
        let (seasonal, trend) = if c.use_decomposition {
            let trend = tape.moving_avg(x, c.decomposition_kernel)?;
            let seasonal = tape.sub(x, trend)?;
            (seasonal, Some(trend))
        } else {
            (x, None)
        };

        // per (batch, variate) instance normalization over time
        let mu = tape.mean_axis1(seasonal)?;
        let centered = tape.sub_bcast1(seasonal, mu)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis1(sq)?;
        let sd = tape.sqrt(var)?;
        let sd = tape.max_scalar(sd, EPS_NORM)?;
        let normed = tape.div_bcast1(centered, sd)?;

        let projected = match c.embedding_mode {
            EmbeddingMode::Variate => {
                let tokens_in = tape.transpose12(normed)?; // [B, N, L]
                let mut hcur = self.dense(tape, tokens_in, p("embed.w"), p("embed.b"))?;
                if c.embedding_depth == 2 {
                    hcur = tape.relu(hcur)?;
                    hcur = self.dense(tape, hcur, p("embed2.w"), p("embed2.b"))?;
                }
                if let Some(trend) = trend.filter(|_| c.embed_trend) {
                    let trend_tokens = tape.transpose12(trend)?;
                    let mut te =
                        self.dense(tape, trend_tokens, p("trend_embed.w"), p("trend_embed.b"))?;
                    if c.embedding_depth == 2 {
                        te = tape.relu(te)?;
                        te = self.dense(tape, te, p("trend_embed2.w"), p("trend_embed2.b"))?;
                    }
                    hcur = tape.add(hcur, te)?;
                }
                for layer in 0..c.layers {
                    hcur = self.encoder_block(tape, hcur, layer, &params, &mut opts)?;
                }
                let mut proj_in = hcur;
                if c.embedding_depth == 2 {
                    proj_in = self.dense(tape, proj_in, p("proj1.w"), p("proj1.b"))?;
                    proj_in = tape.relu(proj_in)?;
                }
                let out_tokens = self.dense(tape, proj_in, p("proj.w"), p("proj.b"))?; // [B,N,H]
                tape.transpose12(out_tokens)? // [B,H,N]
            }
            EmbeddingMode::Temporal => {
                let mut hcur = self.dense(tape, normed, p("embed.w"), p("embed.b"))?; // [B,L,D]
                if c.embedding_depth == 2 {
                    hcur = tape.relu(hcur)?;
                    hcur = self.dense(tape, hcur, p("embed2.w"), p("embed2.b"))?;
                }
                hcur = tape.add_bcast_rows(hcur, p("pos"))?;
                for layer in 0..c.layers {
                    hcur = self.encoder_block(tape, hcur, layer, &params, &mut opts)?;
                }
                let feat = self.dense(tape, hcur, p("head_feat.w"), p("head_feat.b"))?; // [B,L,N]
                let by_var = tape.transpose12(feat)?; // [B,N,L]
                let timed = self.dense(tape, by_var, p("head_time.w"), p("head_time.b"))?; // [B,N,H]
                tape.transpose12(timed)? // [B,H,N]
            }
        };

        // de-normalize with the stats of the matching forward pass
        let scaled = tape.mul_bcast1(projected, sd)?;
        let mut output = tape.add_bcast1(scaled, mu)?;

        // separate trend head on the raw (un-normalized) trend
        if let Some(trend) = trend.filter(|_| !c.embed_trend) {
            let trend_tokens = tape.transpose12(trend)?; // [B,N,L]
            let th = self.dense(tape, trend_tokens, p("trend.w"), p("trend.b"))?; // [B,N,H]
            let th = tape.transpose12(th)?; // [B,H,N]
            output = tape.add(output, th)?;
        }

        Ok(BoundForward {
            output,
            param_nodes: params,
        })
    }

    fn dense(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn encoder_block(
        &self,
        tape: &mut Tape,
        h: NodeId,
        layer: usize,
        params: &[NodeId],
        opts: &mut ForwardOptions,
    ) -> Result<NodeId> {
        let c = &self.cfg;
        let p = |name: String| params[self.idx(&name)];
        let d = c.model_width;
        let dk = d / c.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let q = tape.matmul(h, p(format!("enc{layer}.attn.wq")))?;
        let k = tape.matmul(h, p(format!("enc{layer}.attn.wk")))?;
        let v = tape.matmul(h, p(format!("enc{layer}.attn.wv")))?;

        let mut head_outputs = Vec::with_capacity(c.heads);
        let mut attn_capture: Vec<Vec<f64>> = Vec::new();
        for head in 0..c.heads {
            let qh = tape.slice_last(q, head * dk, dk)?;
            let kh = tape.slice_last(k, head * dk, dk)?;
            let vh = tape.slice_last(v, head * dk, dk)?;
            let kt = tape.transpose12(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 2)?;
            if opts.capture.is_some() {
                attn_capture.push(tape.value(attn).to_vec());
            }
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_last(&head_outputs)?;
        let attn_out = tape.matmul(concat, p(format!("enc{layer}.attn.wo")))?;
        let attn_out = self.dropout(tape, attn_out, &mut opts.dropout_rng)?;

        let res1 = tape.add(h, attn_out)?;
        let ln1 = tape.layer_norm(res1, LN_EPS)?;
        let ln1 = tape.mul_bias(ln1, p(format!("enc{layer}.ln1.gain")))?;
        let h1 = tape.add_bias(ln1, p(format!("enc{layer}.ln1.bias")))?;

        let f1 = self.dense(
            tape,
            h1,
            p(format!("enc{layer}.ffn.w1")),
            p(format!("enc{layer}.ffn.b1")),
        )?;
        let act = tape.relu(f1)?;
        let f2 = self.dense(
            tape,
            act,
            p(format!("enc{layer}.ffn.w2")),
            p(format!("enc{layer}.ffn.b2")),
        )?;
        let f2 = self.dropout(tape, f2, &mut opts.dropout_rng)?;

        let res2 = tape.add(h1, f2)?;
        let ln2 = tape.layer_norm(res2, LN_EPS)?;
        let ln2 = tape.mul_bias(ln2, p(format!("enc{layer}.ln2.gain")))?;
        let out = tape.add_bias(ln2, p(format!("enc{layer}.ln2.bias")))?;

        if let Some(capture) = opts.capture.as_deref_mut() {
            let shape = tape.shape(out);
            let (b, tokens) = (shape[0], shape[1]);
            capture.layers.push(LayerCapture {
                attention: attn_capture.concat(),
                attention_shape: [b, c.heads, tokens, tokens],
                tokens: tape.value(out).to_vec(),
                token_shape: [b, tokens, d],
            });
        }
        Ok(out)
    }

    /// Inverted dropout: scales kept activations by `1/(1-p)`. Identity in
    /// eval mode or when the probability is zero.
    fn dropout(
        &self,
        tape: &mut Tape,
        x: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let pr = self.cfg.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if pr == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - pr);
        let shape = tape.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.random::<f64>() < pr { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(shape, mask)?;
        tape.mul(x, mask)
    }

    /// Eval-mode forecast: pure, deterministic, no state mutation.
    pub fn forecast(&self, x: &SeriesBatch) -> Result<SeriesBatch> {
        let mut tape = Tape::new();
        let leaf = Self::input_leaf(&mut tape, x, false);
        let fwd = self.forward_on_tape(&mut tape, leaf, ForwardOptions::eval())?;
        let out = tape.value(fwd.output).to_vec();
        SeriesBatch::new(x.batch(), self.cfg.horizon, self.cfg.variates, out)
    }

    /// Forecast with per-layer attention/token capture.
    pub fn forecast_with_context(&self, x: &SeriesBatch) -> Result<(SeriesBatch, AttributionContext)> {
        let mut ctx = AttributionContext::default();
        let mut tape = Tape::new();
        let leaf = Self::input_leaf(&mut tape, x, false);
        let fwd = self.forward_on_tape(
            &mut tape,
            leaf,
            ForwardOptions {
                dropout_rng: None,
                capture: Some(&mut ctx),
            },
        )?;
        let out = tape.value(fwd.output).to_vec();
        Ok((
            SeriesBatch::new(x.batch(), self.cfg.horizon, self.cfg.variates, out)?,
            ctx,
        ))
    }

    /// Gradient of `sum(weights * forecast(x))` with respect to the input
    /// window; `weights` has shape `[H, N]` and is applied per batch element.
    pub fn input_gradient(&self, x: &SeriesBatch, weights: &[f64]) -> Result<Vec<f64>> {
        let c = &self.cfg;
        if weights.len() != c.horizon * c.variates {
            return Err(Error::ShapeMismatch {
                op: "input_gradient",
                lhs: vec![c.horizon, c.variates],
                rhs: vec![weights.len()],
            });
        }
        let mut tape = Tape::new();
        let leaf = Self::input_leaf(&mut tape, x, true);
        let fwd = self.forward_on_tape(&mut tape, leaf, ForwardOptions::eval())?;
        let full: Vec<f64> = std::iter::repeat_n(weights, x.batch()).flatten().copied().collect();
        let w = tape.constant(vec![x.batch(), c.horizon, c.variates], full)?;
        let weighted = tape.mul(fwd.output, w)?;
        let target = tape.sum(weighted)?;
        tape.backward(target)?;
        Ok(tape
            .grad(leaf)
            .expect("input requires grad")
            .to_vec())
    }
}

fn ones(shape: Vec<usize>) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape, vec![1.0; numel]).expect("finite")
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            lookback: 8,
            horizon: 4,
            variates: 3,
            model_width: 8,
            heads: 2,
            layers: 1,
            ffn_width: 16,
            decomposition_kernel: 3,
            dropout: 0.0,
            seed: 7,
            ..Default::default()
        }
    }

    fn random_batch(b: usize, l: usize, n: usize, seed: u64) -> SeriesBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * l * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        SeriesBatch::new(b, l, n, data).unwrap()
    }

    #[test]
    fn forecast_shape_contract() {
        let model = EdFormer::new(tiny_config()).unwrap();
        let x = random_batch(2, 8, 3, 1);
        let y = model.forecast(&x).unwrap();
        assert_eq!(y.shape(), [2, 4, 3]);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let model = EdFormer::new(tiny_config()).unwrap();
        let x = random_batch(2, 8, 3, 2);
        let a = model.forecast(&x).unwrap();
        let b = model.forecast(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = EdFormer::new(tiny_config()).unwrap();
        let x = random_batch(2, 8, 3, 3);
        let (_, ctx) = model.forecast_with_context(&x).unwrap();
        assert_eq!(ctx.layers.len(), 1);
        assert!(ctx.max_row_sum_error() < 1e-10);
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let cfg = ModelConfig {
            variates: 1,
            ..tiny_config()
        };
        let model = EdFormer::new(cfg).unwrap();
        let x = random_batch(1, 8, 1, 4);
        let (_, ctx) = model.forecast_with_context(&x).unwrap();
        for layer in &ctx.layers {
            assert!(layer.attention.iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn variate_permutation_equivariance() {
        let model = EdFormer::new(tiny_config()).unwrap();
        let x = random_batch(2, 8, 3, 5);
        let perm = [2, 0, 1];
        let y_base = model.forecast(&x).unwrap();
        let y_perm = model.forecast(&x.permute_vars(&perm).unwrap()).unwrap();
        let y_base_perm = y_base.permute_vars(&perm).unwrap();
        for (a, b) in y_perm.data().iter().zip(y_base_perm.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn variate_token_depends_only_on_its_column() {
        // perturb variate 2 and check variate 0/1 embeddings via a model with
        // attention disabled by construction: capture tokens pre-attention by
        // embedding directly on a tape
        let cfg = tiny_config();
        let model = EdFormer::new(cfg.clone()).unwrap();
        let x = random_batch(1, 8, 3, 6);
        let mut x2 = x.clone();
        for t in 0..8 {
            x2.set(0, t, 2, x2.at(0, t, 2) + 0.5);
        }

        let embed = |input: &SeriesBatch| -> Vec<f64> {
            let mut tape = Tape::new();
            let leaf = EdFormer::input_leaf(&mut tape, input, false);
            let trend = tape.moving_avg(leaf, cfg.decomposition_kernel).unwrap();
            let seasonal = tape.sub(leaf, trend).unwrap();
            let mu = tape.mean_axis1(seasonal).unwrap();
            let centered = tape.sub_bcast1(seasonal, mu).unwrap();
            let sq = tape.mul(centered, centered).unwrap();
            let var = tape.mean_axis1(sq).unwrap();
            let sd = tape.sqrt(var).unwrap();
            let sd = tape.max_scalar(sd, EPS_NORM).unwrap();
            let normed = tape.div_bcast1(centered, sd).unwrap();
            let tokens = tape.transpose12(normed).unwrap();
            let w = tape.leaf(&model.tensors[model.idx("embed.w")]);
            let b = tape.leaf(&model.tensors[model.idx("embed.b")]);
            let emb = tape.matmul(tokens, w).unwrap();
            let emb = tape.add_bias(emb, b).unwrap();
            tape.value(emb).to_vec()
        };

        let e1 = embed(&x);
        let e2 = embed(&x2);
        let d = cfg.model_width;
        // tokens 0 and 1 identical, token 2 changed
        assert_eq!(&e1[..2 * d], &e2[..2 * d]);
        assert!(e1[2 * d..].iter().zip(&e2[2 * d..]).any(|(a, b)| a != b));
    }

    #[test]
    fn identical_variates_embed_identically() {
        let cfg = tiny_config();
        let model = EdFormer::new(cfg.clone()).unwrap();
        // two identical columns
        let mut x = SeriesBatch::zeros(1, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 0..8 {
            let v = rng.random_range(-1.0..1.0);
            x.set(0, t, 0, v);
            x.set(0, t, 1, v);
            x.set(0, t, 2, rng.random_range(-1.0..1.0));
        }
        let y = model.forecast(&x).unwrap();
        // shared weights + identical inputs: forecasts for the two identical
        // variates agree to permutation tolerance
        for hstep in 0..4 {
            assert!((y.at(0, hstep, 0) - y.at(0, hstep, 1)).abs() < 1e-8);
        }
    }

    #[test]
    fn projection_bias_only_for_zero_tokens() {
        // zero input in no-decomposition mode: seasonal path is all zeros
        // (constant series normalizes to zero), so the output is the
        // projection bias de-normalized plus nothing else; with zero biases
        // everywhere the forecast is exactly zero
        let cfg = ModelConfig {
            use_decomposition: false,
            ..tiny_config()
        };
        let model = EdFormer::new(cfg).unwrap();
        let x = SeriesBatch::zeros(1, 8, 3);
        let y = model.forecast(&x).unwrap();
        // constant (zero) input: mu = 0, sd floored, tokens all zero up to
        // layer norm biases; output stays finite and batch-uniform
        let y2 = model.forecast(&SeriesBatch::zeros(1, 8, 3)).unwrap();
        assert_eq!(y.data(), y2.data());
        // all variates see identical (zero) tokens, so outputs agree across
        // variates
        for hstep in 0..4 {
            assert!((y.at(0, hstep, 0) - y.at(0, hstep, 1)).abs() < 1e-12);
            assert!((y.at(0, hstep, 1) - y.at(0, hstep, 2)).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_mode_shapes_and_determinism() {
        let cfg = ModelConfig {
            embedding_mode: EmbeddingMode::Temporal,
            ..tiny_config()
        };
        let model = EdFormer::new(cfg).unwrap();
        let x = random_batch(2, 8, 3, 9);
        let y = model.forecast(&x).unwrap();
        assert_eq!(y.shape(), [2, 4, 3]);
        let y2 = model.forecast(&x).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn embed_trend_variant_runs() {
        let cfg = ModelConfig {
            embed_trend: true,
            ..tiny_config()
        };
        let model = EdFormer::new(cfg).unwrap();
        let x = random_batch(1, 8, 3, 10);
        let y = model.forecast(&x).unwrap();
        assert_eq!(y.shape(), [1, 4, 3]);
    }

    #[test]
    fn time_flip_variant_runs_and_differs() {
        let base = EdFormer::new(tiny_config()).unwrap();
        let flipped = EdFormer::new(ModelConfig {
            time_flip: true,
            ..tiny_config()
        })
        .unwrap();
        let x = random_batch(1, 8, 3, 11);
        let y0 = base.forecast(&x).unwrap();
        let y1 = flipped.forecast(&x).unwrap();
        assert_eq!(y1.shape(), [1, 4, 3]);
        assert!(y0.data().iter().zip(y1.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let model = EdFormer::new(tiny_config()).unwrap();
        let x = random_batch(1, 9, 3, 12);
        assert!(model.forecast(&x).is_err());
    }

    #[test]
    fn nan_input_is_rejected_at_construction() {
        assert!(SeriesBatch::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn dropout_draws_are_seed_deterministic() {
        let cfg = ModelConfig {
            dropout: 0.3,
            ..tiny_config()
        };
        let model = EdFormer::new(cfg).unwrap();
        let x = random_batch(2, 8, 3, 13);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let leaf = EdFormer::input_leaf(&mut tape, &x, false);
            let fwd = model
                .forward_on_tape(
                    &mut tape,
                    leaf,
                    ForwardOptions {
                        dropout_rng: Some(&mut rng),
                        capture: None,
                    },
                )
                .unwrap();
            tape.value(fwd.output).to_vec()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn end_to_end_input_gradient_matches_finite_differences() {
        // decompose -> normalize -> embed -> encoder block -> project -> loss
        let model = EdFormer::new(tiny_config()).unwrap();
        let x = random_batch(2, 8, 3, 14);
        let weights: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            (0..4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let analytic = model.input_gradient(&x, &weights).unwrap();

        let target = |input: &SeriesBatch| -> f64 {
            let y = model.forecast(input).unwrap();
            let mut acc = 0.0;
            for b in 0..input.batch() {
                for (i, w) in weights.iter().enumerate() {
                    acc += w * y.data()[b * weights.len() + i];
                }
            }
            acc
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = x.clone();
        for i in 0..x.data().len() {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = target(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = target(&probe);
            probe.data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }
}
