use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, ComponentTag};
use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;

/// Identifies a parameter by position in the model's parameter list.
pub type ParamId = usize;

/// What a parameter tensor does inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    SegmentEmbedding,
    EmbeddingNormScale,
    EmbeddingNormShift,
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    AttnOutWeight,
    AttnOutBias,
    AttnNormScale,
    AttnNormShift,
    FfnUpWeight,
    FfnUpBias,
    FfnDownWeight,
    FfnDownBias,
    FfnNormScale,
    FfnNormShift,
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    pub fn tag(self) -> ComponentTag {
        use ParamRole::*;
        match self {
            TokenEmbedding => ComponentTag::TokenEmbedding,
            PositionEmbedding => ComponentTag::PositionEmbedding,
            SegmentEmbedding => ComponentTag::SegmentEmbedding,
            EmbeddingNormScale | EmbeddingNormShift | AttnNormScale | AttnNormShift
            | FfnNormScale | FfnNormShift => ComponentTag::LayerNormParam,
            QueryWeight | KeyWeight | ValueWeight | AttnOutWeight | FfnUpWeight
            | FfnDownWeight => ComponentTag::EncoderLinear,
            HeadWeight => ComponentTag::ClassificationHead,
            QueryBias | KeyBias | ValueBias | AttnOutBias | FfnUpBias | FfnDownBias
            | HeadBias => ComponentTag::Bias,
        }
    }

    fn short(self) -> &'static str {
        use ParamRole::*;
        match self {
            TokenEmbedding => "token_embedding",
            PositionEmbedding => "position_embedding",
            SegmentEmbedding => "segment_embedding",
            EmbeddingNormScale => "ln.scale",
            EmbeddingNormShift => "ln.shift",
            QueryWeight => "attn.query.weight",
            QueryBias => "attn.query.bias",
            KeyWeight => "attn.key.weight",
            KeyBias => "attn.key.bias",
            ValueWeight => "attn.value.weight",
            ValueBias => "attn.value.bias",
            AttnOutWeight => "attn.output.weight",
            AttnOutBias => "attn.output.bias",
            AttnNormScale => "attn.ln.scale",
            AttnNormShift => "attn.ln.shift",
            FfnUpWeight => "ffn.up.weight",
            FfnUpBias => "ffn.up.bias",
            FfnDownWeight => "ffn.down.weight",
            FfnDownBias => "ffn.down.bias",
            FfnNormScale => "ffn.ln.scale",
            FfnNormShift => "ffn.ln.shift",
            HeadWeight => "weight",
            HeadBias => "bias",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    /// Encoder layer index, `None` for embeddings and head.
    pub layer: Option<usize>,
    pub role: ParamRole,
    pub tag: ComponentTag,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub activation: ActivationKind,
    /// Dropout on embeddings and residual branches, applied in training mode.
    pub dropout: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            activation: ActivationKind::Gelu,
            dropout: 0.1,
        }
    }
}

/// Whether a forward pass applies dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a generator seeded with this value, so a
    /// step can be replayed bit for bit.
    Train { dropout_seed: u64 },
}

/// A batch of equal-length token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `[batch, seq]`.
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    ffn_up: (ParamId, ParamId),
    ffn_down: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

/// Post-norm transformer encoder with a linear head on the first token.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ArchitectureSpec,
    config: ForwardConfig,
    params: Vec<Parameter<T>>,
}

/// Parameter leaves and logits of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    /// Leaf node of every parameter, indexed by [`ParamId`].
    pub param_nodes: Vec<NodeId>,
}

fn truncated_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::of(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; identical seeds give identical
    /// parameters.
    pub fn build(spec: &ArchitectureSpec, config: ForwardConfig, seed: u64) -> Result<Self, Error> {
        spec.validate()?;
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", config.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spec.hidden_dim;
        let mut params = Vec::new();
        let mut push = |layer: Option<usize>, role: ParamRole, value: Tensor<T>| {
            let name = match (layer, role.tag()) {
                (Some(l), _) => format!("encoder.{l}.{}", role.short()),
                (None, ComponentTag::ClassificationHead) | (None, ComponentTag::Bias) => {
                    format!("head.{}", role.short())
                }
                (None, _) => format!("embeddings.{}", role.short()),
            };
            params.push(Parameter {
                name,
                layer,
                role,
                tag: role.tag(),
                value,
            });
        };
        push(None, ParamRole::TokenEmbedding, truncated_normal(&mut rng, vec![spec.vocab_size, h]));
        push(None, ParamRole::PositionEmbedding, truncated_normal(&mut rng, vec![spec.max_positions, h]));
        push(None, ParamRole::SegmentEmbedding, truncated_normal(&mut rng, vec![spec.num_segments, h]));
        push(None, ParamRole::EmbeddingNormScale, Tensor::full(vec![h], T::one()));
        push(None, ParamRole::EmbeddingNormShift, Tensor::zeros(vec![h]));
        for l in 0..spec.num_layers {
            let l = Some(l);
            push(l, ParamRole::QueryWeight, truncated_normal(&mut rng, vec![h, h]));
            push(l, ParamRole::QueryBias, Tensor::zeros(vec![h]));
            push(l, ParamRole::KeyWeight, truncated_normal(&mut rng, vec![h, h]));
            push(l, ParamRole::KeyBias, Tensor::zeros(vec![h]));
            push(l, ParamRole::ValueWeight, truncated_normal(&mut rng, vec![h, h]));
            push(l, ParamRole::ValueBias, Tensor::zeros(vec![h]));
            push(l, ParamRole::AttnOutWeight, truncated_normal(&mut rng, vec![h, h]));
            push(l, ParamRole::AttnOutBias, Tensor::zeros(vec![h]));
            push(l, ParamRole::AttnNormScale, Tensor::full(vec![h], T::one()));
            push(l, ParamRole::AttnNormShift, Tensor::zeros(vec![h]));
            push(l, ParamRole::FfnUpWeight, truncated_normal(&mut rng, vec![h, spec.ffn_dim]));
            push(l, ParamRole::FfnUpBias, Tensor::zeros(vec![spec.ffn_dim]));
            push(l, ParamRole::FfnDownWeight, truncated_normal(&mut rng, vec![spec.ffn_dim, h]));
            push(l, ParamRole::FfnDownBias, Tensor::zeros(vec![h]));
            push(l, ParamRole::FfnNormScale, Tensor::full(vec![h], T::one()));
            push(l, ParamRole::FfnNormShift, Tensor::zeros(vec![h]));
        }
        push(None, ParamRole::HeadWeight, truncated_normal(&mut rng, vec![h, spec.num_labels]));
        push(None, ParamRole::HeadBias, Tensor::zeros(vec![spec.num_labels]));
        Ok(Model {
            spec: spec.clone(),
            config,
            params,
        })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against a fresh build of `spec`.
    pub fn from_parameters(
        spec: &ArchitectureSpec,
        config: ForwardConfig,
        values: Vec<Tensor<T>>,
    ) -> Result<Self, Error> {
        let mut model = Self::build(spec, config, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                values.len()
            )));
        }
        for (p, v) in model.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(TensorError::Shape {
                    op: "load parameter",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                }
                .into());
            }
            p.value = v;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn config(&self) -> &ForwardConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: ForwardConfig) {
        self.config = config;
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Ids of the parameters whose tag is in `tags`, in model order.
    pub fn parameters_by_component(&self, tags: &[ComponentTag]) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| tags.contains(&p.tag))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn layer_ids(&self) -> Vec<LayerIds> {
        // Layout fixed by `build`: 5 embedding tensors, then 16 per layer.
        (0..self.spec.num_layers)
            .map(|l| {
                let b = 5 + 16 * l;
                LayerIds {
                    query: (b, b + 1),
                    key: (b + 2, b + 3),
                    value: (b + 4, b + 5),
                    attn_out: (b + 6, b + 7),
                    attn_norm: (b + 8, b + 9),
                    ffn_up: (b + 10, b + 11),
                    ffn_down: (b + 12, b + 13),
                    ffn_norm: (b + 14, b + 15),
                }
            })
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), Error> {
        let n = batch.batch_size * batch.seq_len;
        if batch.token_ids.len() != n || batch.segment_ids.len() != n {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: vec![batch.batch_size, batch.seq_len],
                rhs: vec![batch.token_ids.len(), batch.segment_ids.len()],
            }
            .into());
        }
        if batch.seq_len == 0 || batch.seq_len > self.spec.max_positions {
            return Err(TensorError::Index {
                what: "sequence length",
                index: batch.seq_len,
                bound: self.spec.max_positions,
            }
            .into());
        }
        for (ids, bound, what) in [
            (&batch.token_ids, self.spec.vocab_size, "token id"),
            (&batch.segment_ids, self.spec.num_segments, "segment id"),
        ] {
            if let Some(&bad) = ids.iter().find(|&&i| i >= bound) {
                return Err(TensorError::Index { what, index: bad, bound }.into());
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the `[batch, labels]` logits.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch, mode: Mode) -> Result<ForwardOutput, Error> {
        self.forward_with(g, batch, mode, true)
    }

    fn forward_with(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        mode: Mode,
        trainable: bool,
    ) -> Result<ForwardOutput, Error> {
        self.check_batch(batch)?;
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let p = |id: ParamId| param_nodes[id];
        let (bsz, seq) = (batch.batch_size, batch.seq_len);
        let h = self.spec.hidden_dim;
        let heads = self.spec.num_heads;
        let hd = self.spec.head_dim();
        let rate = match mode {
            Mode::Eval => 0.0,
            Mode::Train { .. } => self.config.dropout,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(match mode {
            Mode::Train { dropout_seed } => dropout_seed,
            Mode::Eval => 0,
        });

        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let tok = g.gather_rows(p(0), &batch.token_ids)?;
        let pos = g.gather_rows(p(1), &positions)?;
        let seg = g.gather_rows(p(2), &batch.segment_ids)?;
        let emb = g.add(tok, pos)?;
        let emb = g.add(emb, seg)?;
        let emb = g.layer_norm(emb, p(3), p(4), LN_EPS)?;
        let mut x = g.dropout(emb, rate, &mut rng);

        let scale = T::of(1.0 / (hd as f64).sqrt());
        for ids in self.layer_ids() {
            let linear = |g: &mut Graph<T>, x: NodeId, (w, b): (ParamId, ParamId)| -> Result<NodeId, TensorError> {
                let y = g.matmul(x, p(w))?;
                g.add_bias(y, p(b))
            };
            let split = |g: &mut Graph<T>, t: NodeId| -> Result<NodeId, TensorError> {
                let t = g.reshape(t, vec![bsz, seq, heads, hd])?;
                let t = g.swap_middle(t)?;
                g.reshape(t, vec![bsz * heads, seq, hd])
            };
            let q = linear(g, x, ids.query)?;
            let k = linear(g, x, ids.key)?;
            let v = linear(g, x, ids.value)?;
            let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 2)?;
            let ctx = g.batch_matmul(attn, v, false)?;
            let ctx = g.reshape(ctx, vec![bsz, heads, seq, hd])?;
            let ctx = g.swap_middle(ctx)?;
            let ctx = g.reshape(ctx, vec![bsz * seq, h])?;
            let attn_out = linear(g, ctx, ids.attn_out)?;
            let attn_out = g.dropout(attn_out, rate, &mut rng);
            let res = g.add(x, attn_out)?;
            x = g.layer_norm(res, p(ids.attn_norm.0), p(ids.attn_norm.1), LN_EPS)?;

            let up = linear(g, x, ids.ffn_up)?;
            let up = match self.config.activation {
                ActivationKind::Gelu => g.gelu(up),
                ActivationKind::Relu => g.relu(up),
            };
            let down = linear(g, up, ids.ffn_down)?;
            let down = g.dropout(down, rate, &mut rng);
            let res = g.add(x, down)?;
            x = g.layer_norm(res, p(ids.ffn_norm.0), p(ids.ffn_norm.1), LN_EPS)?;
        }

        let first_rows: Vec<usize> = (0..bsz).map(|b| b * seq).collect();
        let cls = g.gather_rows(x, &first_rows)?;
        let head_w = self.params.len() - 2;
        let logits = g.matmul(cls, p(head_w))?;
        let logits = g.add_bias(logits, p(head_w + 1))?;
        Ok(ForwardOutput { logits, param_nodes })
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>, Error> {
        let mut g = Graph::new();
        let out = self.forward_with(&mut g, batch, Mode::Eval, false)?;
        Ok(g.value(out.logits).clone())
    }
}
