//! The Entity Transformer encoder.
//!
//! Per token, sparse features pass through a shared affine + relu
//! projection, are concatenated with the dense features and projected to
//! `d_model`. A stack of pre-norm transformer layers with relative position
//! attention follows, then an affine map to per-tag emission scores that feed
//! the CRF.
//!
//! Relative positions use one learned key embedding per clipped offset
//! `clip(j - i, -rel_clip, rel_clip)`, shared by all heads of a layer and
//! scored against the query: the logit of pair `(i, j)` in a head is
//! `q_i · (k_j + r_{clip(j-i)}) / sqrt(d_head)`. There are no absolute
//! position encodings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bags, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Tag;

pub const MAX_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_units: usize,
    pub n_layers: usize,
    pub sparse_proj_dim: usize,
    /// Width of the concatenated sparse input `[words | ngrams | lexical]`.
    pub sparse_input_dim: usize,
    pub dense_dim: usize,
    pub rel_clip: usize,
    pub dropout: f64,
    pub n_tags: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 4,
            ff_units: 256,
            n_layers: 2,
            sparse_proj_dim: 128,
            sparse_input_dim: 1,
            dense_dim: 0,
            rel_clip: 5,
            dropout: 0.1,
            n_tags: Tag::COUNT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ff_units", self.ff_units),
            ("sparse_proj_dim", self.sparse_proj_dim),
            ("sparse_input_dim", self.sparse_input_dim),
            ("n_tags", self.n_tags),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(1..=MAX_LAYERS).contains(&self.n_layers) {
            return Err(Error::Config(format!(
                "n_layers must be between 1 and {MAX_LAYERS}, got {}",
                self.n_layers
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Indices of one encoder layer's tensors in the [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub query_w: usize,
    pub query_b: usize,
    /// No key bias: it shifts every logit of a row equally and softmax
    /// ignores it.
    pub key_w: usize,
    pub value_w: usize,
    pub value_b: usize,
    pub output_w: usize,
    pub output_b: usize,
    pub relative: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub sparse_w: usize,
    pub sparse_b: usize,
    pub fuse_w: usize,
    pub fuse_b: usize,
    pub layers: Vec<LayerLayout>,
    pub emission_w: usize,
    pub emission_b: usize,
    pub transitions: usize,
    pub start: usize,
    pub end: usize,
}

enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Builds the parameter list in canonical order, calling `make` for each
/// tensor.
fn build_layout(
    cfg: &ModelConfig,
    mut make: impl FnMut(String, Vec<usize>, Init) -> usize,
) -> Layout {
    let d = cfg.d_model;
    let p = cfg.sparse_proj_dim;
    let fused_in = p + cfg.dense_dim;
    let sparse_w = make(
        "sparse.weight".into(),
        vec![cfg.sparse_input_dim, p],
        Init::FanIn(cfg.sparse_input_dim),
    );
    let sparse_b = make("sparse.bias".into(), vec![p], Init::Zeros);
    let fuse_w = make(
        "fuse.weight".into(),
        vec![fused_in, d],
        Init::FanIn(fused_in),
    );
    let fuse_b = make("fuse.bias".into(), vec![d], Init::Zeros);
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let mut m = |name: &str, shape: Vec<usize>, init: Init| {
                make(format!("layers.{l}.{name}"), shape, init)
            };
            LayerLayout {
                ln1_gain: m("ln1.gain", vec![d], Init::Ones),
                ln1_bias: m("ln1.bias", vec![d], Init::Zeros),
                query_w: m("attn.query.weight", vec![d, d], Init::FanIn(d)),
                query_b: m("attn.query.bias", vec![d], Init::Zeros),
                key_w: m("attn.key.weight", vec![d, d], Init::FanIn(d)),
                value_w: m("attn.value.weight", vec![d, d], Init::FanIn(d)),
                value_b: m("attn.value.bias", vec![d], Init::Zeros),
                output_w: m("attn.output.weight", vec![d, d], Init::FanIn(d)),
                output_b: m("attn.output.bias", vec![d], Init::Zeros),
                relative: m(
                    "attn.relative",
                    vec![2 * cfg.rel_clip + 1, cfg.head_dim()],
                    Init::FanIn(cfg.head_dim()),
                ),
                ln2_gain: m("ln2.gain", vec![d], Init::Ones),
                ln2_bias: m("ln2.bias", vec![d], Init::Zeros),
                ff1_w: m("ff1.weight", vec![d, cfg.ff_units], Init::FanIn(d)),
                ff1_b: m("ff1.bias", vec![cfg.ff_units], Init::Zeros),
                ff2_w: m(
                    "ff2.weight",
                    vec![cfg.ff_units, d],
                    Init::FanIn(cfg.ff_units),
                ),
                ff2_b: m("ff2.bias", vec![d], Init::Zeros),
            }
        })
        .collect();
    Layout {
        sparse_w,
        sparse_b,
        fuse_w,
        fuse_b,
        layers,
        emission_w: make(
            "emission.weight".into(),
            vec![d, cfg.n_tags],
            Init::FanIn(d),
        ),
        emission_b: make("emission.bias".into(), vec![cfg.n_tags], Init::Zeros),
        transitions: make(
            "crf.transitions".into(),
            vec![cfg.n_tags, cfg.n_tags],
            Init::Zeros,
        ),
        start: make("crf.start".into(), vec![cfg.n_tags], Init::Zeros),
        end: make("crf.end".into(), vec![cfg.n_tags], Init::Zeros),
    }
}

/// Names and shapes every parameter tensor must have for `cfg`.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    build_layout(cfg, |name, shape, _| {
        out.push((name, shape));
        out.len() - 1
    });
    out
}

/// All learnable tensors of the model plus the index layout over them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub layout: Layout,
}

impl ModelParams {
    /// Seeded fan-in uniform weights, zero biases, unit layer-norm gains and
    /// zero CRF scores, rounded to single precision.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let layout = build_layout(&config, |name, shape, init| {
            let tensor = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("sized from shape")
                }
            };
            set.push(name, tensor)
        });
        let mut params = ModelParams {
            config,
            set,
            layout,
        };
        params.round_to_f32();
        Ok(params)
    }

    /// Wraps tensors loaded from elsewhere, checking names and shapes.
    pub fn from_set(config: ModelConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != set.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                set.len()
            )));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            if set.name(i) != name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name}, found {}",
                    set.name(i)
                )));
            }
            if set.get(i).shape() != &shape[..] {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    set.get(i).shape()
                )));
            }
        }
        let layout = build_layout(&config, {
            let mut next = 0;
            move |_, _, _| {
                next += 1;
                next - 1
            }
        });
        Ok(ModelParams {
            config,
            set,
            layout,
        })
    }

    /// Rounds every value to the nearest `f32`, so the parameters survive a
    /// single-precision checkpoint bit for bit.
    pub fn round_to_f32(&mut self) {
        for t in self.set.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn transitions(&self) -> &Tensor {
        self.set.get(self.layout.transitions)
    }
}

/// One padded batch of `batch` sequences of `width` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub batch: usize,
    pub width: usize,
    /// Active sparse coordinates per position, `batch * width` bags.
    pub bags: Bags,
    /// Dense features, `batch * width * dense_dim`, zeros at padding.
    pub dense: Vec<f64>,
    /// `true` at real tokens, `false` at padding; `batch * width`.
    pub keep: Vec<bool>,
}

impl BatchInput {
    pub fn lengths(&self) -> Vec<usize> {
        self.keep
            .chunks(self.width.max(1))
            .map(|row| row.iter().filter(|k| **k).count())
            .collect()
    }
}

/// `relu(sparse · W + b)` with one weight matrix shared by every position.
pub fn sparse_projection(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    bags: Bags,
) -> Result<Var> {
    let width = params.config.sparse_input_dim;
    if let Some(&(bad, _)) = bags.iter().flatten().find(|(i, _)| *i >= width) {
        return Err(Error::Shape {
            op: "sparse_projection",
            left: vec![bad],
            right: vec![width],
        });
    }
    let l = &params.layout;
    let x = g.embedding_bag(vars[l.sparse_w], bags)?;
    let x = g.add(x, vars[l.sparse_b])?;
    g.relu(x)
}

/// Concatenates sparse output and dense features per token and projects to
/// `d_model`.
pub fn fuse(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    sparse_out: Var,
    dense: Option<Var>,
) -> Result<Var> {
    let l = &params.layout;
    let joined = match dense {
        Some(d) if params.config.dense_dim > 0 => g.concat(&[sparse_out, d])?,
        _ => sparse_out,
    };
    let y = g.matmul(joined, vars[l.fuse_w])?;
    g.add(y, vars[l.fuse_b])
}

/// Offset table `idx[i * width + j] = clip(j - i) + rel_clip`.
pub fn relative_index(width: usize, rel_clip: usize) -> Vec<usize> {
    let c = rel_clip as isize;
    let mut idx = Vec::with_capacity(width * width);
    for i in 0..width as isize {
        for j in 0..width as isize {
            idx.push(((j - i).clamp(-c, c) + c) as usize);
        }
    }
    idx
}

/// Splits `[batch * width, heads * dh]` into `[batch * heads, width, dh]`.
fn split_heads(
    g: &mut Graph,
    x: Var,
    batch: usize,
    width: usize,
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let x = g.reshape(x, &[batch, width, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, width, dh])
}

fn merge_heads(
    g: &mut Graph,
    x: Var,
    batch: usize,
    width: usize,
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let x = g.reshape(x, &[batch, heads, width, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * width, heads * dh])
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Output of one attention block.
pub struct Attention {
    /// `[batch * width, d_model]`
    pub output: Var,
    /// `[batch * heads, width, width]`, rows sum to one over kept keys.
    pub weights: Var,
}

/// Multi-head self-attention with relative position keys; padded keys get
/// zero weight.
pub fn relative_attention(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    layer: &LayerLayout,
    x: Var,
    input: &BatchInput,
) -> Result<Attention> {
    let cfg = &params.config;
    let (b, t, h, dh) = (input.batch, input.width, cfg.n_heads, cfg.head_dim());
    let q = affine(g, x, vars[layer.query_w], vars[layer.query_b])?;
    let k = g.matmul(x, vars[layer.key_w])?;
    let v = affine(g, x, vars[layer.value_w], vars[layer.value_b])?;
    let q = split_heads(g, q, b, t, h, dh)?;
    let k = split_heads(g, k, b, t, h, dh)?;
    let v = split_heads(g, v, b, t, h, dh)?;

    let kt = g.transpose(k)?;
    let content = g.batch_matmul(q, kt)?;

    let rel_t = g.transpose(vars[layer.relative])?;
    let q_rows = g.reshape(q, &[b * h * t, dh])?;
    let rel_scores = g.matmul(q_rows, rel_t)?;
    let rel_scores = g.reshape(rel_scores, &[b * h, t, 2 * cfg.rel_clip + 1])?;
    let rel = g.take_last(rel_scores, &relative_index(t, cfg.rel_clip), t)?;

    let logits = g.add(content, rel)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let weights = g.masked_softmax(logits, &input.keep, h * t)?;
    let dropped = g.dropout(weights, cfg.dropout)?;
    let ctx = g.batch_matmul(dropped, v)?;
    let ctx = merge_heads(g, ctx, b, t, h, dh)?;
    let output = affine(g, ctx, vars[layer.output_w], vars[layer.output_b])?;
    Ok(Attention { output, weights })
}

/// Pre-norm residual layer: attention block then feed-forward block.
pub fn encoder_layer(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    layer: &LayerLayout,
    x: Var,
    input: &BatchInput,
) -> Result<Var> {
    let rate = params.config.dropout;
    let h = g.layer_norm(x, vars[layer.ln1_gain], vars[layer.ln1_bias])?;
    let attn = relative_attention(g, params, vars, layer, h, input)?;
    let a = g.dropout(attn.output, rate)?;
    let x = g.add(x, a)?;

    let h = g.layer_norm(x, vars[layer.ln2_gain], vars[layer.ln2_bias])?;
    let f = affine(g, h, vars[layer.ff1_w], vars[layer.ff1_b])?;
    let f = g.relu(f)?;
    let f = affine(g, f, vars[layer.ff2_w], vars[layer.ff2_b])?;
    let f = g.dropout(f, rate)?;
    g.add(x, f)
}

pub struct Encoded {
    /// `[batch * width, d_model]`
    pub encoded: Var,
    /// `[batch, width, n_tags]`
    pub emissions: Var,
}

/// Sparse projection, fusion, the encoder stack and the emission layer.
pub fn encode(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    input: &BatchInput,
) -> Result<Encoded> {
    let cfg = &params.config;
    let rows = input.batch * input.width;
    if input.bags.len() != rows
        || input.keep.len() != rows
        || input.dense.len() != rows * cfg.dense_dim
    {
        return Err(Error::Shape {
            op: "encode",
            left: vec![input.bags.len(), input.keep.len(), input.dense.len()],
            right: vec![rows, cfg.dense_dim],
        });
    }
    let sparse = sparse_projection(g, params, vars, input.bags.clone())?;
    let dense = if cfg.dense_dim > 0 {
        Some(g.constant(Tensor::new(vec![rows, cfg.dense_dim], input.dense.clone())?)?)
    } else {
        None
    };
    let mut x = fuse(g, params, vars, sparse, dense)?;
    for layer in &params.layout.layers {
        x = encoder_layer(g, params, vars, layer, x, input)?;
    }
    let l = &params.layout;
    let emissions = affine(g, x, vars[l.emission_w], vars[l.emission_b])?;
    let emissions = g.reshape(emissions, &[input.batch, input.width, cfg.n_tags])?;
    Ok(Encoded {
        encoded: x,
        emissions,
    })
}

/// Mean per-sequence CRF negative log-likelihood of `gold` (padded like the
/// batch).
pub fn crf_loss(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    emissions: Var,
    gold: &[usize],
    lengths: &[usize],
) -> Result<Var> {
    let l = &params.layout;
    g.crf_nll(
        emissions,
        vars[l.transitions],
        vars[l.start],
        vars[l.end],
        gold,
        lengths,
    )
}
