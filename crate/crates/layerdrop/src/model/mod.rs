//! Transformer block variants and full-model assembly.
//!
//! Three block orderings share one implementation path:
//!
//! - PostLN: `h = LN(x + ATTN(x))`, `x' = LN(h + FFN(h))`;
//! - PreLN:  `h = x + ATTN(LN(x))`, `x' = h + FFN(LN(h))` — the skip path
//!   carries `x` unmodified;
//! - switchable (ST): a PreLN block whose two residual branches are gated by
//!   one shared Bernoulli outcome; an active branch is multiplied by `1/p`
//!   during training and a gated-off block is skipped entirely, touching
//!   neither the tape nor its weights.
//!
//! The full model is embeddings (token + learned position) → L blocks →
//! final layer norm (PreLN/ST only) → logits through the transposed token
//! embedding (tied head).

mod checkpoint;
pub(crate) mod forward;

pub use checkpoint::{load_checkpoint, load_checkpoint_config, save_checkpoint};
pub use forward::{
    feed_forward, forward_blocks_from, forward_model, postln_block, preln_block, self_attention,
    st_block, ForwardOptions, ModelBindings,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Block ordering variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(alias = "post_ln")]
    PostLn,
    #[serde(alias = "pre_ln")]
    PreLn,
    St,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::PostLn => "postln",
            Variant::PreLn => "preln",
            Variant::St => "st",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "postln" | "post_ln" => Ok(Variant::PostLn),
            "preln" | "pre_ln" => Ok(Variant::PreLn),
            "st" => Ok(Variant::St),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected postln, preln or st"
            ))),
        }
    }

    /// PreLN-family variants end with an extra normalization before the head.
    pub fn has_final_norm(&self) -> bool {
        !matches!(self, Variant::PostLn)
    }
}

/// Model dimensions and variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of blocks L.
    pub layers: usize,
    /// Hidden size d.
    pub hidden: usize,
    /// Attention heads H; head size is `hidden / heads`.
    pub heads: usize,
    /// Vocabulary size V.
    pub vocab: usize,
    /// Maximum (and fixed) sequence length S.
    pub max_seq: usize,
    pub variant: Variant,
    /// Dropout rate on attention probabilities and FFN outputs (training only).
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Epsilon inside the layer-norm variance square root.
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Truncated-normal std for matrix/embedding init. The 0.02 default is
    /// the usual convention; analyses that need full-scale residual
    /// magnitudes at toy widths may document a larger value.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

fn default_dropout() -> f64 {
    0.1
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab and max_seq must be positive".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }
}

/// One block's parameters.
#[derive(Debug, Clone)]
pub struct BlockWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

/// Full parameter set.
#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    /// V×d table; also the (transposed) output head — weights are tied.
    pub token_embedding: Tensor<T>,
    /// Learned position table, max_seq×d.
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    /// Present for PreLN/ST, absent for PostLN.
    pub final_norm: Option<(Tensor<T>, Tensor<T>)>,
}

const INIT_STREAM: u64 = 0x696e_6974;

impl<T: Scalar> ModelWeights<T> {
    /// Initialize: truncated normal (std 0.02, clipped at 2σ) for matrices
    /// and embeddings, zeros for biases, ones for norm gains.
    ///
    /// Draws are consumed in the canonical parameter order, and norm
    /// parameters consume none, so PostLN and PreLN models built from the
    /// same seed share identical matrix/embedding values.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = KeyedRng::new(seed, &[INIT_STREAM]);
        let d = config.hidden;
        let ff = config.ffn_dim();
        let std = config.init_std;
        let mut mat = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(rng.trunc_normal(std)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("well-formed init shape")
        };

        let token_embedding = mat(config.vocab, d);
        let position_embedding = mat(config.max_seq, d);
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                w_q: mat(d, d),
                w_k: mat(d, d),
                w_v: mat(d, d),
                w_o: mat(d, d),
                w1: mat(d, ff),
                b1: Tensor::zeros(vec![ff]),
                w2: mat(ff, d),
                b2: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::filled(vec![d], T::ONE),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], T::ONE),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        let final_norm = config
            .variant
            .has_final_norm()
            .then(|| (Tensor::filled(vec![d], T::ONE), Tensor::zeros(vec![d])));

        ModelWeights {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
        }
    }

    /// Visit `(name, tensor)` in canonical order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in block_fields(b) {
                f(&format!("block{i}.{field}"), t);
            }
        }
        if let Some((gain, bias)) = &self.final_norm {
            f("final_norm.gain", gain);
            f("final_norm.bias", bias);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(|name, _| names.push(name.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.try_param(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn try_param(&self, name: &str) -> Option<&Tensor<T>> {
        match name {
            "token_embedding" => return Some(&self.token_embedding),
            "position_embedding" => return Some(&self.position_embedding),
            "final_norm.gain" => return self.final_norm.as_ref().map(|(g, _)| g),
            "final_norm.bias" => return self.final_norm.as_ref().map(|(_, b)| b),
            _ => {}
        }
        let rest = name.strip_prefix("block")?;
        let (idx, field) = rest.split_once('.')?;
        let b = self.blocks.get(idx.parse::<usize>().ok()?)?;
        block_fields(b)
            .into_iter()
            .find(|(f, _)| *f == field)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        match name {
            "token_embedding" => return &mut self.token_embedding,
            "position_embedding" => return &mut self.position_embedding,
            "final_norm.gain" => {
                return &mut self.final_norm.as_mut().expect("final norm present").0
            }
            "final_norm.bias" => {
                return &mut self.final_norm.as_mut().expect("final norm present").1
            }
            _ => {}
        }
        let rest = name.strip_prefix("block").expect("block parameter");
        let (idx, field) = rest.split_once('.').expect("block{i}.field");
        let b = &mut self.blocks[idx.parse::<usize>().expect("block index")];
        match field {
            "attn.w_q" => &mut b.w_q,
            "attn.w_k" => &mut b.w_k,
            "attn.w_v" => &mut b.w_v,
            "attn.w_o" => &mut b.w_o,
            "ffn.w1" => &mut b.w1,
            "ffn.b1" => &mut b.b1,
            "ffn.w2" => &mut b.w2,
            "ffn.b2" => &mut b.b2,
            "norm1.gain" => &mut b.ln1_gain,
            "norm1.bias" => &mut b.ln1_bias,
            "norm2.gain" => &mut b.ln2_gain,
            "norm2.bias" => &mut b.ln2_bias,
            other => panic!("unknown block field {other}"),
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    w_q: b.w_q.cast(),
                    w_k: b.w_k.cast(),
                    w_v: b.w_v.cast(),
                    w_o: b.w_o.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                })
                .collect(),
            final_norm: self
                .final_norm
                .as_ref()
                .map(|(g, b)| (g.cast(), b.cast())),
        }
    }
}

fn block_fields<T>(b: &BlockWeights<T>) -> [(&'static str, &Tensor<T>); 12] {
    [
        ("attn.w_q", &b.w_q),
        ("attn.w_k", &b.w_k),
        ("attn.w_v", &b.w_v),
        ("attn.w_o", &b.w_o),
        ("ffn.w1", &b.w1),
        ("ffn.b1", &b.b1),
        ("ffn.w2", &b.w2),
        ("ffn.b2", &b.b2),
        ("norm1.gain", &b.ln1_gain),
        ("norm1.bias", &b.ln1_bias),
        ("norm2.gain", &b.ln2_gain),
        ("norm2.bias", &b.ln2_bias),
    ]
}

/// Per-layer gate decisions plus the branch scale applied when active.
///
/// A scale of `1/p` implements the inverted-dropout convention during
/// training; evaluation uses scale 1. Scaling ops are skipped entirely when
/// the scale is exactly 1, so an all-on plan is bitwise identical to an
/// ungated PreLN model.
#[derive(Debug, Clone)]
pub struct GatePlan {
    pub gates: Vec<bool>,
    pub scales: Vec<f64>,
}

impl GatePlan {
    /// Every block active, no rescaling.
    pub fn full_depth(layers: usize) -> Self {
        GatePlan {
            gates: vec![true; layers],
            scales: vec![1.0; layers],
        }
    }

    pub fn kept(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }
}

/// Named parameter gradients; shapes mirror their parameters.
///
/// Parameters whose blocks were gated off at a step are absent: they took
/// part in neither the forward nor the backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T>(pub BTreeMap<String, Tensor<T>>);

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Global 2-norm across every gradient, fixed order.
    pub fn global_norm(&self) -> T {
        let mut acc = T::ZERO;
        for g in self.0.values() {
            for &v in g.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|g| g.all_finite())
    }
}

/// Collect gradients for every parameter the forward pass touched.
pub fn collect_grads<T: Scalar>(tape: &Tape<T>, bindings: &ModelBindings) -> GradientMap<T> {
    let mut map = BTreeMap::new();
    for (name, id) in &bindings.params {
        map.insert(name.clone(), tape.grad_or_zeros(*id));
    }
    GradientMap(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab: 11,
            max_seq: 4,
            variant,
            dropout: 0.0,
            ln_eps: 1e-12,
            init_std: 0.02,
        }
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = tiny_config(Variant::PreLn);
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
        cfg.layers = 2;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic_and_within_clip() {
        let cfg = tiny_config(Variant::PreLn);
        let a = ModelWeights::<f32>::init(&cfg, 9);
        let b = ModelWeights::<f32>::init(&cfg, 9);
        let c = ModelWeights::<f32>::init(&cfg, 10);
        assert_eq!(a.token_embedding.data(), b.token_embedding.data());
        assert_ne!(a.token_embedding.data(), c.token_embedding.data());
        for &v in a.blocks[0].w_q.data() {
            assert!(v.abs() <= 0.04 + 1e-6);
        }
    }

    #[test]
    fn postln_and_preln_share_matrix_init_at_same_seed() {
        let post = ModelWeights::<f64>::init(&tiny_config(Variant::PostLn), 3);
        let pre = ModelWeights::<f64>::init(&tiny_config(Variant::PreLn), 3);
        assert_eq!(post.blocks[1].w1.data(), pre.blocks[1].w1.data());
        assert!(post.final_norm.is_none());
        assert!(pre.final_norm.is_some());
    }

    #[test]
    fn param_round_trip_by_name() {
        let mut w = ModelWeights::<f64>::init(&tiny_config(Variant::St), 1);
        for name in w.param_names() {
            let shape = w.param(&name).shape().to_vec();
            assert_eq!(w.param_mut(&name).shape(), &shape[..]);
        }
        assert_eq!(
            w.num_params(),
            w.param_names()
                .iter()
                .map(|n| w.param(n).numel())
                .sum::<usize>()
        );
    }
}
