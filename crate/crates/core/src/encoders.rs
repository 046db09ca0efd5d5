//! State encoder (optional per-item front-end MLPs, input layer, residual
//! blocks, projection), the compact text encoder, and pre-training heads.
//!
//! Parameters live in a flat [`ParamStore`] under the prefixes `state.`,
//! `text.` and `head.`; forward passes are generic over the float type so the
//! same code runs in `f64` for gradient checks.

use clsp_autodiff::{Bound, Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClspError, Result};
use crate::rng::standard_normal;
use crate::schema::{ItemKind, ScalarEncoding, StateSchema};
use crate::text::{decode_digit_feature, slot_maxima, Vocabulary, NUMBER_SLOTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Random init, identity scalars.
    ClipBaseline,
    /// Pre-trained init, identity scalars.
    #[serde(rename = "baseline")]
    ClspBaseline,
    #[serde(rename = "msn")]
    ClspMsn,
    #[serde(rename = "npe")]
    ClspNpe,
    #[serde(rename = "rff")]
    ClspRff,
    /// RFF followed by trainable per-item MLPs.
    #[serde(rename = "rffm")]
    ClspRffm,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 6] = [
        EncoderVariant::ClipBaseline,
        EncoderVariant::ClspBaseline,
        EncoderVariant::ClspMsn,
        EncoderVariant::ClspNpe,
        EncoderVariant::ClspRff,
        EncoderVariant::ClspRffm,
    ];

    pub fn scalar_encoding(self) -> ScalarEncoding {
        match self {
            EncoderVariant::ClipBaseline | EncoderVariant::ClspBaseline => ScalarEncoding::Identity,
            EncoderVariant::ClspMsn => ScalarEncoding::Msn,
            EncoderVariant::ClspNpe => ScalarEncoding::Npe,
            EncoderVariant::ClspRff | EncoderVariant::ClspRffm => ScalarEncoding::Rff,
        }
    }

    pub fn pretrained_init(self) -> bool {
        self != EncoderVariant::ClipBaseline
    }

    pub fn has_front_end(self) -> bool {
        self == EncoderVariant::ClspRffm
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::ClipBaseline => "clip-baseline",
            EncoderVariant::ClspBaseline => "baseline",
            EncoderVariant::ClspMsn => "msn",
            EncoderVariant::ClspNpe => "npe",
            EncoderVariant::ClspRff => "rff",
            EncoderVariant::ClspRffm => "rffm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ClspError::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateDims {
    pub trunk: usize,
    pub embed: usize,
    pub blocks: usize,
    pub front_hidden: usize,
}

impl Default for StateDims {
    fn default() -> Self {
        Self {
            trunk: 256,
            embed: 128,
            blocks: 3,
            front_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextDims {
    pub token: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Standard deviation of the initial token table.
    pub init_std: f64,
    /// Scale of the value-aware component added to digit rows at init,
    /// relative to the mean feature count per text; 0 disables it.
    pub value_scale: f64,
}

impl Default for TextDims {
    fn default() -> Self {
        Self {
            token: 64,
            hidden: 256,
            embed: 128,
            init_std: 1.0,
            value_scale: 1.0,
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
pub fn init_linear(
    params: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut sample = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
            .collect()
    };
    let w = sample(fan_in * fan_out);
    let b = sample(fan_out);
    params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
    params.insert(format!("{name}.b"), Tensor::new(vec![fan_out], b).unwrap());
}

pub fn linear<T: Float>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, b)?)
}

#[derive(Debug, Clone)]
struct FrontGroup {
    name: String,
    offset: usize,
    width: usize,
}

/// Maps flattened state features to unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    pub variant: EncoderVariant,
    pub dims: StateDims,
    input_width: usize,
    /// Column ranges in schema order; scalar items get a front-end MLP under RFFM.
    groups: Vec<(FrontGroup, bool)>,
}

impl StateEncoder {
    pub fn new(variant: EncoderVariant, schema: &StateSchema, dims: StateDims) -> Result<Self> {
        if schema.encoding != variant.scalar_encoding() {
            return Err(ClspError::Config(format!(
                "variant {variant} needs {:?} scalars, schema has {:?}",
                variant.scalar_encoding(),
                schema.encoding
            )));
        }
        let groups = schema
            .items()
            .iter()
            .map(|item| {
                (
                    FrontGroup {
                        name: format!("state.front.{}", item.id),
                        offset: item.offset,
                        width: item.width,
                    },
                    matches!(item.kind, ItemKind::Scalar { .. }),
                )
            })
            .collect();
        Ok(Self {
            variant,
            dims,
            input_width: schema.width(),
            groups,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        let d = self.dims;
        if self.variant.has_front_end() {
            for (g, scalar) in &self.groups {
                if *scalar {
                    init_linear(&mut p, rng, &format!("{}.l1", g.name), g.width, d.front_hidden);
                    init_linear(&mut p, rng, &format!("{}.l2", g.name), d.front_hidden, g.width);
                }
            }
        }
        init_linear(&mut p, rng, "state.in", self.input_width, d.trunk);
        for i in 0..d.blocks {
            init_linear(&mut p, rng, &format!("state.block{i}.l1"), d.trunk, d.trunk);
            init_linear(&mut p, rng, &format!("state.block{i}.l2"), d.trunk, d.trunk);
        }
        init_linear(&mut p, rng, "state.proj", d.trunk, d.embed);
        p
    }

    /// Sets every front-end MLP to an identity-like map:
    /// `x -> gelu(x + 10) - 10`, which equals `x` to float precision on `[-1, 1]`.
    pub fn set_identity_front_end(&self, params: &mut ParamStore<f32>) {
        const SHIFT: f32 = 10.0;
        let h = self.dims.front_hidden;
        for (g, scalar) in &self.groups {
            if !*scalar || !self.variant.has_front_end() {
                continue;
            }
            let w = g.width;
            let mut w1 = vec![0.0f32; w * h];
            let mut b1 = vec![0.0f32; h];
            let mut w2 = vec![0.0f32; h * w];
            let b2 = vec![-SHIFT; w];
            for j in 0..w.min(h) {
                w1[j * h + j] = 1.0;
                b1[j] = SHIFT;
                w2[j * w + j] = 1.0;
            }
            params.insert(format!("{}.l1.w", g.name), Tensor::new(vec![w, h], w1).unwrap());
            params.insert(format!("{}.l1.b", g.name), Tensor::new(vec![h], b1).unwrap());
            params.insert(format!("{}.l2.w", g.name), Tensor::new(vec![h, w], w2).unwrap());
            params.insert(format!("{}.l2.b", g.name), Tensor::new(vec![w], b2).unwrap());
        }
    }

    fn front_end<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if !self.variant.has_front_end() {
            return Ok(x);
        }
        let mut parts = Vec::with_capacity(self.groups.len());
        for (g, scalar) in &self.groups {
            let cols = tape.slice_cols(x, g.offset, g.offset + g.width)?;
            if *scalar {
                let h = linear(tape, p, &format!("{}.l1", g.name), cols)?;
                let h = tape.gelu(h);
                parts.push(linear(tape, p, &format!("{}.l2", g.name), h)?);
            } else {
                parts.push(cols);
            }
        }
        Ok(tape.concat_cols(&parts)?)
    }

    /// Front end (if any), input layer and residual blocks: `[B, trunk]`.
    pub fn trunk<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input_width {
            return Err(ClspError::WidthMismatch("state encoder input", self.input_width, width));
        }
        let x = self.front_end(tape, p, x)?;
        let mut h = linear(tape, p, "state.in", x)?;
        for i in 0..self.dims.blocks {
            let r = linear(tape, p, &format!("state.block{i}.l1"), h)?;
            let r = tape.gelu(r);
            let r = linear(tape, p, &format!("state.block{i}.l2"), r)?;
            h = tape.add(h, r)?;
        }
        Ok(h)
    }

    /// Projection of trunk features, before normalization.
    pub fn project<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, trunk: Var) -> Result<Var> {
        linear(tape, p, "state.proj", trunk)
    }

    /// Unit-norm embeddings `[B, embed]`.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.trunk(tape, p, x)?;
        let z = self.project(tape, p, h)?;
        Ok(tape.l2_normalize(z)?)
    }

    /// Inference over row-major features, chunked to bound memory.
    pub fn encode_features(&self, params: &ParamStore<f32>, features: &[f32]) -> Result<Vec<f32>> {
        let w = self.input_width;
        if features.len() % w != 0 {
            return Err(ClspError::WidthMismatch("state features", w, features.len() % w));
        }
        let state_params = params.filter_prefix("state.");
        let mut out = Vec::with_capacity(features.len() / w * self.dims.embed);
        for chunk in features.chunks(512 * w) {
            let mut tape = Tape::<f32>::new();
            let bound = state_params.bind_with(&mut tape, |_| false);
            let x = tape.constant(Tensor::new(vec![chunk.len() / w, w], chunk.to_vec())?);
            let e = self.embed(&mut tape, &bound, x)?;
            out.extend_from_slice(tape.value(e).data());
        }
        Ok(out)
    }

    /// Unit-norm embedding of one state.
    pub fn encode_state(
        &self,
        params: &ParamStore<f32>,
        schema: &StateSchema,
        state: &crate::state::AgentState,
    ) -> Result<Vec<f32>> {
        let flat: Vec<f32> = schema.flatten_state(state).into_iter().map(|v| v as f32).collect();
        self.encode_features(params, &flat)
    }
}

/// Slot-keyed token embeddings, mean pooling, a two-layer GELU MLP and a projection.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub dims: TextDims,
    pub vocab: Vocabulary,
    /// Per number slot, the largest value seen in the training texts.
    slot_maxima: Vec<f64>,
    /// Mean number of features per training text.
    mean_features: f64,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, dims: TextDims) -> Self {
        Self {
            dims,
            vocab,
            slot_maxima: vec![0.0; NUMBER_SLOTS],
            mean_features: 0.0,
        }
    }

    /// Records the corpus statistics used by the value-aware init: per-slot
    /// value maxima and the mean feature count.
    pub fn fit_value_init(&mut self, texts: &[&str]) -> Result<()> {
        self.slot_maxima = slot_maxima(&self.vocab, texts.iter().copied())?;
        let total = texts
            .iter()
            .map(|t| self.vocab.features(t).map(|f| f.len()))
            .sum::<Result<usize>>()?;
        self.mean_features = total as f64 / texts.len().max(1) as f64;
        Ok(())
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        let rows = self.vocab.feature_rows();
        let dim = self.dims.token;
        let mut table: Vec<f32> = (0..rows * dim)
            .map(|_| (standard_normal(rng) * self.dims.init_std) as f32)
            .collect();
        let gain = self.dims.value_scale * self.mean_features;
        if gain > 0.0 {
            // Each number slot gets a random unit direction; a digit row moves
            // along it in proportion to the digit's share of the slot maximum,
            // so the pooled vector carries about (value / max) along it.
            let directions: Vec<Vec<f64>> = (0..NUMBER_SLOTS)
                .map(|_| {
                    let u: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
                    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    u.into_iter().map(|v| v / n).collect()
                })
                .collect();
            for (row, chunk) in table.chunks_mut(dim).enumerate() {
                let Some(f) = decode_digit_feature(row, self.vocab.len()) else {
                    continue;
                };
                let max = self.slot_maxima[f.slot];
                if max <= 0.0 {
                    continue;
                }
                let scale = gain * f.value() / max;
                for (v, u) in chunk.iter_mut().zip(&directions[f.slot]) {
                    *v += (scale * u) as f32;
                }
            }
        }
        p.insert("text.embed", Tensor::new(vec![rows, self.dims.token], table).unwrap());
        init_linear(&mut p, rng, "text.mlp1", self.dims.token, self.dims.hidden);
        init_linear(&mut p, rng, "text.mlp2", self.dims.hidden, self.dims.hidden);
        init_linear(&mut p, rng, "text.proj", self.dims.hidden, self.dims.embed);
        p
    }

    pub fn features(&self, text: &str) -> Result<Vec<usize>> {
        self.vocab.features(text)
    }

    /// Unit-norm embeddings for pre-computed feature id lists.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, ids: Vec<Vec<usize>>) -> Result<Var> {
        let pooled = tape.embedding_mean(p.get("text.embed")?, ids)?;
        let h = linear(tape, p, "text.mlp1", pooled)?;
        let h = tape.gelu(h);
        let h = linear(tape, p, "text.mlp2", h)?;
        let h = tape.gelu(h);
        let z = linear(tape, p, "text.proj", h)?;
        Ok(tape.l2_normalize(z)?)
    }

    pub fn encode_ids(&self, params: &ParamStore<f32>, ids: &[Vec<usize>]) -> Result<Vec<f32>> {
        let text_params = params.filter_prefix("text.");
        let mut out = Vec::with_capacity(ids.len() * self.dims.embed);
        for chunk in ids.chunks(512) {
            let mut tape = Tape::<f32>::new();
            let bound = text_params.bind_with(&mut tape, |_| false);
            let e = self.embed(&mut tape, &bound, chunk.to_vec())?;
            out.extend_from_slice(tape.value(e).data());
        }
        Ok(out)
    }

    pub fn encode_text(&self, params: &ParamStore<f32>, text: &str) -> Result<Vec<f32>> {
        self.encode_ids(params, &[self.features(text)?])
    }
}

/// One linear classifier per schema item on the trunk features.
pub fn init_heads(schema: &StateSchema, trunk: usize, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    for item in schema.items() {
        init_linear(&mut p, rng, &format!("head.{}", item.id), trunk, item.class_count());
    }
    p
}

/// Logits of every item head, in schema order.
pub fn head_logits<T: Float>(
    tape: &mut Tape<T>,
    p: &Bound,
    schema: &StateSchema,
    trunk: Var,
) -> Result<Vec<Var>> {
    schema
        .items()
        .iter()
        .map(|item| linear(tape, p, &format!("head.{}", item.id), trunk))
        .collect()
}
