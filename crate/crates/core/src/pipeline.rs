//! End-to-end stages shared by the CLI and the acceptance suite: data
//! preparation, pre-training, alignment and evaluation, each producing or
//! consuming checkpoints.

use clsp_autodiff::ParamStore;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::connector::{eval_probe, train_probe, Connector, ProbeOutcome, ProbeTable};
use crate::encoders::{EncoderVariant, StateEncoder, TextEncoder};
use crate::error::{ClspError, Result};
use crate::evaluation::RetrievalReport;
use crate::schema::StateSchema;
use crate::state::{generate_pairs, split_pairs, AgentState, StateTextPair};
use crate::text::Vocabulary;
use crate::training::{
    evaluate_pairs, init_state_params, run_alignment, run_pretraining, AlignOutcome, PretrainOutcome,
};

pub fn states_of(pairs: &[StateTextPair]) -> Vec<AgentState> {
    pairs.iter().map(|p| p.state.clone()).collect()
}

pub fn generate(cfg: &RunConfig) -> Vec<StateTextPair> {
    generate_pairs(cfg.data.n, cfg.data.seed, &cfg.data.generator)
}

pub fn split(cfg: &RunConfig, pairs: &[StateTextPair]) -> Result<(Vec<StateTextPair>, Vec<StateTextPair>)> {
    split_pairs(pairs, cfg.data.test_fraction, cfg.data.split_seed)
}

pub fn build_schema(variant: EncoderVariant, cfg: &RunConfig) -> Result<StateSchema> {
    StateSchema::new(variant.scalar_encoding(), cfg.schema.rff_seed, cfg.schema.sigma)
}

/// Vocabulary and value-aware init statistics come from the training texts only.
pub fn build_text_encoder(cfg: &RunConfig, train: &[StateTextPair]) -> Result<TextEncoder> {
    let texts: Vec<&str> = train.iter().map(|p| p.text.as_str()).collect();
    let vocab = Vocabulary::build(texts.iter().copied())?;
    let mut enc = TextEncoder::new(vocab, cfg.model.text);
    enc.fit_value_init(&texts)?;
    Ok(enc)
}

fn meta(
    kind: &str,
    variant: EncoderVariant,
    schema: &StateSchema,
    cfg: &RunConfig,
    step: usize,
    text: Option<&TextEncoder>,
) -> CheckpointMeta {
    CheckpointMeta {
        kind: kind.to_string(),
        variant,
        encoding: schema.encoding,
        rff_seed: schema.rff_seed,
        sigma: schema.sigma,
        schema_hash: schema.hash(),
        seed: cfg.train.seed,
        step,
        state_dims: cfg.model.state,
        text_dims: text.map(|t| t.dims),
        vocab: text.map(|t| t.vocab.tokens().to_vec()),
        config: cfg.to_json(),
    }
}

/// Pre-trains the state encoder of `variant` on the training states.
pub fn pretrain(
    variant: EncoderVariant,
    cfg: &RunConfig,
    train: &[AgentState],
    eval: &[AgentState],
) -> Result<(PretrainOutcome, Checkpoint)> {
    let schema = build_schema(variant, cfg)?;
    let encoder = StateEncoder::new(variant, &schema, cfg.model.state)?;
    let train_cfg = crate::training::TrainConfig {
        epochs: cfg.pretrain.epochs,
        ..cfg.train.clone()
    };
    let out = run_pretraining(&encoder, &schema, train, eval, &train_cfg)?;
    let ckpt = Checkpoint {
        meta: meta("pretrain", variant, &schema, cfg, out.steps, None),
        tensors: out.params.clone(),
        banks: schema.bank_records(),
    };
    Ok((out, ckpt))
}

/// Contrastive alignment; `init` must be a pre-training checkpoint exactly
/// when the variant uses pre-trained initialization.
pub fn align(
    variant: EncoderVariant,
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    train: &[StateTextPair],
    test: &[StateTextPair],
) -> Result<(AlignOutcome, Checkpoint)> {
    let schema = match init {
        Some(ckpt) => {
            if ckpt.meta.variant != variant {
                return Err(ClspError::Config(format!(
                    "init checkpoint is for variant {}, not {variant}",
                    ckpt.meta.variant
                )));
            }
            ckpt.schema()?
        }
        None => build_schema(variant, cfg)?,
    };
    let encoder = StateEncoder::new(variant, &schema, cfg.model.state)?;
    let text = build_text_encoder(cfg, train)?;
    let out = run_alignment(&encoder, &text, &schema, init.map(|c| &c.tensors), train, test, &cfg.train)?;
    let ckpt = Checkpoint {
        meta: meta("align", variant, &schema, cfg, out.steps, Some(&text)),
        tensors: out.params.clone(),
        banks: schema.bank_records(),
    };
    Ok((out, ckpt))
}

/// Encoders and parameters restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: EncoderVariant,
    pub schema: StateSchema,
    pub state: StateEncoder,
    pub text: Option<TextEncoder>,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let schema = ckpt.schema()?;
        let state = StateEncoder::new(ckpt.meta.variant, &schema, ckpt.meta.state_dims)?;
        let text = match (&ckpt.meta.vocab, ckpt.meta.text_dims) {
            (Some(tokens), Some(dims)) => Some(TextEncoder::new(Vocabulary::from_tokens(tokens.clone())?, dims)),
            _ => None,
        };
        Ok(Self {
            variant: ckpt.meta.variant,
            schema,
            state,
            text,
            params: ckpt.tensors.clone(),
        })
    }

    pub fn text_encoder(&self) -> Result<&TextEncoder> {
        self.text
            .as_ref()
            .ok_or_else(|| ClspError::Config("checkpoint has no text encoder".into()))
    }

    pub fn encode_states(&self, states: &[AgentState]) -> Result<Vec<f32>> {
        self.state.encode_features(&self.params, &self.schema.flatten_batch(states))
    }

    /// Retrieval over `pairs`: texts query the states of the same pairs.
    pub fn evaluate(&self, pairs: &[StateTextPair], ks: &[usize]) -> Result<RetrievalReport> {
        let text = self.text_encoder()?;
        // Losses are discarded, so the temperature is irrelevant here.
        let (report, _) = evaluate_pairs(&self.state, text, &self.schema, &self.params, pairs, 1.0, ks)?;
        Ok(report)
    }
}

/// Full retrieval report over the test split with R@1, R@5 and R@10.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, test: &[StateTextPair]) -> Result<RetrievalReport> {
    Model::from_checkpoint(ckpt)?.evaluate(test, &[1, 5, 10])
}

/// Pre-training (when the variant uses it) followed by alignment.
pub fn train_variant(
    variant: EncoderVariant,
    cfg: &RunConfig,
    train: &[StateTextPair],
    test: &[StateTextPair],
) -> Result<(Option<Checkpoint>, AlignOutcome, Checkpoint)> {
    let pre = if variant.pretrained_init() {
        let (_, ckpt) = pretrain(variant, cfg, &states_of(train), &states_of(test))?;
        Some(ckpt)
    } else {
        None
    };
    let (out, ckpt) = align(variant, cfg, pre.as_ref(), train, test)?;
    Ok((pre, out, ckpt))
}

/// Probe tables (frozen stage and after unfreezing) for a state encoder.
pub fn probe(
    variant: EncoderVariant,
    cfg: &RunConfig,
    schema: &StateSchema,
    state_params: &ParamStore<f32>,
    train: &[AgentState],
    test: &[AgentState],
) -> Result<(ProbeOutcome, ProbeTable)> {
    let encoder = StateEncoder::new(variant, schema, cfg.model.state)?;
    let connector = Connector::new(cfg.model.connector);
    let out = train_probe(&encoder, &connector, schema, state_params, train, Some(test), &cfg.probe)?;
    let table = eval_probe(&encoder, &connector, schema, &out.params, test)?;
    Ok((out, table))
}

/// A freshly initialized state encoder with the run seed.
pub fn random_state_params(variant: EncoderVariant, cfg: &RunConfig) -> Result<(StateSchema, ParamStore<f32>)> {
    let schema = build_schema(variant, cfg)?;
    let encoder = StateEncoder::new(variant, &schema, cfg.model.state)?;
    Ok((schema, init_state_params(&encoder, cfg.train.seed)))
}

pub fn probe_checkpoint(
    cfg: &RunConfig,
    variant: EncoderVariant,
    schema: &StateSchema,
    out: &ProbeOutcome,
) -> Checkpoint {
    Checkpoint {
        meta: meta("probe", variant, schema, cfg, 0, None),
        tensors: out.params.clone(),
        banks: schema.bank_records(),
    }
}
