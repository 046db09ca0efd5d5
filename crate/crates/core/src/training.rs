//! Classification pre-training and contrastive alignment.

use std::collections::BTreeMap;

use clsp_autodiff::{AdamW, AdamWConfig, Float, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{head_logits, init_heads, StateEncoder, TextEncoder};
use crate::error::{ClspError, Result};
use crate::evaluation::{retrieval_report, EvalItem, RetrievalReport};
use crate::rng::{chacha, derive_seed};
use crate::schema::{StateSchema, TargetSet};
use crate::state::{AgentState, StateTextPair};

/// Seed streams derived from the run seed.
const STREAM_STATE_INIT: u64 = 1;
const STREAM_HEAD_INIT: u64 = 2;
const STREAM_TEXT_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub target: TargetSet,
    /// Steps between evaluations; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub eval_queries: usize,
    /// Stop after this many steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            temperature: 1.0,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 3,
            seed: 0,
            target: TargetSet::All,
            eval_interval: 200,
            eval_queries: 1000,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(ClspError::Config("batch_size must be >= 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ClspError::Config("temperature must be > 0".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ClspError::Config("lr must be > 0 and weight_decay >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(ClspError::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn schedule(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        if self.batch_size > n {
            return Err(ClspError::Config(format!(
                "batch size {} larger than dataset of {n}",
                self.batch_size
            )));
        }
        let mut batches = Vec::new();
        for epoch in 0..self.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut chacha(derive_seed(self.seed, STREAM_SHUFFLE + epoch as u64)));
            for chunk in order.chunks_exact(self.batch_size) {
                batches.push(chunk.to_vec());
                if self.max_steps.is_some_and(|m| batches.len() >= m) {
                    return Ok(batches);
                }
            }
        }
        Ok(batches)
    }
}

/// Sum over `items` of the batch-mean cross-entropy of each item head.
/// `labels[row][item]` holds class indices in schema order.
pub fn pretrain_loss<T: Float>(
    tape: &mut Tape<T>,
    logits: &[Var],
    labels: &[Vec<usize>],
    items: &[usize],
) -> Result<Var> {
    if items.is_empty() {
        return Err(ClspError::Config("classifier target set is empty".into()));
    }
    let mut terms = Vec::with_capacity(items.len());
    for &j in items {
        let targets: Vec<usize> = labels.iter().map(|l| l[j]).collect();
        terms.push(tape.cross_entropy(logits[j], &targets)?);
    }
    Ok(tape.sum(&terms)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveTerms {
    pub s2t: Var,
    pub t2s: Var,
    pub total: Var,
}

/// Symmetric in-batch contrastive loss over similarities `S·Tᵀ / τ`.
pub fn contrastive_loss<T: Float>(tape: &mut Tape<T>, s: Var, t: Var, temperature: f64) -> Result<ContrastiveTerms> {
    let b = tape.value(s).rows();
    if b < 1 {
        return Err(ClspError::Config("contrastive batch is empty".into()));
    }
    if tape.value(t).rows() != b {
        return Err(ClspError::WidthMismatch("contrastive batch", b, tape.value(t).rows()));
    }
    let sim = tape.matmul_nt(s, t)?;
    let logits = tape.scale(sim, T::from_f64(1.0 / temperature));
    let targets: Vec<usize> = (0..b).collect();
    let s2t = tape.cross_entropy(logits, &targets)?;
    let logits_t = tape.transpose(logits)?;
    let t2s = tape.cross_entropy(logits_t, &targets)?;
    let both = tape.sum(&[s2t, t2s])?;
    let total = tape.scale(both, T::from_f64(0.5));
    Ok(ContrastiveTerms { s2t, t2s, total })
}

fn gather_rows(features: &[f32], width: usize, rows: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&features[r * width..(r + 1) * width]);
    }
    Ok(Tensor::new(vec![rows.len(), width], data)?)
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ClspError::NonFiniteLoss { step, loss })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_accuracy: f64,
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// `state.*` and `head.*` parameters.
    pub params: ParamStore<f32>,
    pub log: Vec<PretrainRecord>,
    pub steps: usize,
    pub final_loss: f64,
}

/// Initial state-encoder parameters for a run seed.
pub fn init_state_params(encoder: &StateEncoder, seed: u64) -> ParamStore<f32> {
    let mut params = encoder.init_params(&mut chacha(derive_seed(seed, STREAM_STATE_INIT)));
    encoder.set_identity_front_end(&mut params);
    params
}

pub fn init_text_params(encoder: &TextEncoder, seed: u64) -> ParamStore<f32> {
    encoder.init_params(&mut chacha(derive_seed(seed, STREAM_TEXT_INIT)))
}

/// Per-item accuracy of the heads on `states`, for items in `items`.
pub fn head_accuracy(
    encoder: &StateEncoder,
    schema: &StateSchema,
    params: &ParamStore<f32>,
    states: &[AgentState],
    items: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let mut correct = vec![0usize; schema.items().len()];
    for chunk in states.chunks(512) {
        let mut tape = Tape::<f32>::new();
        let bound = params.bind_with(&mut tape, |_| false);
        let x = tape.constant(Tensor::new(
            vec![chunk.len(), schema.width()],
            schema.flatten_batch(chunk),
        )?);
        let trunk = encoder.trunk(&mut tape, &bound, x)?;
        let logits = head_logits(&mut tape, &bound, schema, trunk)?;
        for (row, s) in chunk.iter().enumerate() {
            let labels = schema.build_class_labels(s);
            for &j in items {
                let out = tape.value(logits[j]).row(row);
                let mut best = 0;
                for c in 1..out.len() {
                    if out[c] > out[best] {
                        best = c;
                    }
                }
                correct[j] += usize::from(best == labels[j]);
            }
        }
    }
    Ok(items
        .iter()
        .map(|&j| (schema.items()[j].id.clone(), correct[j] as f64 / states.len() as f64))
        .collect())
}

/// Trains the state-encoder trunk and item heads with the classification loss.
pub fn run_pretraining(
    encoder: &StateEncoder,
    schema: &StateSchema,
    train: &[AgentState],
    eval: &[AgentState],
    config: &TrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(ClspError::Config("empty pre-training dataset".into()));
    }
    let items = schema.target_items(config.target);
    if items.is_empty() {
        return Err(ClspError::Config("classifier target set is empty".into()));
    }
    let mut params = init_state_params(encoder, config.seed);
    params.extend(init_heads(
        schema,
        encoder.dims.trunk,
        &mut chacha(derive_seed(config.seed, STREAM_HEAD_INIT)),
    ));
    let width = schema.width();
    let features = schema.flatten_batch(train);
    let labels: Vec<Vec<usize>> = train.iter().map(|s| schema.build_class_labels(s)).collect();
    let eval_set = &eval[..eval.len().min(config.eval_queries)];
    let mut opt = AdamW::new(config.optimizer());
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    let batches = config.schedule(train.len())?;
    let steps = batches.len();
    for (step, rows) in batches.iter().enumerate() {
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(gather_rows(&features, width, rows)?);
        let trunk = encoder.trunk(&mut tape, &bound, x)?;
        let logits = head_logits(&mut tape, &bound, schema, trunk)?;
        let batch_labels: Vec<Vec<usize>> = rows.iter().map(|&r| labels[r].clone()).collect();
        let loss = pretrain_loss(&mut tape, &logits, &batch_labels, &items)?;
        final_loss = tape.value(loss).item() as f64;
        check_finite(step, final_loss)?;
        let mut grads = tape.backward(loss)?;
        let grads = params.collect_grads(&bound, &mut grads);
        opt.step(&mut params, &grads)?;
        let done = step + 1;
        let due = config.eval_interval > 0 && (done % config.eval_interval == 0 || done == steps);
        if due && !eval_set.is_empty() {
            let accuracy = head_accuracy(encoder, schema, &params, eval_set, &items)?;
            let mean_accuracy = accuracy.values().sum::<f64>() / accuracy.len() as f64;
            log.push(PretrainRecord {
                step: done,
                loss: final_loss,
                mean_accuracy,
                accuracy,
            });
        }
    }
    Ok(PretrainOutcome {
        params,
        log,
        steps,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub step: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_s2t: f64,
    pub loss_t2s: f64,
    pub report: Option<RetrievalReport>,
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    /// `state.*` and `text.*` parameters.
    pub params: ParamStore<f32>,
    pub log: Vec<AlignRecord>,
    pub steps: usize,
}

/// Contrastive losses and retrieval metrics of `pairs` under `params`.
pub fn evaluate_pairs(
    state_encoder: &StateEncoder,
    text_encoder: &TextEncoder,
    schema: &StateSchema,
    params: &ParamStore<f32>,
    pairs: &[StateTextPair],
    temperature: f64,
    ks: &[usize],
) -> Result<(RetrievalReport, [f64; 3])> {
    let states: Vec<AgentState> = pairs.iter().map(|p| p.state.clone()).collect();
    let ids = pairs
        .iter()
        .map(|p| text_encoder.features(&p.text))
        .collect::<Result<Vec<_>>>()?;
    let s = state_encoder.encode_features(params, &schema.flatten_batch(&states))?;
    let t = text_encoder.encode_ids(params, &ids)?;
    let dim = state_encoder.dims.embed;
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= pairs.len()).collect();
    let report = retrieval_report(&t, &s, dim, &states, &ks, &EvalItem::ALL)?;
    let losses = contrastive_values(&s, &t, dim, temperature);
    Ok((report, losses))
}

/// `[total, s2t, t2s]` of the contrastive loss on precomputed embeddings.
pub fn contrastive_values(s: &[f32], t: &[f32], dim: usize, temperature: f64) -> [f64; 3] {
    let n = s.len() / dim;
    let sim: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            s[i * dim..(i + 1) * dim]
                .iter()
                .zip(&t[j * dim..(j + 1) * dim])
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum::<f64>()
                / temperature
        })
        .collect();
    let ce = |row: &dyn Fn(usize) -> f64, target: usize| {
        let m = (0..n).map(row).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..n).map(|j| (row(j) - m).exp()).sum::<f64>().ln();
        lse - row(target)
    };
    let s2t = (0..n).map(|i| ce(&|j| sim[i * n + j], i)).sum::<f64>() / n as f64;
    let t2s = (0..n).map(|j| ce(&|i| sim[i * n + j], j)).sum::<f64>() / n as f64;
    [(s2t + t2s) / 2.0, s2t, t2s]
}

/// Jointly trains the state and text encoders with the contrastive loss.
/// `init` carries pre-trained `state.*` parameters and must be present
/// exactly when the variant uses pre-trained initialization.
pub fn run_alignment(
    state_encoder: &StateEncoder,
    text_encoder: &TextEncoder,
    schema: &StateSchema,
    init: Option<&ParamStore<f32>>,
    train: &[StateTextPair],
    test: &[StateTextPair],
    config: &TrainConfig,
) -> Result<AlignOutcome> {
    config.validate()?;
    let variant = state_encoder.variant;
    let mut params = match (variant.pretrained_init(), init) {
        (true, Some(p)) => p.filter_prefix("state."),
        (false, None) => init_state_params(state_encoder, config.seed),
        (true, None) => {
            return Err(ClspError::Config(format!("variant {variant} needs a pre-trained init")))
        }
        (false, Some(_)) => {
            return Err(ClspError::Config(format!("variant {variant} must start from random init")))
        }
    };
    if params.is_empty() {
        return Err(ClspError::Config("init holds no state encoder parameters".into()));
    }
    params.extend(init_text_params(text_encoder, config.seed));
    let width = schema.width();
    let states: Vec<AgentState> = train.iter().map(|p| p.state.clone()).collect();
    let features = schema.flatten_batch(&states);
    let ids = train
        .iter()
        .map(|p| text_encoder.features(&p.text))
        .collect::<Result<Vec<_>>>()?;
    let eval_set = &test[..test.len().min(config.eval_queries)];
    let mut opt = AdamW::new(config.optimizer());
    let mut log = Vec::new();
    let batches = config.schedule(train.len())?;
    let steps = batches.len();
    let mut window = [0f64; 3];
    let mut window_len = 0usize;
    for (step, rows) in batches.iter().enumerate() {
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(gather_rows(&features, width, rows)?);
        let s = state_encoder.embed(&mut tape, &bound, x)?;
        let t = text_encoder.embed(&mut tape, &bound, rows.iter().map(|&r| ids[r].clone()).collect())?;
        let terms = contrastive_loss(&mut tape, s, t, config.temperature)?;
        let total = tape.value(terms.total).item() as f64;
        check_finite(step, total)?;
        window[0] += total;
        window[1] += tape.value(terms.s2t).item() as f64;
        window[2] += tape.value(terms.t2s).item() as f64;
        window_len += 1;
        let mut grads = tape.backward(terms.total)?;
        let grads = params.collect_grads(&bound, &mut grads);
        opt.step(&mut params, &grads)?;
        let done = step + 1;
        if config.eval_interval > 0 && (done % config.eval_interval == 0 || done == steps) {
            let k = window_len as f64;
            log.push(AlignRecord {
                step: done,
                split: "train".into(),
                loss_total: window[0] / k,
                loss_s2t: window[1] / k,
                loss_t2s: window[2] / k,
                report: None,
            });
            window = [0.0; 3];
            window_len = 0;
            if eval_set.len() >= 2 {
                let (report, [lt, ls, lr]) = evaluate_pairs(
                    state_encoder,
                    text_encoder,
                    schema,
                    &params,
                    eval_set,
                    config.temperature,
                    &[1, 5, 10],
                )?;
                log.push(AlignRecord {
                    step: done,
                    split: "test".into(),
                    loss_total: lt,
                    loss_s2t: ls,
                    loss_t2s: lr,
                    report: Some(report),
                });
            }
        }
    }
    Ok(AlignOutcome { params, log, steps })
}

/// Metrics CSV: `step, split, loss_total, loss_s2t, loss_t2s, r_at_1, r_at_5,
/// r_at_10, top1_mae_<item>...`. Train rows leave metric columns empty.
pub fn write_metrics_csv<W: std::io::Write>(out: W, log: &[AlignRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "split", "loss_total", "loss_s2t", "loss_t2s", "r_at_1", "r_at_5", "r_at_10"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(EvalItem::ALL.iter().map(|i| format!("top1_mae_{}", i.id())));
    w.write_record(&header)?;
    for rec in log {
        let mut row = vec![
            rec.step.to_string(),
            rec.split.clone(),
            rec.loss_total.to_string(),
            rec.loss_s2t.to_string(),
            rec.loss_t2s.to_string(),
        ];
        match &rec.report {
            Some(r) => {
                row.extend([1, 5, 10].map(|k| r.r_at_k.get(&k).map(|v| v.to_string()).unwrap_or_default()));
                row.extend(EvalItem::ALL.iter().map(|i| r.top1_mae[i.id()].to_string()));
            }
            None => row.extend(std::iter::repeat(String::new()).take(3 + EvalItem::ALL.len())),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| ClspError::io("metrics", e))
}
