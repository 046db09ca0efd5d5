//! Expansion connector (one embedding to `n` tokens) and a linear regression
//! probe over the connector tokens.

use clsp_autodiff::{AdamW, AdamWConfig, Bound, Float, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{init_linear, linear, StateEncoder};
use crate::error::{ClspError, Result};
use crate::evaluation::{angular_error, regression_metrics, RegressionMetrics};
use crate::rng::{chacha, derive_seed};
use crate::schema::StateSchema;
use crate::state::{euclidean, AgentState, MAP_SIZE, MAX_DISTANCE, MAX_HP, MAX_SPEED, MAX_Z, SLOTS};

const STREAM_CONNECTOR_INIT: u64 = 20;
const STREAM_PROBE_INIT: u64 = 21;
const STREAM_PROBE_SHUFFLE: u64 = 2000;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectorDims {
    /// Input embedding width.
    pub d: usize,
    /// Per-token hidden width.
    pub hidden: usize,
    /// Output token width.
    pub width: usize,
    pub tokens: usize,
}

impl Default for ConnectorDims {
    fn default() -> Self {
        Self {
            d: 128,
            hidden: 64,
            width: 128,
            tokens: 8,
        }
    }
}

/// Token `i` is `LN(shared(GELU(expand_i(E))))`.
#[derive(Debug, Clone, Copy)]
pub struct Connector {
    pub dims: ConnectorDims,
}

impl Connector {
    pub fn new(dims: ConnectorDims) -> Self {
        Self { dims }
    }

    pub fn init_params(&self, rng: &mut rand_chacha::ChaCha8Rng) -> ParamStore<f32> {
        let d = self.dims;
        let mut p = ParamStore::new();
        for i in 0..d.tokens {
            init_linear(&mut p, rng, &format!("connector.expand{i}"), d.d, d.hidden);
        }
        init_linear(&mut p, rng, "connector.shared", d.hidden, d.width);
        p.insert("connector.ln.gain", Tensor::full(&[d.width], 1.0));
        p.insert("connector.ln.bias", Tensor::zeros(&[d.width]));
        p
    }

    /// `n` token tensors of shape `[B, width]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, e: Var) -> Result<Vec<Var>> {
        let width = tape.value(e).cols();
        if width != self.dims.d {
            return Err(ClspError::WidthMismatch("connector input", self.dims.d, width));
        }
        let gain = p.get("connector.ln.gain")?;
        let bias = p.get("connector.ln.bias")?;
        let mut tokens = Vec::with_capacity(self.dims.tokens);
        for i in 0..self.dims.tokens {
            let h = linear(tape, p, &format!("connector.expand{i}"), e)?;
            let h = tape.gelu(h);
            let t = linear(tape, p, "connector.shared", h)?;
            tokens.push(tape.layer_norm(t, gain, bias, T::from_f64(LN_EPS))?);
        }
        Ok(tokens)
    }
}

/// Expands one embedding into `n` tokens of width `h`.
pub fn expand_connector(connector: &Connector, params: &ParamStore<f32>, e: &[f32]) -> Result<Vec<Vec<f32>>> {
    if e.len() != connector.dims.d {
        return Err(ClspError::WidthMismatch("connector input", connector.dims.d, e.len()));
    }
    let mut tape = Tape::<f32>::new();
    let bound = params.filter_prefix("connector.").bind_with(&mut tape, |_| false);
    let x = tape.constant(Tensor::new(vec![1, e.len()], e.to_vec())?);
    let tokens = connector.forward(&mut tape, &bound, x)?;
    Ok(tokens.iter().map(|&t| tape.value(t).data().to_vec()).collect())
}

/// Regression targets in order: hp, x, y, z, sin(direction), cos(direction),
/// speed, then per enemy slot and per teammate slot: hp, distance.
pub const PROBE_TARGETS: usize = 7 + 2 * 2 * SLOTS;

/// Targets scaled to roughly `[0, 1]` (`[-1, 1]` for the direction pair).
pub fn probe_targets(s: &AgentState) -> Vec<f64> {
    let dir = s.me.direction.to_radians();
    let mut t = vec![
        s.me.hp as f64 / MAX_HP as f64,
        s.me.position[0] / MAP_SIZE,
        s.me.position[1] / MAP_SIZE,
        s.me.position[2] / MAX_Z,
        dir.sin(),
        dir.cos(),
        s.me.speed / MAX_SPEED,
    ];
    for e in s.enemies.iter().chain(&s.teammates) {
        t.push(e.hp as f64 / MAX_HP as f64);
        t.push(e.distance / MAX_DISTANCE);
    }
    t
}

/// Raw-unit readings decoded from normalized probe outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReading {
    pub hp: f64,
    pub position: [f64; 3],
    pub direction: f64,
    pub speed: f64,
    /// Enemy slots then teammate slots: (hp, distance).
    pub entities: Vec<(f64, f64)>,
}

pub fn decode_probe(out: &[f64]) -> ProbeReading {
    let direction = out[4].atan2(out[5]).to_degrees().rem_euclid(360.0);
    ProbeReading {
        hp: out[0] * MAX_HP as f64,
        position: [out[1] * MAP_SIZE, out[2] * MAP_SIZE, out[3] * MAX_Z],
        direction,
        speed: out[6] * MAX_SPEED,
        entities: (0..2 * SLOTS)
            .map(|k| (out[7 + 2 * k] * MAX_HP as f64, out[8 + 2 * k] * MAX_DISTANCE))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs with the state encoder frozen.
    pub frozen_epochs: usize,
    /// Epochs with the state encoder trainable.
    pub unfrozen_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            frozen_epochs: 3,
            unfrozen_epochs: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLogRow {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    /// `state.*`, `connector.*` and `probe.*` parameters.
    pub params: ParamStore<f32>,
    pub log: Vec<ProbeLogRow>,
    /// Held-out table after the frozen stage, when an eval split was given.
    pub stage1: Option<ProbeTable>,
}

fn probe_forward<T: Float>(
    encoder: &StateEncoder,
    connector: &Connector,
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
) -> Result<Var> {
    let e = encoder.embed(tape, p, x)?;
    let tokens = connector.forward(tape, p, e)?;
    let flat = tape.concat_cols(&tokens)?;
    linear(tape, p, "probe", flat)
}

/// Normalized probe outputs for `states`.
pub fn probe_predict(
    encoder: &StateEncoder,
    connector: &Connector,
    schema: &StateSchema,
    params: &ParamStore<f32>,
    states: &[AgentState],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(512) {
        let mut tape = Tape::<f32>::new();
        let bound = params.bind_with(&mut tape, |_| false);
        let x = tape.constant(Tensor::new(vec![chunk.len(), schema.width()], schema.flatten_batch(chunk))?);
        let y = probe_forward(encoder, connector, &mut tape, &bound, x)?;
        let v = tape.value(y);
        out.extend((0..chunk.len()).map(|r| v.row(r).iter().map(|&a| a as f64).collect()));
    }
    Ok(out)
}

/// Trains connector and probe with the encoder frozen, then all three
/// jointly. `state_params` holds the encoder's `state.*` parameters.
pub fn train_probe(
    encoder: &StateEncoder,
    connector: &Connector,
    schema: &StateSchema,
    state_params: &ParamStore<f32>,
    train: &[AgentState],
    eval: Option<&[AgentState]>,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if config.batch_size == 0 || config.batch_size > train.len() {
        return Err(ClspError::Config(format!(
            "probe batch size {} invalid for {} states",
            config.batch_size,
            train.len()
        )));
    }
    let mut params = state_params.filter_prefix("state.");
    params.extend(connector.init_params(&mut chacha(derive_seed(config.seed, STREAM_CONNECTOR_INIT))));
    let mut rng = chacha(derive_seed(config.seed, STREAM_PROBE_INIT));
    init_linear(
        &mut params,
        &mut rng,
        "probe",
        connector.dims.tokens * connector.dims.width,
        PROBE_TARGETS,
    );
    let width = schema.width();
    let features = schema.flatten_batch(train);
    let targets: Vec<f32> = train.iter().flat_map(probe_targets).map(|v| v as f32).collect();
    let opt_cfg = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut log = Vec::new();
    let mut stage1 = None;
    let mut step = 0usize;
    for (stage, epochs) in [(1usize, config.frozen_epochs), (2, config.unfrozen_epochs)] {
        let mut opt = AdamW::new(opt_cfg);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(
                order.as_mut_slice(),
                &mut chacha(derive_seed(config.seed, STREAM_PROBE_SHUFFLE + step as u64)),
            );
            let mut total = 0.0;
            let mut batches = 0usize;
            for rows in order.chunks_exact(config.batch_size) {
                let mut tape = Tape::<f32>::new();
                let bound = params.bind_with(&mut tape, |name| stage == 2 || !name.starts_with("state."));
                let mut x = Vec::with_capacity(rows.len() * width);
                let mut y = Vec::with_capacity(rows.len() * PROBE_TARGETS);
                for &r in rows {
                    x.extend_from_slice(&features[r * width..(r + 1) * width]);
                    y.extend_from_slice(&targets[r * PROBE_TARGETS..(r + 1) * PROBE_TARGETS]);
                }
                let x = tape.constant(Tensor::new(vec![rows.len(), width], x)?);
                let pred = probe_forward(encoder, connector, &mut tape, &bound, x)?;
                let loss = tape.mse(pred, &Tensor::new(vec![rows.len(), PROBE_TARGETS], y)?)?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(ClspError::NonFiniteLoss { step, loss: value });
                }
                total += value;
                batches += 1;
                step += 1;
                let mut grads = tape.backward(loss)?;
                let grads = params.collect_grads(&bound, &mut grads);
                opt.step(&mut params, &grads)?;
            }
            log.push(ProbeLogRow {
                stage,
                epoch,
                train_loss: total / batches as f64,
            });
        }
        if stage == 1 {
            if let Some(eval) = eval {
                stage1 = Some(eval_probe(encoder, connector, schema, &params, eval)?);
            }
        }
    }
    Ok(ProbeOutcome { params, log, stage1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub item: String,
    pub metrics: RegressionMetrics,
}

/// Per-item held-out errors in raw units. Entity items use present slots only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    pub fn get(&self, item: &str) -> Option<&RegressionMetrics> {
        self.rows.iter().find(|r| r.item == item).map(|r| &r.metrics)
    }
}

/// Builds the table from decoded readings and true states.
pub fn probe_table(readings: &[ProbeReading], truth: &[AgentState]) -> Result<ProbeTable> {
    if readings.is_empty() || readings.len() != truth.len() {
        return Err(ClspError::Config("probe evaluation split is empty".into()));
    }
    let mut cols: Vec<(&str, Vec<f64>, Vec<f64>)> = [
        "self_hp",
        "self_position",
        "self_direction",
        "self_speed",
        "enemy_hp",
        "enemy_distance",
        "teammate_hp",
        "teammate_distance",
    ]
    .into_iter()
    .map(|n| (n, Vec::new(), Vec::new()))
    .collect();
    for (r, s) in readings.iter().zip(truth) {
        // Position and direction are compared as error magnitudes against zero.
        let rows: [(f64, f64); 4] = [
            (r.hp, s.me.hp as f64),
            (euclidean(&r.position, &s.me.position), 0.0),
            (angular_error(r.direction, s.me.direction), 0.0),
            (r.speed, s.me.speed),
        ];
        for (k, (p, t)) in rows.into_iter().enumerate() {
            cols[k].1.push(p);
            cols[k].2.push(t);
        }
        for (k, e) in s.enemies.iter().chain(&s.teammates).enumerate() {
            if !e.present {
                continue;
            }
            let base = if k < SLOTS { 4 } else { 6 };
            let (hp, dist) = r.entities[k];
            cols[base].1.push(hp);
            cols[base].2.push(e.hp as f64);
            cols[base + 1].1.push(dist);
            cols[base + 1].2.push(e.distance);
        }
    }
    let rows = cols
        .into_iter()
        .filter(|(_, p, _)| !p.is_empty())
        .map(|(item, p, t)| {
            Ok(ProbeRow {
                item: item.to_string(),
                metrics: regression_metrics(&p, &t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeTable { rows })
}

pub fn eval_probe(
    encoder: &StateEncoder,
    connector: &Connector,
    schema: &StateSchema,
    params: &ParamStore<f32>,
    test: &[AgentState],
) -> Result<ProbeTable> {
    if test.is_empty() {
        return Err(ClspError::Config("probe evaluation split is empty".into()));
    }
    let readings: Vec<ProbeReading> = probe_predict(encoder, connector, schema, params, test)?
        .iter()
        .map(|o| decode_probe(o))
        .collect();
    probe_table(&readings, test)
}

/// CSV with columns `variant, item, medae, mae, rmse`.
pub fn write_probe_csv<W: std::io::Write>(out: W, tables: &[(String, ProbeTable)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "item", "medae", "mae", "rmse"])?;
    for (variant, table) in tables {
        for row in &table.rows {
            w.write_record([
                variant.clone(),
                row.item.clone(),
                row.metrics.medae.to_string(),
                row.metrics.mae.to_string(),
                row.metrics.rmse.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| ClspError::io("probe report", e))
}
