#![allow(dead_code)]

//! Full networks under gradient check, shared with the acceptance suite.

use clsp_autodiff::{
    gradient_check, Bound, Differentiable, Float, GradCheckOptions, ParamStore, Precision, Tape, Tensor, Var,
};
use clsp_core::connector::{Connector, ConnectorDims, PROBE_TARGETS};
use clsp_core::encoders::{head_logits, init_heads, init_linear, linear, EncoderVariant, StateDims, StateEncoder, TextDims, TextEncoder};
use clsp_core::rng::chacha;
use clsp_core::schema::{ScalarEncoding, StateSchema};
use clsp_core::state::{generate_pairs, sample_states, GeneratorConfig};
use clsp_core::text::Vocabulary;
use clsp_core::training::{contrastive_loss, pretrain_loss};
use rand::Rng;

const TINY_STATE: StateDims = StateDims {
    trunk: 6,
    embed: 4,
    blocks: 2,
    front_hidden: 3,
};

const TINY_TEXT: TextDims = TextDims {
    token: 5,
    hidden: 6,
    embed: 4,
    init_std: 1.0,
    value_scale: 0.0,
};

#[derive(Debug, Clone)]
pub struct NetCheck {
    pub name: String,
    pub precision: Precision,
    pub max_rel_error: f64,
    pub worst: String,
}

impl NetCheck {
    pub fn passes(&self) -> bool {
        let limit = match self.precision {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-4,
        };
        self.max_rel_error < limit
    }
}

/// State encoders of every variant, the text encoder, the contrastive and
/// pre-training losses through the encoders, and connector plus probe.
pub fn network_checks() -> Vec<NetCheck> {
    let mut out = Vec::new();
    state_encoders(&mut out);
    text_encoder(&mut out);
    contrastive(&mut out);
    pretraining(&mut out);
    connector(&mut out);
    out
}

/// Worst relative error of `net` in each precision.
fn check<N: Differentiable>(net: &N, params: &ParamStore<f32>, what: &str, out: &mut Vec<NetCheck>) {
    let params = params.cast::<f64>();
    for precision in [Precision::F64, Precision::F32] {
        let opts = GradCheckOptions {
            samples_per_param: 12,
            ..GradCheckOptions::for_precision(precision)
        };
        let report = gradient_check(net, &params, precision, &opts).unwrap();
        out.push(NetCheck {
            name: what.to_string(),
            precision,
            max_rel_error: report.max_rel_error,
            worst: format!("{}[{}]", report.worst_param, report.worst_index),
        });
    }
}

fn features(schema: &StateSchema, n: usize, seed: u64) -> Tensor<f64> {
    let states = sample_states(n, seed, &GeneratorConfig::default());
    let data = schema.flatten_batch(&states).into_iter().map(f64::from).collect();
    Tensor::new(vec![n, schema.width()], data).unwrap()
}

/// Re-indexes feature ids onto a compact table holding only the rows in use,
/// so sampled gradient checks land on live rows.
fn compact(ids: &[Vec<usize>]) -> (Vec<Vec<usize>>, usize) {
    let mut used: Vec<usize> = ids.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let remap = |id: &usize| used.binary_search(id).unwrap();
    (ids.iter().map(|r| r.iter().map(remap).collect()).collect(), used.len())
}

fn text_setup(n: usize, seed: u64) -> (TextEncoder, Vec<Vec<usize>>, ParamStore<f32>) {
    let pairs = generate_pairs(n, seed, &GeneratorConfig::default());
    let vocab = Vocabulary::build(pairs.iter().map(|p| p.text.as_str())).unwrap();
    let enc = TextEncoder::new(vocab, TINY_TEXT);
    let ids: Vec<Vec<usize>> = pairs.iter().map(|p| enc.features(&p.text).unwrap()).collect();
    let (ids, rows) = compact(&ids);
    let mut params = enc.init_params(&mut chacha(seed));
    let mut rng = chacha(seed + 1);
    let table = (0..rows * TINY_TEXT.token).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    params.insert("text.embed", Tensor::new(vec![rows, TINY_TEXT.token], table).unwrap());
    (enc, ids, params)
}

struct StateNet {
    encoder: StateEncoder,
    x: Tensor<f64>,
    target: Tensor<f64>,
}

impl Differentiable for StateNet {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, p: &Bound) -> clsp_autodiff::Result<Var> {
        let x = tape.constant(self.x.cast());
        let e = self.encoder.embed(tape, p, x).map_err(unwrap_autodiff)?;
        tape.mse(e, &self.target.cast())
    }
}

fn unwrap_autodiff(e: clsp_core::error::ClspError) -> clsp_autodiff::AutodiffError {
    match e {
        clsp_core::error::ClspError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = chacha(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

fn state_encoders(out: &mut Vec<NetCheck>) {
    for variant in EncoderVariant::ALL {
        let schema = StateSchema::new(variant.scalar_encoding(), 3, 1.0).unwrap();
        let encoder = StateEncoder::new(variant, &schema, TINY_STATE).unwrap();
        let params = encoder.init_params(&mut chacha(11));
        let net = StateNet {
            encoder,
            x: features(&schema, 3, 5),
            target: random_tensor(&[3, TINY_STATE.embed], 6),
        };
        check(&net, &params, variant.name(), out);
    }
}

struct TextNet {
    encoder: TextEncoder,
    ids: Vec<Vec<usize>>,
    target: Tensor<f64>,
}

impl Differentiable for TextNet {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, p: &Bound) -> clsp_autodiff::Result<Var> {
        let e = self.encoder.embed(tape, p, self.ids.clone()).map_err(unwrap_autodiff)?;
        tape.mse(e, &self.target.cast())
    }
}

fn text_encoder(out: &mut Vec<NetCheck>) {
    let (encoder, ids, params) = text_setup(3, 21);
    let net = TextNet {
        encoder,
        ids,
        target: random_tensor(&[3, TINY_TEXT.embed], 22),
    };
    check(&net, &params, "text encoder", out);
}

struct ContrastiveNet {
    state: StateEncoder,
    text: TextEncoder,
    x: Tensor<f64>,
    ids: Vec<Vec<usize>>,
}

impl Differentiable for ContrastiveNet {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, p: &Bound) -> clsp_autodiff::Result<Var> {
        let x = tape.constant(self.x.cast());
        let s = self.state.embed(tape, p, x).map_err(unwrap_autodiff)?;
        let t = self.text.embed(tape, p, self.ids.clone()).map_err(unwrap_autodiff)?;
        Ok(contrastive_loss(tape, s, t, 0.7).map_err(unwrap_autodiff)?.total)
    }
}

fn contrastive(out: &mut Vec<NetCheck>) {
    let schema = StateSchema::new(ScalarEncoding::Rff, 3, 1.0).unwrap();
    let state = StateEncoder::new(EncoderVariant::ClspRffm, &schema, TINY_STATE).unwrap();
    let mut params = state.init_params(&mut chacha(31));
    let (text, ids, text_params) = text_setup(4, 32);
    params.extend(text_params);
    let net = ContrastiveNet {
        state,
        text,
        x: features(&schema, 4, 33),
        ids,
    };
    check(&net, &params, "contrastive", out);
}

struct PretrainNet {
    encoder: StateEncoder,
    schema: StateSchema,
    x: Tensor<f64>,
    labels: Vec<Vec<usize>>,
    items: Vec<usize>,
}

impl Differentiable for PretrainNet {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, p: &Bound) -> clsp_autodiff::Result<Var> {
        let x = tape.constant(self.x.cast());
        let trunk = self.encoder.trunk(tape, p, x).map_err(unwrap_autodiff)?;
        let logits = head_logits(tape, p, &self.schema, trunk).map_err(unwrap_autodiff)?;
        pretrain_loss(tape, &logits, &self.labels, &self.items).map_err(unwrap_autodiff)
    }
}

fn pretraining(out: &mut Vec<NetCheck>) {
    let schema = StateSchema::new(ScalarEncoding::Npe, 3, 1.0).unwrap();
    let encoder = StateEncoder::new(EncoderVariant::ClspNpe, &schema, TINY_STATE).unwrap();
    let mut params = encoder.init_params(&mut chacha(41));
    params.extend(init_heads(&schema, TINY_STATE.trunk, &mut chacha(42)));
    let states = sample_states(3, 43, &GeneratorConfig::default());
    let net = PretrainNet {
        labels: states.iter().map(|s| schema.build_class_labels(s)).collect(),
        // A handful of heads keeps the summed loss small enough that
        // finite-difference roundoff stays below the tolerance.
        items: vec![0, 5, 11, schema.items().len() - 1],
        x: features(&schema, 3, 43),
        encoder,
        schema,
    };
    check(&net, &params, "pretrain", out);
}

struct ProbeNet {
    connector: Connector,
    e: Tensor<f64>,
    target: Tensor<f64>,
}

impl Differentiable for ProbeNet {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, p: &Bound) -> clsp_autodiff::Result<Var> {
        let e = tape.constant(self.e.cast());
        let tokens = self.connector.forward(tape, p, e).map_err(unwrap_autodiff)?;
        let flat = tape.concat_cols(&tokens)?;
        let y = linear(tape, p, "probe", flat).map_err(unwrap_autodiff)?;
        tape.mse(y, &self.target.cast())
    }
}

fn connector(out: &mut Vec<NetCheck>) {
    let dims = ConnectorDims {
        d: 5,
        hidden: 4,
        width: 6,
        tokens: 3,
    };
    let connector = Connector::new(dims);
    let mut params = connector.init_params(&mut chacha(51));
    let mut rng = chacha(52);
    for name in ["connector.ln.gain", "connector.ln.bias"] {
        let t = params.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3f32);
        }
    }
    init_linear(&mut params, &mut chacha(53), "probe", dims.tokens * dims.width, PROBE_TARGETS);
    let net = ProbeNet {
        connector,
        e: random_tensor(&[3, dims.d], 54),
        target: random_tensor(&[3, PROBE_TARGETS], 55),
    };
    check(&net, &params, "connector", out);
}

