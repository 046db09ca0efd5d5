//! Per-op gradient-check harness shared with the acceptance suite.

use clsp_autodiff::{
    gradient_check, Bound, Differentiable, Float, GradCheckOptions, ParamStore, Precision, Result, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub struct OpNet {
    kind: &'static str,
    rows: usize,
    cols: usize,
    projection: Tensor<f64>,
}

impl OpNet {
    pub fn new(kind: &'static str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_cols = match kind {
            "matmul" | "matmul_nt" => 3,
            "transpose" => rows,
            "concat" => cols + 2,
            "slice" => cols - 1,
            "embedding" => cols,
            _ => cols,
        };
        let out_rows = if kind == "transpose" { cols } else { rows };
        Self {
            kind,
            rows,
            cols,
            projection: random(rng, &[out_rows, out_cols], 1.0),
        }
    }

    pub fn params(&self, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", random(rng, &[self.rows, self.cols], 1.5));
        p.insert("w", random(rng, &[self.cols, 3], 1.0));
        p.insert("w_nt", random(rng, &[3, self.cols], 1.0));
        p.insert("b", random(rng, &[self.cols], 1.0));
        p.insert("g", random(rng, &[self.cols], 1.0));
        p.insert("y", random(rng, &[self.rows, 2], 1.0));
        p.insert("table", random(rng, &[5, self.cols], 1.0));
        p
    }
}

impl Differentiable for OpNet {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, p: &Bound) -> Result<Var> {
        let x = p.get("x")?;
        let out = match self.kind {
            "matmul" => tape.matmul(x, p.get("w")?)?,
            "matmul_nt" => tape.matmul_nt(x, p.get("w_nt")?)?,
            "transpose" => tape.transpose(x)?,
            "add" => tape.add(x, x)?,
            "add_bias" => tape.add_bias(x, p.get("b")?)?,
            "scale" => tape.scale(x, T::from_f64(-1.7)),
            "gelu" => tape.gelu(x),
            "layer_norm" => tape.layer_norm(x, p.get("g")?, p.get("b")?, T::from_f64(1e-5))?,
            "l2" => tape.l2_normalize(x)?,
            "concat" => tape.concat_cols(&[x, p.get("y")?])?,
            "slice" => tape.slice_cols(x, 1, self.cols)?,
            "embedding" => {
                let ids = (0..self.rows).map(|i| vec![i % 5, (i * 3 + 1) % 5, 2]).collect();
                tape.embedding_mean(p.get("table")?, ids)?
            }
            "cross_entropy" => {
                let targets: Vec<usize> = (0..self.rows).map(|i| i % self.cols).collect();
                return tape.cross_entropy(x, &targets);
            }
            other => unreachable!("{other}"),
        };
        tape.mse(out, &self.projection.cast())
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "transpose",
    "add",
    "add_bias",
    "scale",
    "gelu",
    "layer_norm",
    "l2",
    "concat",
    "slice",
    "embedding",
    "cross_entropy",
];

/// Worst relative error per op and precision over `trials` random shapes.
pub fn op_errors(trials: u64) -> Vec<(&'static str, Precision, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for trial in 0..trials {
        for &kind in OPS {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(2..7);
            let net = OpNet::new(kind, rows, cols, &mut rng);
            let params = net.params(&mut rng);
            for precision in [Precision::F64, Precision::F32] {
                let mut opts = GradCheckOptions::for_precision(precision);
                opts.seed = trial;
                let report = gradient_check(&net, &params, precision, &opts).unwrap();
                match out.iter_mut().find(|(k, p, _)| *k == kind && *p == precision) {
                    Some((_, _, worst)) => *worst = f64::max(*worst, report.max_rel_error),
                    None => out.push((kind, precision, report.max_rel_error)),
                }
            }
        }
    }
    out
}

pub fn limit(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 1e-6,
        Precision::F32 => 1e-4,
    }
}
