#![allow(dead_code)]

//! Full-sort retrieval oracle.

use clsp_core::evaluation::{recall_at_k, top1_mae, EvalItem};
use clsp_core::state::{sample_states, GeneratorConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Full sort of references by (similarity desc, index asc).
pub fn sorted_references(query: &[f32], refs: &[f32], dim: usize) -> Vec<usize> {
    let sims: Vec<f32> = refs
        .chunks(dim)
        .map(|r| query.iter().zip(r).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    order
}

pub fn oracle_recall(queries: &[f32], refs: &[f32], dim: usize, pairing: &[usize], k: usize) -> f64 {
    let hits = queries
        .chunks(dim)
        .zip(pairing)
        .filter(|(q, &p)| sorted_references(q, refs, dim)[..k.min(refs.len() / dim)].contains(&p))
        .count();
    hits as f64 / pairing.len() as f64
}

/// Embeddings quantized to a coarse grid so that exact ties are common.
pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>, usize, Vec<usize>) {
    let dim = rng.gen_range(1..6);
    let nr = rng.gen_range(1..=200);
    let nq = rng.gen_range(1..=200);
    let coarse = rng.gen_bool(0.5);
    let mut value = || {
        let v: f32 = rng.gen_range(-1.0..1.0);
        if coarse {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    };
    let refs: Vec<f32> = (0..nr * dim).map(|_| value()).collect();
    let queries: Vec<f32> = (0..nq * dim).map(|_| value()).collect();
    let pairing = (0..nq).map(|_| rng.gen_range(0..nr)).collect();
    (queries, refs, dim, pairing)
}


/// Brute-force check of `recall_at_k` and `top1_mae` on one random
/// instance; returns a description of the first mismatch.
pub fn check_instance(rng: &mut ChaCha8Rng, case: u64) -> Result<(), String> {
    let (queries, refs, dim, pairing) = instance(rng);
    let nr = refs.len() / dim;
    let states = sample_states(nr, case, &GeneratorConfig::default());
    for k in [1, 2, 5, 10, nr] {
        let got = recall_at_k(&queries, &refs, dim, &pairing, k).map_err(|e| e.to_string())?;
        let want = oracle_recall(&queries, &refs, dim, &pairing, k);
        if got != want {
            return Err(format!("case {case}: R@{k} {got} != {want}"));
        }
    }
    let got = top1_mae(&queries, &refs, dim, &pairing, &states, &EvalItem::ALL).map_err(|e| e.to_string())?;
    for item in EvalItem::ALL {
        let total: f64 = queries
            .chunks(dim)
            .zip(&pairing)
            .map(|(q, &p)| item.error(&states[sorted_references(q, &refs, dim)[0]], &states[p]))
            .sum();
        let want = total / pairing.len() as f64;
        if got[item.id()] != want {
            return Err(format!("case {case}: {} {} != {want}", item.id(), got[item.id()]));
        }
    }
    Ok(())
}
