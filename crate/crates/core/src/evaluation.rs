//! Retrieval metrics (R@K, per-item Top-1 MAE), regression metrics, and
//! embedding export.
//!
//! Rankings sort references by descending dot product; ties go to the lower
//! reference index.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ClspError, Result};
use crate::state::{euclidean, AgentState, SLOTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMetric {
    Absolute,
    Euclidean,
    Angular,
}

/// Wrapped angular difference in degrees, in `[0, 180]`.
pub fn angular_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// An evaluated state item: an id, how to read it from a state, and how to
/// compare two readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalItem {
    SelfHp,
    SelfPosition,
    SelfDirection,
    SelfSpeed,
    EnemyHp,
    EnemyPosition,
    EnemyDistance,
    TeammateHp,
    TeammatePosition,
    TeammateDistance,
}

impl EvalItem {
    pub const ALL: [EvalItem; 10] = [
        EvalItem::SelfHp,
        EvalItem::SelfPosition,
        EvalItem::SelfDirection,
        EvalItem::SelfSpeed,
        EvalItem::EnemyHp,
        EvalItem::EnemyPosition,
        EvalItem::EnemyDistance,
        EvalItem::TeammateHp,
        EvalItem::TeammatePosition,
        EvalItem::TeammateDistance,
    ];

    pub fn id(self) -> &'static str {
        match self {
            EvalItem::SelfHp => "self_hp",
            EvalItem::SelfPosition => "self_position",
            EvalItem::SelfDirection => "self_direction",
            EvalItem::SelfSpeed => "self_speed",
            EvalItem::EnemyHp => "enemy_hp",
            EvalItem::EnemyPosition => "enemy_position",
            EvalItem::EnemyDistance => "enemy_distance",
            EvalItem::TeammateHp => "teammate_hp",
            EvalItem::TeammatePosition => "teammate_position",
            EvalItem::TeammateDistance => "teammate_distance",
        }
    }

    pub fn metric(self) -> ErrorMetric {
        match self {
            EvalItem::SelfPosition | EvalItem::EnemyPosition | EvalItem::TeammatePosition => {
                ErrorMetric::Euclidean
            }
            EvalItem::SelfDirection => ErrorMetric::Angular,
            _ => ErrorMetric::Absolute,
        }
    }

    /// Raw readings. Entity items yield one reading per slot (three
    /// coordinates each for positions); absent slots read as zeros.
    pub fn extract(self, s: &AgentState) -> Vec<f64> {
        let slots = |group: &[crate::state::EntityBlock; SLOTS], f: &dyn Fn(&crate::state::EntityBlock) -> Vec<f64>| {
            group.iter().flat_map(f).collect::<Vec<f64>>()
        };
        match self {
            EvalItem::SelfHp => vec![s.me.hp as f64],
            EvalItem::SelfPosition => s.me.position.to_vec(),
            EvalItem::SelfDirection => vec![s.me.direction],
            EvalItem::SelfSpeed => vec![s.me.speed],
            EvalItem::EnemyHp => slots(&s.enemies, &|e| vec![e.hp as f64]),
            EvalItem::EnemyPosition => slots(&s.enemies, &|e| e.position.to_vec()),
            EvalItem::EnemyDistance => slots(&s.enemies, &|e| vec![e.distance]),
            EvalItem::TeammateHp => slots(&s.teammates, &|e| vec![e.hp as f64]),
            EvalItem::TeammatePosition => slots(&s.teammates, &|e| e.position.to_vec()),
            EvalItem::TeammateDistance => slots(&s.teammates, &|e| vec![e.distance]),
        }
    }

    /// Error between a retrieved and a true state, averaged over slots.
    pub fn error(self, retrieved: &AgentState, truth: &AgentState) -> f64 {
        let a = self.extract(retrieved);
        let b = self.extract(truth);
        match self.metric() {
            ErrorMetric::Absolute => {
                a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
            }
            ErrorMetric::Angular => angular_error(a[0], b[0]),
            ErrorMetric::Euclidean => {
                let n = a.len() / 3;
                (0..n)
                    .map(|i| {
                        let p = [a[3 * i], a[3 * i + 1], a[3 * i + 2]];
                        let q = [b[3 * i], b[3 * i + 1], b[3 * i + 2]];
                        euclidean(&p, &q)
                    })
                    .sum::<f64>()
                    / n as f64
            }
        }
    }
}

/// Per-query rank of the paired reference (0 = best) and the top-1 reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rankings {
    pub rank: Vec<usize>,
    pub top1: Vec<usize>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks every query against all references. `pairing[q]` is the reference
/// index paired with query `q`.
pub fn rank_queries(queries: &[f32], references: &[f32], dim: usize, pairing: &[usize]) -> Result<Rankings> {
    if dim == 0 || queries.len() % dim != 0 || references.len() % dim != 0 {
        return Err(ClspError::WidthMismatch("embeddings", dim, queries.len() % dim.max(1)));
    }
    let nq = queries.len() / dim;
    let nr = references.len() / dim;
    if pairing.len() != nq {
        return Err(ClspError::Config(format!("{} pairings for {nq} queries", pairing.len())));
    }
    if nr == 0 {
        return Err(ClspError::Config("empty reference set".into()));
    }
    if let Some(&bad) = pairing.iter().find(|&&p| p >= nr) {
        return Err(ClspError::Config(format!("pairing index {bad} out of {nr} references")));
    }
    let mut rank = Vec::with_capacity(nq);
    let mut top1 = Vec::with_capacity(nq);
    let mut sims = vec![0f32; nr];
    for (q, query) in queries.chunks(dim).enumerate() {
        for (r, reference) in references.chunks(dim).enumerate() {
            sims[r] = dot(query, reference);
        }
        let p = pairing[q];
        let target = sims[p];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(r, &s)| s > target || (s == target && r < p))
            .count();
        let mut best = 0;
        for r in 1..nr {
            if sims[r] > sims[best] {
                best = r;
            }
        }
        rank.push(ahead);
        top1.push(best);
    }
    Ok(Rankings { rank, top1 })
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(ClspError::Config("k must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(ClspError::Config("no queries".into()));
    }
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// Fraction of queries whose paired reference ranks in the top `k`.
pub fn recall_at_k(queries: &[f32], references: &[f32], dim: usize, pairing: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(ClspError::Config("k must be >= 1".into()));
    }
    recall_from_ranks(&rank_queries(queries, references, dim, pairing)?.rank, k)
}

/// Mean per-item error between each query's top-1 reference state and its
/// true state. `truth[q]` is the true state of query `q`.
pub fn top1_mae_from(
    top1: &[usize],
    truth: &[&AgentState],
    references: &[AgentState],
    items: &[EvalItem],
) -> Result<BTreeMap<String, f64>> {
    if items.is_empty() {
        return Err(ClspError::Config("empty extractor set".into()));
    }
    if top1.is_empty() || top1.len() != truth.len() {
        return Err(ClspError::Config("top-1 list and truth list differ".into()));
    }
    let mut out = BTreeMap::new();
    for &item in items {
        let total: f64 = top1
            .iter()
            .zip(truth)
            .map(|(&r, t)| item.error(&references[r], t))
            .sum();
        out.insert(item.id().to_string(), total / top1.len() as f64);
    }
    Ok(out)
}

pub fn top1_mae(
    queries: &[f32],
    references: &[f32],
    dim: usize,
    pairing: &[usize],
    reference_states: &[AgentState],
    items: &[EvalItem],
) -> Result<BTreeMap<String, f64>> {
    if items.is_empty() {
        return Err(ClspError::Config("empty extractor set".into()));
    }
    let ranks = rank_queries(queries, references, dim, pairing)?;
    let truth: Vec<&AgentState> = pairing.iter().map(|&p| &reference_states[p]).collect();
    top1_mae_from(&ranks.top1, &truth, reference_states, items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r_at_k: BTreeMap<usize, f64>,
    pub top1_mae: BTreeMap<String, f64>,
    pub queries: usize,
    pub references: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at_k.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Text queries against their own paired states (`pairing` = identity).
pub fn retrieval_report(
    text_embeddings: &[f32],
    state_embeddings: &[f32],
    dim: usize,
    states: &[AgentState],
    ks: &[usize],
    items: &[EvalItem],
) -> Result<RetrievalReport> {
    let n = states.len();
    let pairing: Vec<usize> = (0..n).collect();
    let ranks = rank_queries(text_embeddings, state_embeddings, dim, &pairing)?;
    let mut r_at_k = BTreeMap::new();
    for &k in ks {
        if k > n {
            return Err(ClspError::Config(format!("k = {k} exceeds {n} references")));
        }
        r_at_k.insert(k, recall_from_ranks(&ranks.rank, k)?);
    }
    let truth: Vec<&AgentState> = states.iter().collect();
    Ok(RetrievalReport {
        r_at_k,
        top1_mae: top1_mae_from(&ranks.top1, &truth, states, items)?,
        queries: n,
        references: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub medae: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// MedAE (lower-middle median for even counts), MAE and RMSE.
pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if predictions.len() != targets.len() {
        return Err(ClspError::WidthMismatch("regression targets", predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(ClspError::Config("no predictions".into()));
    }
    let mut abs: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect();
    let n = abs.len() as f64;
    let mae = abs.iter().sum::<f64>() / n;
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    abs.sort_by(f64::total_cmp);
    let medae = abs[(abs.len() - 1) / 2];
    Ok(RegressionMetrics { medae, mae, rmse })
}

/// Ground-truth columns written next to exported embeddings.
pub const EXPORT_TRUTH_COLUMNS: [&str; 14] = [
    "hp", "x", "y", "z", "direction", "speed", "alive",
    "enemy1_hp", "enemy1_distance", "enemy2_hp", "enemy2_distance",
    "teammate1_distance", "teammate2_distance", "enemies_present",
];

fn truth_row(s: &AgentState) -> Vec<String> {
    let present = s.enemies.iter().filter(|e| e.present).count();
    [
        s.me.hp as f64,
        s.me.position[0],
        s.me.position[1],
        s.me.position[2],
        s.me.direction,
        s.me.speed,
        s.me.alive.class() as f64,
        s.enemies[0].hp as f64,
        s.enemies[0].distance,
        s.enemies[1].hp as f64,
        s.enemies[1].distance,
        s.teammates[0].distance,
        s.teammates[1].distance,
        present as f64,
    ]
    .iter()
    .map(|v| v.to_string())
    .collect()
}

/// CSV with one row per state: `e0..e{dim-1}` then ground-truth columns.
pub fn export_embeddings(path: &Path, embeddings: &[f32], dim: usize, states: &[AgentState]) -> Result<()> {
    if embeddings.len() != states.len() * dim {
        return Err(ClspError::WidthMismatch("embedding export", states.len() * dim, embeddings.len()));
    }
    let file = std::fs::File::create(path).map_err(|e| ClspError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<String> = (0..dim).map(|i| format!("e{i}")).collect();
    header.extend(EXPORT_TRUTH_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (row, s) in embeddings.chunks(dim).zip(states) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.extend(truth_row(s));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| ClspError::io(path, e))
}
