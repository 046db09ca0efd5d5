//! Agent-state domain types, the synthetic state generator and the templated
//! text renderer.
//!
//! This is a stand-in for a proprietary shooter-game corpus: the field list,
//! map geometry and sentence templates are ours. Every value is sampled so
//! that each classification bin of every item stays reasonably populated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClspError, Result};
use crate::rng::{chacha, derive_seed};

pub const MAP_SIZE: f64 = 4000.0;
pub const MAX_Z: f64 = 150.0;
pub const MAX_SPEED: f64 = 10.0;
pub const MAX_HP: u32 = 100;
pub const SLOTS: usize = 2;
/// Upper end of the distance item range, the map diagonal.
pub const MAX_DISTANCE: f64 = MAP_SIZE * std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alive {
    Normal,
    Down,
    Dead,
}

impl Alive {
    pub const ALL: [Alive; 3] = [Alive::Normal, Alive::Down, Alive::Dead];

    pub fn class(self) -> usize {
        match self {
            Alive::Normal => 0,
            Alive::Down => 1,
            Alive::Dead => 2,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Alive::Normal => "normal",
            Alive::Down => "down",
            Alive::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfBlock {
    pub hp: u32,
    pub position: [f64; 3],
    pub direction: f64,
    pub speed: f64,
    pub alive: Alive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityBlock {
    pub present: bool,
    pub hp: u32,
    pub position: [f64; 3],
    pub distance: f64,
}

impl EntityBlock {
    pub const ABSENT: EntityBlock = EntityBlock {
        present: false,
        hp: 0,
        position: [0.0; 3],
        distance: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    #[serde(rename = "self")]
    pub me: SelfBlock,
    pub enemies: [EntityBlock; SLOTS],
    pub teammates: [EntityBlock; SLOTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTextPair {
    pub state: AgentState,
    pub text: String,
}

impl StateTextPair {
    pub fn from_state(state: AgentState) -> Self {
        let text = render_text(&state);
        Self { state, text }
    }
}

pub fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn violation(field: impl Into<String>, reason: impl Into<String>) -> ClspError {
    ClspError::SchemaViolation {
        field: field.into(),
        reason: reason.into(),
    }
}

fn check_position(field: &str, p: &[f64; 3]) -> Result<()> {
    let ok = p.iter().all(|v| v.is_finite())
        && (0.0..=MAP_SIZE).contains(&p[0])
        && (0.0..=MAP_SIZE).contains(&p[1])
        && (0.0..=MAX_Z).contains(&p[2]);
    if ok {
        Ok(())
    } else {
        Err(violation(field, format!("{p:?} outside the map")))
    }
}

fn check_hp(field: &str, hp: u32) -> Result<()> {
    if hp > MAX_HP || hp % 10 != 0 {
        return Err(violation(field, format!("{hp} is not a multiple of 10 in [0,100]")));
    }
    Ok(())
}

impl AgentState {
    /// Checks every range and structural invariant of the state layout.
    pub fn validate(&self) -> Result<()> {
        let me = &self.me;
        check_hp("self.hp", me.hp)?;
        check_position("self.position", &me.position)?;
        if !(me.direction.is_finite() && (0.0..360.0).contains(&me.direction)) {
            return Err(violation("self.direction", format!("{} not in [0,360)", me.direction)));
        }
        if !(me.speed.is_finite() && (0.0..=MAX_SPEED).contains(&me.speed)) {
            return Err(violation("self.speed", format!("{} not in [0,10]", me.speed)));
        }
        match me.alive {
            Alive::Dead if me.hp != 0 || me.speed != 0.0 => {
                return Err(violation("self.alive", "dead requires hp 0 and speed 0"));
            }
            Alive::Normal | Alive::Down if me.hp < 10 => {
                return Err(violation("self.alive", "normal/down requires hp >= 10"));
            }
            _ => {}
        }
        for (group, slots) in [("enemies", &self.enemies), ("teammates", &self.teammates)] {
            let mut seen_absent = false;
            let mut last_distance = 0.0;
            for (i, e) in slots.iter().enumerate() {
                let field = format!("{group}[{i}]");
                if !e.present {
                    seen_absent = true;
                    if *e != EntityBlock::ABSENT {
                        return Err(violation(field, "absent slot must be all zeros"));
                    }
                    continue;
                }
                if seen_absent {
                    return Err(violation(field, "present slot after an absent one"));
                }
                check_hp(&format!("{field}.hp"), e.hp)?;
                check_position(&format!("{field}.position"), &e.position)?;
                let expected = euclidean(&e.position, &me.position);
                if (e.distance - expected).abs() > 1e-6 {
                    return Err(violation(
                        format!("{field}.distance"),
                        format!("{} != euclidean distance {expected}", e.distance),
                    ));
                }
                if e.distance < last_distance {
                    return Err(violation(field, "slots must be sorted by distance"));
                }
                last_distance = e.distance;
            }
        }
        Ok(())
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Probabilities of normal / down / dead.
    pub alive_proportions: [f64; 3],
    /// Probabilities of 0, 1 and 2 visible enemies.
    pub enemy_counts: [f64; 3],
    /// Probabilities of 0, 1 and 2 visible teammates.
    pub teammate_counts: [f64; 3],
    /// Maximum distance gap between the first and second entity of a group.
    pub pair_gap: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            alive_proportions: [0.7, 0.15, 0.15],
            enemy_counts: [0.2, 0.4, 0.4],
            teammate_counts: [0.2, 0.4, 0.4],
            pair_gap: 800.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, probs) in [
            ("alive_proportions", &self.alive_proportions),
            ("enemy_counts", &self.enemy_counts),
            ("teammate_counts", &self.teammate_counts),
        ] {
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(ClspError::Config(format!("{name} must be a probability vector")));
            }
        }
        if !(self.pair_gap.is_finite() && self.pair_gap >= 0.0) {
            return Err(ClspError::Config("pair_gap must be >= 0".into()));
        }
        Ok(())
    }
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn farthest_corner(p: [f64; 2]) -> ([f64; 2], f64) {
    let cx = if p[0] < MAP_SIZE / 2.0 { MAP_SIZE } else { 0.0 };
    let cy = if p[1] < MAP_SIZE / 2.0 { MAP_SIZE } else { 0.0 };
    let d = ((cx - p[0]).powi(2) + (cy - p[1]).powi(2)).sqrt();
    ([cx, cy], d)
}

/// Self position whose farthest map corner is at least `reach` away.
fn sample_self_xy<R: Rng>(rng: &mut R, reach: f64) -> [f64; 2] {
    let box_side = if reach > MAP_SIZE {
        MAP_SIZE - (reach * reach - MAP_SIZE * MAP_SIZE).sqrt()
    } else {
        MAP_SIZE
    };
    for _ in 0..10_000 {
        let p = if reach > MAP_SIZE {
            let u = rng.gen::<f64>() * box_side;
            let v = rng.gen::<f64>() * box_side;
            let corner = rng.gen_range(0..4);
            let x = if corner & 1 == 0 { u } else { MAP_SIZE - u };
            let y = if corner & 2 == 0 { v } else { MAP_SIZE - v };
            [x, y]
        } else {
            [rng.gen::<f64>() * MAP_SIZE, rng.gen::<f64>() * MAP_SIZE]
        };
        if farthest_corner(p).1 >= reach {
            return p;
        }
    }
    [0.0, 0.0]
}

struct Placement {
    horizontal: f64,
    z: f64,
}

fn sample_group_distances<R: Rng>(rng: &mut R, counts: &[f64; 3], gap: f64) -> Vec<f64> {
    let k = categorical(rng, counts);
    let mut out = Vec::with_capacity(k);
    if k >= 1 {
        out.push(rng.gen::<f64>() * MAX_DISTANCE);
    }
    if k == 2 {
        let second = (out[0] + rng.gen::<f64>() * gap).min(MAX_DISTANCE);
        out.push(second);
    }
    out
}

fn place_entity<R: Rng>(rng: &mut R, me: [f64; 2], placement: &Placement) -> [f64; 2] {
    let inside = |p: [f64; 2]| (0.0..=MAP_SIZE).contains(&p[0]) && (0.0..=MAP_SIZE).contains(&p[1]);
    let r = placement.horizontal;
    for _ in 0..256 {
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let p = [me[0] + r * theta.cos(), me[1] + r * theta.sin()];
        if inside(p) {
            return p;
        }
    }
    let (corner, far) = farthest_corner(me);
    let t = if far > 0.0 { (r / far).min(1.0) } else { 0.0 };
    [
        (me[0] + t * (corner[0] - me[0])).clamp(0.0, MAP_SIZE),
        (me[1] + t * (corner[1] - me[1])).clamp(0.0, MAP_SIZE),
    ]
}

/// Samples one state from `seed`.
pub fn sample_state(seed: u64, config: &GeneratorConfig) -> AgentState {
    let mut rng = chacha(seed);
    let alive = Alive::ALL[categorical(&mut rng, &config.alive_proportions)];
    let (hp, speed) = match alive {
        Alive::Dead => (0, 0.0),
        Alive::Down => (10 * rng.gen_range(1..=10), rng.gen::<f64>() * 3.0),
        Alive::Normal => (10 * rng.gen_range(1..=10), rng.gen::<f64>() * MAX_SPEED),
    };
    let direction = rng.gen::<f64>() * 360.0;
    let my_z = rng.gen::<f64>() * MAX_Z;

    let enemy_d = sample_group_distances(&mut rng, &config.enemy_counts, config.pair_gap);
    let mate_d = sample_group_distances(&mut rng, &config.teammate_counts, config.pair_gap);

    let place = |target: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let lo = (my_z - target).max(0.0);
        let hi = (my_z + target).min(MAX_Z);
        let z = lo + rng.gen::<f64>() * (hi - lo);
        let dz = z - my_z;
        Placement {
            horizontal: (target * target - dz * dz).max(0.0).sqrt(),
            z,
        }
    };
    let enemy_p: Vec<Placement> = enemy_d.iter().map(|&d| place(d, &mut rng)).collect();
    let mate_p: Vec<Placement> = mate_d.iter().map(|&d| place(d, &mut rng)).collect();
    let reach = enemy_p
        .iter()
        .chain(&mate_p)
        .map(|p| p.horizontal)
        .fold(0.0, f64::max);
    let me_xy = sample_self_xy(&mut rng, reach);
    let my_position = [me_xy[0], me_xy[1], my_z];

    let build = |placements: &[Placement], rng: &mut rand_chacha::ChaCha8Rng| {
        let mut slots = [EntityBlock::ABSENT; SLOTS];
        let mut present: Vec<EntityBlock> = placements
            .iter()
            .map(|p| {
                let xy = place_entity(rng, me_xy, p);
                let position = [xy[0], xy[1], p.z];
                EntityBlock {
                    present: true,
                    hp: 10 * rng.gen_range(0..=10),
                    position,
                    distance: euclidean(&position, &my_position),
                }
            })
            .collect();
        present.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        for (slot, e) in slots.iter_mut().zip(present) {
            *slot = e;
        }
        slots
    };
    let enemies = build(&enemy_p, &mut rng);
    let teammates = build(&mate_p, &mut rng);

    AgentState {
        me: SelfBlock {
            hp,
            position: my_position,
            direction,
            speed,
            alive,
        },
        enemies,
        teammates,
    }
}

/// `n` states, the `i`-th drawn from `derive_seed(seed, i)`.
pub fn sample_states(n: usize, seed: u64, config: &GeneratorConfig) -> Vec<AgentState> {
    (0..n)
        .map(|i| sample_state(derive_seed(seed, i as u64), config))
        .collect()
}

pub fn generate_pairs(n: usize, seed: u64, config: &GeneratorConfig) -> Vec<StateTextPair> {
    sample_states(n, seed, config)
        .into_iter()
        .map(StateTextPair::from_state)
        .collect()
}

/// Integer meters / degrees, round half away from zero.
pub fn round_int(v: f64) -> i64 {
    v.round() as i64
}

/// Direction in whole degrees, wrapped into [0, 360).
pub fn round_direction(v: f64) -> i64 {
    round_int(v).rem_euclid(360)
}

/// Speed in tenths of m/s.
pub fn round_tenths(v: f64) -> i64 {
    (v * 10.0).round() as i64
}

fn write_position(out: &mut String, p: &[f64; 3]) {
    use std::fmt::Write;
    let _ = write!(out, "{}, {}, {}", round_int(p[0]), round_int(p[1]), round_int(p[2]));
}

/// Deterministic English description covering every item.
pub fn render_text(state: &AgentState) -> String {
    use std::fmt::Write;
    let me = &state.me;
    let mut s = String::with_capacity(400);
    let tenths = round_tenths(me.speed);
    let _ = write!(s, "my hp is {}. my position is ", me.hp);
    write_position(&mut s, &me.position);
    let _ = write!(
        s,
        ". my direction is {} degrees. my speed is {}.{} m/s. i am {}.",
        round_direction(me.direction),
        tenths / 10,
        tenths % 10,
        me.alive.word()
    );
    for (noun, slots) in [("enemy", &state.enemies), ("teammate", &state.teammates)] {
        for (i, e) in slots.iter().enumerate() {
            if e.present {
                let _ = write!(s, " {noun} {} has hp {} at ", i + 1, e.hp);
                write_position(&mut s, &e.position);
                let _ = write!(s, ", {} m away.", round_int(e.distance));
            } else {
                let _ = write!(s, " no {noun} {} visible.", i + 1);
            }
        }
    }
    s
}

/// Disjoint train/test split; `|test| = round(N * test_fraction)`.
pub fn split_pairs<T: Clone>(items: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(ClspError::Config(format!(
            "need at least 2 records to split, got {}",
            items.len()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ClspError::Config(format!(
            "test fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let n = items.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = chacha(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (item, t) in items.iter().zip(is_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}
