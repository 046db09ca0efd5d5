//! State schema: the ordered item list, per-item encodings and class bins, and
//! the flattened feature layout fed to the state encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{msn_encode, npe_encode, rff_encode, EncodingKind, EncodingSpec, FrequencyBank, MSN_SCALES};
use crate::error::{ClspError, Result};
use crate::rng::derive_seed;
use crate::state::{AgentState, EntityBlock, MAP_SIZE, MAX_DISTANCE, MAX_HP, MAX_SPEED, MAX_Z, SLOTS};

/// Which scalar encoding a schema applies to every numeric item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarEncoding {
    Identity,
    Msn,
    Npe,
    Rff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    #[serde(rename = "self")]
    Me,
    Enemy,
    Teammate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelfField {
    Hp,
    X,
    Y,
    Z,
    Direction,
    Speed,
    Alive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityField {
    Present,
    Hp,
    X,
    Y,
    Z,
    Distance,
}

/// Where an item's value lives inside an [`AgentState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemRef {
    Me(SelfField),
    Enemy(usize, EntityField),
    Teammate(usize, EntityField),
}

impl ItemRef {
    fn entity(state: &AgentState, group: Group, slot: usize) -> &EntityBlock {
        match group {
            Group::Enemy => &state.enemies[slot],
            _ => &state.teammates[slot],
        }
    }

    pub fn group(self) -> Group {
        match self {
            ItemRef::Me(_) => Group::Me,
            ItemRef::Enemy(..) => Group::Enemy,
            ItemRef::Teammate(..) => Group::Teammate,
        }
    }

    /// Raw value (categoricals return their class index).
    pub fn value(self, state: &AgentState) -> f64 {
        let me = &state.me;
        match self {
            ItemRef::Me(f) => match f {
                SelfField::Hp => me.hp as f64,
                SelfField::X => me.position[0],
                SelfField::Y => me.position[1],
                SelfField::Z => me.position[2],
                SelfField::Direction => me.direction,
                SelfField::Speed => me.speed,
                SelfField::Alive => me.alive.class() as f64,
            },
            ItemRef::Enemy(slot, f) | ItemRef::Teammate(slot, f) => {
                let e = Self::entity(state, self.group(), slot);
                match f {
                    EntityField::Present => e.present as u8 as f64,
                    EntityField::Hp => e.hp as f64,
                    EntityField::X => e.position[0],
                    EntityField::Y => e.position[1],
                    EntityField::Z => e.position[2],
                    EntityField::Distance => e.distance,
                }
            }
        }
    }
}

/// Uniform class bins over `[lo, hi]`; values on or past `hi` land in the last bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBins {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl ClassBins {
    pub fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.n as f64;
        (0..=self.n).map(|i| self.lo + w * i as f64).collect()
    }

    pub fn class_of(&self, v: f64) -> usize {
        let t = (v - self.lo) / (self.hi - self.lo) * self.n as f64;
        if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t.floor() as usize).min(self.n - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ItemKind {
    Scalar {
        lo: f64,
        hi: f64,
        encoding: EncodingSpec,
        bins: ClassBins,
    },
    Categorical {
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaItem {
    pub id: String,
    pub kind: ItemKind,
    /// Column offset inside the flattened vector.
    pub offset: usize,
    pub width: usize,
    #[serde(skip)]
    pub item_ref: Option<ItemRef>,
}

impl SchemaItem {
    pub fn class_count(&self) -> usize {
        match &self.kind {
            ItemKind::Scalar { bins, .. } => bins.n,
            ItemKind::Categorical { classes } => *classes,
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self.kind, ItemKind::Scalar { .. })
    }

    pub fn group(&self) -> Group {
        self.item_ref().group()
    }

    pub fn item_ref(&self) -> ItemRef {
        self.item_ref.expect("schema items are built with a reference")
    }

    pub fn class_of(&self, state: &AgentState) -> usize {
        let v = self.item_ref().value(state);
        match &self.kind {
            ItemKind::Scalar { bins, .. } => bins.class_of(v),
            ItemKind::Categorical { classes } => (v as usize).min(classes - 1),
        }
    }
}

/// Frequency-bank record carried by checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub item: String,
    pub seed: u64,
    pub sigma: f64,
    pub d: usize,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSchema {
    pub encoding: ScalarEncoding,
    pub rff_seed: u64,
    pub sigma: f64,
    items: Vec<SchemaItem>,
    banks: BTreeMap<String, FrequencyBank>,
    width: usize,
}

/// Frequency count per scalar item: position and distance 8, direction and speed 6, HP 4.
fn frequencies_for(field: &str) -> usize {
    match field {
        "hp" => 4,
        "direction" | "speed" => 6,
        _ => 8,
    }
}

impl StateSchema {
    pub fn new(encoding: ScalarEncoding, rff_seed: u64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ClspError::Config(format!("sigma must be > 0, got {sigma}")));
        }
        let uniform = |lo: f64, hi: f64, n: usize| ClassBins { lo, hi, n };
        let hp_bins = uniform(-5.0, MAX_HP as f64 + 5.0, 11);
        let xy_bins = uniform(0.0, MAP_SIZE, 16);
        let z_bins = uniform(0.0, MAX_Z, 8);
        let distance_bins = uniform(0.0, MAX_DISTANCE, 16);

        let mut layout: Vec<(String, ItemRef, Option<(f64, f64, ClassBins)>, usize)> = vec![
            ("self.hp".into(), ItemRef::Me(SelfField::Hp), Some((0.0, MAX_HP as f64, hp_bins)), 0),
            ("self.x".into(), ItemRef::Me(SelfField::X), Some((0.0, MAP_SIZE, xy_bins)), 0),
            ("self.y".into(), ItemRef::Me(SelfField::Y), Some((0.0, MAP_SIZE, xy_bins)), 0),
            ("self.z".into(), ItemRef::Me(SelfField::Z), Some((0.0, MAX_Z, z_bins)), 0),
            (
                "self.direction".into(),
                ItemRef::Me(SelfField::Direction),
                Some((0.0, 360.0, uniform(0.0, 360.0, 12))),
                0,
            ),
            (
                "self.speed".into(),
                ItemRef::Me(SelfField::Speed),
                Some((0.0, MAX_SPEED, uniform(0.0, MAX_SPEED, 10))),
                0,
            ),
            ("self.alive".into(), ItemRef::Me(SelfField::Alive), None, 3),
        ];
        for (name, make) in [
            ("enemy", ItemRef::Enemy as fn(usize, EntityField) -> ItemRef),
            ("teammate", ItemRef::Teammate),
        ] {
            for slot in 0..SLOTS {
                let p = format!("{name}{}", slot + 1);
                layout.push((format!("{p}.present"), make(slot, EntityField::Present), None, 2));
                layout.push((format!("{p}.hp"), make(slot, EntityField::Hp), Some((0.0, MAX_HP as f64, hp_bins)), 0));
                layout.push((format!("{p}.x"), make(slot, EntityField::X), Some((0.0, MAP_SIZE, xy_bins)), 0));
                layout.push((format!("{p}.y"), make(slot, EntityField::Y), Some((0.0, MAP_SIZE, xy_bins)), 0));
                layout.push((format!("{p}.z"), make(slot, EntityField::Z), Some((0.0, MAX_Z, z_bins)), 0));
                layout.push((
                    format!("{p}.distance"),
                    make(slot, EntityField::Distance),
                    Some((0.0, MAX_DISTANCE, distance_bins)),
                    0,
                ));
            }
        }

        let mut items = Vec::with_capacity(layout.len());
        let mut banks = BTreeMap::new();
        let mut offset = 0;
        for (index, (id, item_ref, scalar, classes)) in layout.into_iter().enumerate() {
            let kind = match scalar {
                Some((lo, hi, bins)) => {
                    let field = id.rsplit('.').next().unwrap_or_default();
                    let d = frequencies_for(field);
                    let spec = match encoding {
                        ScalarEncoding::Identity => EncodingSpec::identity(),
                        ScalarEncoding::Msn => EncodingSpec::msn(),
                        ScalarEncoding::Npe => EncodingSpec::npe(d),
                        ScalarEncoding::Rff => {
                            let seed = derive_seed(rff_seed, index as u64);
                            banks.insert(id.clone(), FrequencyBank::sample(seed, sigma, d));
                            EncodingSpec::rff(d, sigma, seed)
                        }
                    };
                    ItemKind::Scalar {
                        lo,
                        hi,
                        encoding: spec,
                        bins,
                    }
                }
                None => ItemKind::Categorical { classes },
            };
            let width = match &kind {
                ItemKind::Scalar { encoding, .. } => encoding.width(),
                ItemKind::Categorical { classes } => *classes,
            };
            items.push(SchemaItem {
                id,
                kind,
                offset,
                width,
                item_ref: Some(item_ref),
            });
            offset += width;
        }
        Ok(Self {
            encoding,
            rff_seed,
            sigma,
            items,
            banks,
            width: offset,
        })
    }

    pub fn items(&self) -> &[SchemaItem] {
        &self.items
    }

    pub fn item(&self, id: &str) -> Result<&SchemaItem> {
        self.items
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| ClspError::UnknownItem(id.to_string()))
    }

    pub fn item_index(&self, id: &str) -> Result<usize> {
        self.items
            .iter()
            .position(|i| i.id == id)
            .ok_or_else(|| ClspError::UnknownItem(id.to_string()))
    }

    /// Flattened feature width.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.items.iter().map(SchemaItem::class_count).collect()
    }

    pub fn bank(&self, id: &str) -> Option<&FrequencyBank> {
        self.banks.get(id)
    }

    pub fn bank_records(&self) -> Vec<BankRecord> {
        self.banks
            .iter()
            .map(|(item, bank)| BankRecord {
                item: item.clone(),
                seed: bank.seed,
                sigma: bank.sigma,
                d: bank.d(),
                b: bank.b.clone(),
            })
            .collect()
    }

    /// Installs realized frequencies loaded from a checkpoint.
    pub fn install_banks(&mut self, records: &[BankRecord]) -> Result<()> {
        for r in records {
            let item = self.item(&r.item)?;
            let expected_d = match &item.kind {
                ItemKind::Scalar { encoding, .. } if encoding.kind == EncodingKind::Rff => encoding.d,
                _ => {
                    return Err(ClspError::Corrupt(format!(
                        "frequency bank for non-RFF item {}",
                        r.item
                    )))
                }
            };
            if r.b.len() != expected_d || r.d != expected_d {
                return Err(ClspError::Corrupt(format!(
                    "bank {} has {} frequencies, schema expects {expected_d}",
                    r.item,
                    r.b.len()
                )));
            }
            self.banks.insert(
                r.item.clone(),
                FrequencyBank {
                    seed: r.seed,
                    sigma: r.sigma,
                    b: r.b.clone(),
                },
            );
        }
        Ok(())
    }

    /// SHA-256 over the structural description (items, ranges, specs, bins).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.items).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Normalizes by the item range, clamps, and applies the item's encoding.
    pub fn encode_scalar(&self, v: f64, item_id: &str) -> Result<Vec<f64>> {
        let item = self.item(item_id)?;
        let mut out = Vec::with_capacity(item.width);
        self.encode_item_into(item, v, &mut out);
        Ok(out)
    }

    fn encode_item_into(&self, item: &SchemaItem, v: f64, out: &mut Vec<f64>) {
        match &item.kind {
            ItemKind::Scalar { lo, hi, encoding, .. } => {
                let raw = v.clamp(*lo, *hi);
                let unit = (raw - lo) / (hi - lo);
                match encoding.kind {
                    EncodingKind::Identity => out.push(unit),
                    EncodingKind::Msn => out.extend(msn_encode(raw, &MSN_SCALES)),
                    EncodingKind::Npe => out.extend(npe_encode(unit, encoding.d)),
                    EncodingKind::Rff => {
                        let bank = &self.banks[&item.id];
                        out.extend(rff_encode(unit, bank));
                    }
                }
            }
            ItemKind::Categorical { classes } => {
                let class = (v as usize).min(classes - 1);
                out.extend((0..*classes).map(|c| if c == class { 1.0 } else { 0.0 }));
            }
        }
    }

    /// Concatenated encodings of every item in schema order.
    pub fn flatten_state(&self, state: &AgentState) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width);
        for item in &self.items {
            self.encode_item_into(item, item.item_ref().value(state), &mut out);
        }
        out
    }

    /// Flattens many states into one row-major `f32` buffer.
    pub fn flatten_batch(&self, states: &[AgentState]) -> Vec<f32> {
        let mut out = Vec::with_capacity(states.len() * self.width);
        for s in states {
            out.extend(self.flatten_state(s).into_iter().map(|v| v as f32));
        }
        out
    }

    /// One class index per item, in schema order.
    pub fn build_class_labels(&self, state: &AgentState) -> Vec<usize> {
        self.items.iter().map(|i| i.class_of(state)).collect()
    }

    /// Indices of items belonging to the classifier target set.
    pub fn target_items(&self, target: TargetSet) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, item)| target.includes(item.group()))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Which items the pre-training classifier heads are trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSet {
    #[serde(rename = "self")]
    Me,
    Team,
    Enemy,
    All,
}

impl TargetSet {
    pub fn includes(self, group: Group) -> bool {
        match self {
            TargetSet::All => true,
            TargetSet::Me => group == Group::Me,
            TargetSet::Team => group == Group::Teammate,
            TargetSet::Enemy => group == Group::Enemy,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(TargetSet::Me),
            "team" => Ok(TargetSet::Team),
            "enemy" => Ok(TargetSet::Enemy),
            "all" => Ok(TargetSet::All),
            other => Err(ClspError::Config(format!("unknown classifier target {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetSet::Me => "self",
            TargetSet::Team => "team",
            TargetSet::Enemy => "enemy",
            TargetSet::All => "all",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{sample_state, GeneratorConfig};

    fn rff() -> StateSchema {
        StateSchema::new(ScalarEncoding::Rff, 17, 1.0).unwrap()
    }

    #[test]
    fn declared_widths() {
        assert_eq!(rff().width(), 379);
        assert_eq!(StateSchema::new(ScalarEncoding::Identity, 0, 1.0).unwrap().width(), 37);
        assert_eq!(StateSchema::new(ScalarEncoding::Msn, 0, 1.0).unwrap().width(), 26 * 4 + 11);
        assert_eq!(StateSchema::new(ScalarEncoding::Npe, 0, 1.0).unwrap().width(), 379);
    }

    #[test]
    fn position_uses_eight_frequencies_and_hp_four() {
        let s = rff();
        let mid = s.encode_scalar(2000.0, "self.x").unwrap();
        assert_eq!(mid.len(), 16);
        let bank = s.bank("self.x").unwrap();
        assert_eq!(mid, rff_encode(0.5, bank));
        let hp = s.encode_scalar(0.0, "self.hp").unwrap();
        assert_eq!(hp, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_values_clamp() {
        let s = rff();
        assert_eq!(
            s.encode_scalar(4500.0, "self.x").unwrap(),
            s.encode_scalar(4000.0, "self.x").unwrap()
        );
        assert!(matches!(
            s.encode_scalar(1.0, "self.mana"),
            Err(ClspError::UnknownItem(_))
        ));
    }

    #[test]
    fn label_examples() {
        let s = rff();
        let bins = |id: &str| match &s.item(id).unwrap().kind {
            ItemKind::Scalar { bins, .. } => *bins,
            _ => unreachable!(),
        };
        assert_eq!(bins("self.hp").class_of(80.0), 8);
        assert_eq!(bins("self.hp").class_of(100.0), 10);
        assert_eq!(bins("self.hp").class_of(0.0), 0);
        assert_eq!(bins("self.x").class_of(2000.0), 8);
        assert_eq!(bins("self.x").class_of(4000.0), 15);
        assert_eq!(bins("self.direction").class_of(359.9), 11);
        assert_eq!(bins("enemy1.distance").class_of(MAX_DISTANCE + 3.0), 15);
        for item in s.items() {
            if let ItemKind::Scalar { bins, .. } = &item.kind {
                assert!(bins.edges().windows(2).all(|w| w[0] < w[1]));
            }
        }
        assert_eq!(
            s.class_counts()[..7],
            [11, 16, 16, 8, 12, 10, 3]
        );
    }

    #[test]
    fn absent_slot_encodes_clamped_zeros() {
        let s = rff();
        let mut state = sample_state(4, &GeneratorConfig::default());
        state.enemies[1] = EntityBlock::ABSENT;
        let flat = s.flatten_state(&state);
        let present = s.item("enemy2.present").unwrap();
        assert_eq!(&flat[present.offset..present.offset + 2], &[1.0, 0.0]);
        for id in ["enemy2.hp", "enemy2.x", "enemy2.distance"] {
            let item = s.item(id).unwrap();
            assert_eq!(
                flat[item.offset..item.offset + item.width].to_vec(),
                s.encode_scalar(0.0, id).unwrap()
            );
        }
    }

    #[test]
    fn hash_tracks_structure() {
        assert_eq!(rff().hash(), rff().hash());
        assert_ne!(rff().hash(), StateSchema::new(ScalarEncoding::Rff, 18, 1.0).unwrap().hash());
        assert_ne!(
            rff().hash(),
            StateSchema::new(ScalarEncoding::Identity, 17, 1.0).unwrap().hash()
        );
    }

    #[test]
    fn target_sets_partition_items() {
        let s = rff();
        let me = s.target_items(TargetSet::Me).len();
        let enemy = s.target_items(TargetSet::Enemy).len();
        let team = s.target_items(TargetSet::Team).len();
        assert_eq!(me + enemy + team, s.target_items(TargetSet::All).len());
        assert_eq!(me, 7);
    }
}
