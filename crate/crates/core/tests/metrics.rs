mod common;

use clsp_core::evaluation::{
    angular_error, export_embeddings, rank_queries, recall_at_k, regression_metrics, retrieval_report, top1_mae,
    EvalItem, EXPORT_TRUTH_COLUMNS,
};
use clsp_core::state::{sample_states, AgentState, Alive, EntityBlock, GeneratorConfig, SelfBlock};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle::{check_instance, instance, sorted_references};

#[test]
fn recall_and_top1_match_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..100 {
        if let Err(e) = check_instance(&mut rng, case) {
            panic!("{e}");
        }
    }
}

#[test]
fn ranks_match_oracle_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (queries, refs, dim, pairing) = instance(&mut rng);
    let ranks = rank_queries(&queries, &refs, dim, &pairing).unwrap();
    for (i, q) in queries.chunks(dim).enumerate() {
        let order = sorted_references(q, &refs, dim);
        assert_eq!(ranks.rank[i], order.iter().position(|&r| r == pairing[i]).unwrap());
        assert_eq!(ranks.top1[i], order[0]);
    }
}

#[test]
fn cyclic_shift_pairing_gives_zero_recall_at_one() {
    // Orthonormal embeddings: query i is identical to reference i, but is
    // paired with reference i + 1.
    let n = 12;
    let e: Vec<f32> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
    let pairing: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    assert_eq!(recall_at_k(&e, &e, n, &pairing, 1).unwrap(), 0.0);
    // Every other reference ties at zero; only references below the paired
    // one win the tie.
    let ranks = rank_queries(&e, &e, n, &pairing).unwrap();
    for (i, r) in ranks.rank.iter().enumerate() {
        let p = (i + 1) % n;
        let expected = 1 + (0..p).filter(|&j| j != i).count();
        assert_eq!(*r, expected);
    }
    let identity: Vec<usize> = (0..n).collect();
    assert_eq!(recall_at_k(&e, &e, n, &identity, 1).unwrap(), 1.0);
}

#[test]
fn random_embeddings_recall_at_one_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, dim) = (100, 32);
    let mut total = 0.0;
    let trials = 50;
    for _ in 0..trials {
        let q: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pairing: Vec<usize> = (0..n).collect();
        total += recall_at_k(&q, &r, dim, &pairing, 1).unwrap();
    }
    let mean = total / trials as f64;
    assert!((mean - 0.01).abs() < 0.006, "{mean}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let e = [1.0f32, 0.0];
    assert!(recall_at_k(&e, &e, 2, &[0], 0).is_err());
    assert!(recall_at_k(&e, &e, 2, &[1], 1).is_err());
    assert!(recall_at_k(&e, &e, 0, &[0], 1).is_err());
    assert!(recall_at_k(&e, &[], 2, &[0], 1).is_err());
    let states = sample_states(1, 0, &GeneratorConfig::default());
    assert!(top1_mae(&e, &e, 2, &[0], &states, &[]).is_err());
    assert!(retrieval_report(&e, &e, 2, &states, &[2], &EvalItem::ALL).is_err());
}

#[test]
fn regression_metrics_hand_cases() {
    let m = regression_metrics(&[3.0, -1.0, 2.0, 7.0], &[1.0, 1.0, 2.0, 1.0]).unwrap();
    // Absolute errors 2, 2, 0, 6.
    assert_eq!(m.mae, 2.5);
    assert_eq!(m.rmse, 11f64.sqrt());
    assert_eq!(m.medae, 2.0);
    let one = regression_metrics(&[4.0], &[1.5]).unwrap();
    assert_eq!((one.medae, one.mae, one.rmse), (2.5, 2.5, 2.5));
    let odd = regression_metrics(&[0.0, 0.0, 0.0, 0.0, 0.0], &[5.0, -1.0, 3.0, 0.0, 2.0]).unwrap();
    assert_eq!(odd.medae, 2.0);
    assert_eq!(odd.mae, 2.2);
    assert!(regression_metrics(&[], &[]).is_err());
}

fn entity(hp: u32, position: [f64; 3], distance: f64) -> EntityBlock {
    EntityBlock {
        present: true,
        hp,
        position,
        distance,
    }
}

fn hand_state(hp: u32, position: [f64; 3], direction: f64, speed: f64, enemy: Option<EntityBlock>) -> AgentState {
    AgentState {
        me: SelfBlock {
            hp,
            position,
            direction,
            speed,
            alive: if hp > 0 { Alive::Normal } else { Alive::Dead },
        },
        enemies: [enemy.unwrap_or(EntityBlock::ABSENT), EntityBlock::ABSENT],
        teammates: [EntityBlock::ABSENT; 2],
    }
}

#[test]
fn top1_mae_on_hand_built_states() {
    let states = [
        hand_state(100, [0.0, 0.0, 0.0], 10.0, 1.0, None),
        hand_state(50, [3.0, 4.0, 0.0], 350.0, 2.0, Some(entity(40, [1.0, 1.0, 1.0], 100.0))),
        hand_state(0, [0.0, 0.0, 12.0], 180.0, 0.0, None),
        hand_state(75, [1.0, 2.0, 2.0], 90.0, 5.5, Some(entity(80, [0.0, 0.0, 0.0], 20.0))),
        hand_state(20, [6.0, 8.0, 0.0], 0.0, 3.0, None),
    ];
    // Queries 0 and 1 retrieve each other, query 2 retrieves state 4, the
    // rest retrieve themselves.
    let dim = 5;
    let mut refs = vec![0f32; 25];
    for i in 0..5 {
        refs[i * dim + i] = 1.0;
    }
    let target = [1, 0, 4, 3, 4];
    let mut queries = vec![0f32; 25];
    for (q, &t) in target.iter().enumerate() {
        queries[q * dim + t] = 1.0;
    }
    let pairing: Vec<usize> = (0..5).collect();
    let mae = top1_mae(&queries, &refs, dim, &pairing, &states, &EvalItem::ALL).unwrap();
    assert_eq!(mae["self_hp"], (50.0 + 50.0 + 20.0) / 5.0);
    assert_eq!(mae["self_position"], (5.0 + 5.0 + (36.0f64 + 64.0 + 144.0).sqrt()) / 5.0);
    assert_eq!(mae["self_direction"], (20.0 + 20.0 + 180.0) / 5.0);
    assert_eq!(mae["self_speed"], (1.0 + 1.0 + 3.0) / 5.0);
    // Enemy items average over both slots; absent slots read as zero.
    assert_eq!(mae["enemy_hp"], (20.0 + 20.0) / 5.0);
    assert_eq!(mae["enemy_distance"], (50.0 + 50.0) / 5.0);
    assert_eq!(mae["enemy_position"], (3f64.sqrt() / 2.0 * 2.0) / 5.0);
    assert_eq!(mae["teammate_hp"], 0.0);
}

#[test]
fn export_rows_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let states = sample_states(7, 3, &GeneratorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 3;
    let emb: Vec<f32> = (0..7 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    export_embeddings(&path, &emb, dim, &states).unwrap();
    let first = std::fs::read(&path).unwrap();
    export_embeddings(&path, &emb, dim, &states).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());

    let mut reader = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header.len(), dim + EXPORT_TRUTH_COLUMNS.len());
    assert_eq!(&header[..dim], ["e0", "e1", "e2"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 7);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..dim {
            let v: f32 = row[j].parse().unwrap();
            assert_eq!(v.to_bits(), emb[i * dim + j].to_bits());
        }
        let hp: f64 = row[dim].parse().unwrap();
        assert_eq!(hp, states[i].me.hp as f64);
        let speed: f64 = row[dim + 5].parse().unwrap();
        assert_eq!(speed, states[i].me.speed);
        let present: f64 = row[dim + 13].parse().unwrap();
        assert_eq!(present as usize, states[i].enemies.iter().filter(|e| e.present).count());
    }
    assert!(export_embeddings(&path, &emb[1..], dim, &states).is_err());
}

proptest! {
    #[test]
    fn angular_error_is_symmetric_and_bounded(a in -1000.0f64..1000.0, b in -1000.0f64..1000.0) {
        let e = angular_error(a, b);
        prop_assert!((e - angular_error(b, a)).abs() < 1e-9);
        prop_assert!((0.0..=180.0).contains(&e));
        prop_assert!((angular_error(a + 360.0, b) - e).abs() < 1e-9);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, r, dim, pairing) = instance(&mut rng);
        let nr = r.len() / dim;
        let mut last = 0.0;
        for k in 1..=nr.min(20) {
            let v = recall_at_k(&q, &r, dim, &pairing, k).unwrap();
            prop_assert!(v >= last);
            last = v;
        }
        prop_assert_eq!(recall_at_k(&q, &r, dim, &pairing, nr).unwrap(), 1.0);
    }
}
