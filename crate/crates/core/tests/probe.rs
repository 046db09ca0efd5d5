mod common;

use clsp_core::connector::{
    decode_probe, probe_table, probe_targets, train_probe, write_probe_csv, Connector, ProbeReading,
};
use clsp_core::encoders::{EncoderVariant, StateEncoder};
use clsp_core::evaluation::regression_metrics;
use clsp_core::pipeline::{probe, random_state_params};
use clsp_core::state::{sample_states, GeneratorConfig};

#[test]
fn decoding_exact_targets_recovers_the_state() {
    let states = sample_states(200, 5, &GeneratorConfig::default());
    let readings: Vec<ProbeReading> = states.iter().map(|s| decode_probe(&probe_targets(s))).collect();
    for (r, s) in readings.iter().zip(&states) {
        assert!((r.hp - s.me.hp as f64).abs() < 1e-9);
        assert!((r.speed - s.me.speed).abs() < 1e-9);
        for k in 0..3 {
            assert!((r.position[k] - s.me.position[k]).abs() < 1e-9);
        }
        let d = (r.direction - s.me.direction).abs();
        assert!(d < 1e-9 || (d - 360.0).abs() < 1e-9, "{} vs {}", r.direction, s.me.direction);
    }
    let table = probe_table(&readings, &states).unwrap();
    assert_eq!(table.rows.len(), 8);
    for row in &table.rows {
        assert!(row.metrics.mae < 1e-9, "{} {}", row.item, row.metrics.mae);
    }
}

#[test]
fn probe_table_counts_present_slots_only() {
    let states = sample_states(300, 9, &GeneratorConfig::default());
    let readings: Vec<ProbeReading> = states
        .iter()
        .map(|s| {
            let mut r = decode_probe(&probe_targets(s));
            r.hp += 3.0;
            for e in &mut r.entities {
                e.0 += 7.0;
            }
            r
        })
        .collect();
    let table = probe_table(&readings, &states).unwrap();
    assert!((table.get("self_hp").unwrap().mae - 3.0).abs() < 1e-9);
    assert!((table.get("enemy_hp").unwrap().mae - 7.0).abs() < 1e-9);
    assert!(table.get("enemy_distance").unwrap().mae < 1e-9);
    assert!(table.get("self_position").unwrap().mae < 1e-9);
}

#[test]
fn probe_learns_hp_from_an_untrained_encoder() {
    let mut cfg = common::tiny_config();
    cfg.probe.frozen_epochs = 6;
    let (schema, params) = random_state_params(EncoderVariant::ClipBaseline, &cfg).unwrap();
    let states = sample_states(2200, 13, &GeneratorConfig::default());
    let (train, test) = states.split_at(2000);
    let (_, table) = probe(EncoderVariant::ClipBaseline, &cfg, &schema, &params, train, test).unwrap();
    // Predicting the training mean everywhere.
    let mean = train.iter().map(|s| s.me.hp as f64).sum::<f64>() / train.len() as f64;
    let truth: Vec<f64> = test.iter().map(|s| s.me.hp as f64).collect();
    let constant = regression_metrics(&vec![mean; truth.len()], &truth).unwrap();
    let hp = table.get("self_hp").unwrap();
    assert!(hp.mae < constant.mae, "probe {} vs constant {}", hp.mae, constant.mae);
}

#[test]
fn probe_training_is_deterministic_and_frozen_stage_keeps_the_encoder() {
    let mut cfg = common::tiny_config();
    let (schema, params) = random_state_params(EncoderVariant::ClspRffm, &cfg).unwrap();
    let encoder = StateEncoder::new(EncoderVariant::ClspRffm, &schema, cfg.model.state).unwrap();
    let connector = Connector::new(cfg.model.connector);
    let states = sample_states(300, 17, &GeneratorConfig::default());
    let (train, test) = states.split_at(256);
    let run = |c: &clsp_core::connector::ProbeConfig| {
        train_probe(&encoder, &connector, &schema, &params, train, Some(test), c).unwrap()
    };
    let a = run(&cfg.probe);
    let b = run(&cfg.probe);
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    assert_eq!(a.stage1, b.stage1);
    assert_eq!(a.log.iter().map(|r| r.stage).collect::<Vec<_>>(), [1, 2]);

    cfg.probe.unfrozen_epochs = 0;
    let frozen = run(&cfg.probe);
    for (name, t) in params.iter() {
        assert_eq!(frozen.params.get(name).unwrap(), t, "{name} moved while frozen");
    }
    assert!(frozen.params.get("connector.shared.w").is_some());
    let moved = params.iter().any(|(name, t)| a.params.get(name).unwrap() != t);
    assert!(moved, "stage 2 left the encoder untouched");

    cfg.probe.batch_size = 1000;
    assert!(train_probe(&encoder, &connector, &schema, &params, train, None, &cfg.probe).is_err());
}

#[test]
fn probe_csv_layout() {
    let states = sample_states(50, 2, &GeneratorConfig::default());
    let readings: Vec<ProbeReading> = states.iter().map(|s| decode_probe(&probe_targets(s))).collect();
    let table = probe_table(&readings, &states).unwrap();
    let mut buf = Vec::new();
    write_probe_csv(&mut buf, &[("rffm".to_string(), table.clone()), ("random".to_string(), table)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,item,medae,mae,rmse");
    assert_eq!(lines.len(), 1 + 16);
    assert!(lines[1].starts_with("rffm,self_hp,"));
    assert!(lines[9].starts_with("random,self_hp,"));
}
