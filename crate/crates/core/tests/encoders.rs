mod common;

use clsp_autodiff::{ParamStore, Tape, Tensor};
use clsp_core::encoders::{EncoderVariant, StateDims, StateEncoder, TextDims, TextEncoder};
use clsp_core::rng::chacha;
use clsp_core::schema::{ScalarEncoding, StateSchema};
use clsp_core::state::{generate_pairs, sample_states, GeneratorConfig};
use clsp_core::text::Vocabulary;

#[test]
fn every_network_passes_gradient_check() {
    let checks = common::nets::network_checks();
    assert_eq!(checks.len(), 2 * (EncoderVariant::ALL.len() + 4));
    for c in checks {
        assert!(c.passes(), "{} {:?}: {} at {}", c.name, c.precision, c.max_rel_error, c.worst);
    }
}

#[test]
fn rffm_with_identity_front_end_matches_rff_trunk() {
    let schema = StateSchema::new(ScalarEncoding::Rff, 9, 1.0).unwrap();
    let rffm = StateEncoder::new(EncoderVariant::ClspRffm, &schema, StateDims::default()).unwrap();
    let rff = StateEncoder::new(EncoderVariant::ClspRff, &schema, StateDims::default()).unwrap();
    let mut params = rffm.init_params(&mut chacha(61));
    rffm.set_identity_front_end(&mut params);
    let shared: ParamStore<f32> = {
        let mut p = ParamStore::new();
        for (name, t) in params.iter() {
            if !name.starts_with("state.front.") {
                p.insert(name, t.clone());
            }
        }
        p
    };
    let states = sample_states(64, 62, &GeneratorConfig::default());
    let x = Tensor::new(vec![64, schema.width()], schema.flatten_batch(&states)).unwrap();
    let trunk = |enc: &StateEncoder, p: &ParamStore<f32>| {
        let mut tape = Tape::<f32>::new();
        let bound = p.bind_with(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let h = enc.trunk(&mut tape, &bound, xv).unwrap();
        tape.value(h).data().to_vec()
    };
    let a = trunk(&rffm, &params);
    let b = trunk(&rff, &shared);
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    assert!(worst < 1e-5, "max deviation {worst}");
}

fn linear_count(i: usize, o: usize) -> usize {
    i * o + o
}

#[test]
fn parameter_counts_are_stable_and_match_architecture() {
    for variant in EncoderVariant::ALL {
        let schema = StateSchema::new(variant.scalar_encoding(), 3, 1.0).unwrap();
        let enc = StateEncoder::new(variant, &schema, StateDims::default()).unwrap();
        let a = enc.init_params(&mut chacha(1)).num_scalars();
        let b = enc.init_params(&mut chacha(2)).num_scalars();
        assert_eq!(a, b);
        let mut expected = linear_count(schema.width(), 256) + 3 * 2 * linear_count(256, 256) + linear_count(256, 128);
        if variant.has_front_end() {
            for item in schema.items().iter().filter(|i| i.is_scalar()) {
                expected += linear_count(item.width, 32) + linear_count(32, item.width);
            }
        }
        assert_eq!(a, expected, "{variant}");
    }
}

#[test]
fn text_embedding_is_unit_norm_and_order_invariant() {
    let pairs = generate_pairs(20, 71, &GeneratorConfig::default());
    let vocab = Vocabulary::build(pairs.iter().map(|p| p.text.as_str())).unwrap();
    let enc = TextEncoder::new(vocab, TextDims::default());
    let params = enc.init_params(&mut chacha(72));
    for p in &pairs {
        let e = enc.encode_text(&params, &p.text).unwrap();
        assert_eq!(e.len(), 128);
        let norm = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    let mut ids = enc.features(&pairs[0].text).unwrap();
    let a = enc.encode_ids(&params, &[ids.clone()]).unwrap();
    ids.reverse();
    ids.rotate_left(7);
    let b = enc.encode_ids(&params, &[ids]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
    assert!(enc.encode_text(&params, " ").is_err());
}
