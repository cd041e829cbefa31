mod common;

use mivuln_core::dataset::AcronymSample;
use mivuln_core::metrics::{
    argmax_letter, attribute, attribute_values, diff_direction, head_attribution, letter_direction, letter_logit_diff,
    logit_diff, projected_value, AttributionTable, Component, LetterSet, LETTERS,
};
use mivuln_core::model::{ModelConfig, ModelParams, Readout};
use mivuln_core::Error;
use ndarray::Array1;
use proptest::prelude::*;

#[test]
fn letter_set_is_single_character_tokens() {
    let tok = common::tokenizer();
    let letters = LetterSet::new(&tok).unwrap();
    for (c, &id) in LETTERS.iter().zip(letters.token_ids()) {
        assert_eq!(tok.token_str(id), Some(c.to_string().as_str()));
    }
    assert_eq!(letters.token('A'), Some(32));
    assert_eq!(letters.token('a'), None);
}

#[test]
fn attributions_sum_to_the_projected_logit() {
    let tok = common::tokenizer();
    let model = common::tiny_model();
    let letters = LetterSet::new(&tok).unwrap();
    let s = AcronymSample::new(["Slam", "Quick", "Amp"], &tok).unwrap();
    let (logits, cache) = model.forward(&s.token_ids).unwrap();
    let pos = s.final_position();

    let dir = letter_direction(&model, &letters, 'A');
    let table = attribute(&model, &cache, dir.view(), pos, "A").unwrap();
    let logit_a = f64::from(logits[[pos, letters.token('A').unwrap() as usize]]);
    assert!((table.total() - logit_a).abs() < 1e-3 * logit_a.abs().max(1.0));
    assert!((projected_value(&model, &cache, dir.view(), pos) - logit_a).abs() < 1e-4 * logit_a.abs().max(1.0));

    let diff = diff_direction(&model, &letters, 'A', 'Q');
    let table = attribute(&model, &cache, diff.view(), pos, "A-Q").unwrap();
    let expect = logit_a - f64::from(logits[[pos, letters.token('Q').unwrap() as usize]]);
    assert!((table.total() - expect).abs() < 1e-3 * expect.abs().max(1.0));
    // embed + heads + mlps + bias
    assert_eq!(table.rows.len(), 1 + 2 * 3 + 1);
}

#[test]
fn head_attribution_agrees_with_table_row() {
    let tok = common::tokenizer();
    let model = common::tiny_model();
    let letters = LetterSet::new(&tok).unwrap();
    let s = AcronymSample::new(["Slam", "Quick", "Amp"], &tok).unwrap();
    let (_, cache) = model.forward(&s.token_ids).unwrap();
    let dir = diff_direction(&model, &letters, 'A', 'Q');
    let table = attribute(&model, &cache, dir.view(), 7, "A-Q").unwrap();
    let v = head_attribution(&model, &cache, 1, 0, dir.view(), 7).unwrap();
    assert_eq!(table.value(Component::Head { layer: 1, head: 0 }), Some(v));
}

#[test]
fn missing_layers_are_reported() {
    let model = common::tiny_model();
    let (_, mut cache) = model.forward(&[50256, 464, 30382]).unwrap();
    cache.layers.pop();
    let dir = Array1::zeros(16);
    assert!(matches!(
        attribute_values(&model, &cache, dir.view(), 2),
        Err(Error::IncompleteCache(_))
    ));
    let (_, cache) = model.forward(&[50256, 464, 30382]).unwrap();
    assert!(matches!(
        attribute_values(&model, &cache, dir.view(), 3),
        Err(Error::IncompleteCache(_))
    ));
}

#[test]
fn aggregate_rejects_mismatched_components() {
    let a = vec![(Component::Embed, 1.0)];
    let b = vec![(Component::Bias, 1.0)];
    assert!(AttributionTable::aggregate("x", &[a.clone(), b]).is_err());
    assert!(AttributionTable::aggregate("x", &[]).is_err());
    let t = AttributionTable::aggregate("x", &[a.clone(), vec![(Component::Embed, 3.0)]]).unwrap();
    assert_eq!(t.rows[0].mean, 2.0);
    assert!((t.rows[0].std - 2f64.sqrt()).abs() < 1e-12);
}

fn letter_logits() -> impl Strategy<Value = [f64; 26]> {
    prop::array::uniform26(-50.0f64..50.0)
}

proptest! {
    #[test]
    fn logit_diff_is_shift_invariant(l in letter_logits(), shift in -100.0f64..100.0, i in 0usize..26) {
        let shifted = l.map(|x| x + shift);
        let c = LETTERS[i];
        prop_assert!((letter_logit_diff(&l, c) - letter_logit_diff(&shifted, c)).abs() < 1e-9);
    }

    #[test]
    fn logit_diff_positive_iff_unique_argmax(l in letter_logits(), i in 0usize..26) {
        let c = LETTERS[i];
        let d = letter_logit_diff(&l, c);
        if d > 0.0 {
            prop_assert_eq!(argmax_letter(&l), c);
        } else {
            prop_assert!(l.iter().enumerate().any(|(j, &v)| j != i && v >= l[i]));
        }
    }

    #[test]
    fn attribution_is_complete_on_random_models(seed in 0u64..1000, pos in 0usize..5) {
        let cfg = ModelConfig { n_layers: 3, n_heads: 2, d_model: 8, vocab_size: 40, context_len: 8, layer_norm_eps: 1e-5 };
        let model: ModelParams<f64> = ModelParams::random(cfg, seed, 0.5);
        let ids = [1u32, 5, 39, 0, 12];
        let (logits, cache) = model.forward(&ids).unwrap();
        let letters = LetterSet::from_token_ids(std::array::from_fn(|i| i as u32));
        let full = logits.row(pos);
        let dir = letter_direction(&model, &letters, 'C') - letter_direction(&model, &letters, 'H');
        let total: f64 = attribute_values(&model, &cache, dir.view(), pos).unwrap().iter().map(|v| v.1).sum();
        let expect = full[2] - full[7];
        prop_assert!((total - expect).abs() < 1e-9 * expect.abs().max(1.0));
        let _ = logit_diff(full, 'C', &letters);
        let last = model.readout(&cache.resid_final, Readout::All);
        prop_assert_eq!(last.row(pos), full);
    }
}
