mod common;

use std::sync::OnceLock;

use mivuln_core::dataset::{build_dataset, AcronymSample, CandidateVocab};
use mivuln_core::metrics::{logit_diff, LetterSet};
use mivuln_core::model::{ModelParams, PatchSpec, PatchTarget, Positions};
use mivuln_core::patching::{
    corrupt_dataset, pairs_of, patch_deltas, patch_sweep, rank_components, sweep_pairs, PatchPair, PositionsPolicy,
};
use mivuln_core::tokenizer::Tokenizer;
use mivuln_core::Error;

struct Fixture {
    tok: Tokenizer,
    vocab: CandidateVocab,
    letters: LetterSet,
    model: ModelParams<f32>,
    data: Vec<AcronymSample>,
}

fn fx() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tok = common::tokenizer();
        let vocab = CandidateVocab::build(common::nouns_path(), &tok).unwrap();
        let letters = LetterSet::new(&tok).unwrap();
        let data = build_dataset(&vocab, 12, 1, &tok).unwrap();
        Fixture {
            model: common::tiny_model(),
            tok,
            vocab,
            letters,
            data,
        }
    })
}

#[test]
fn self_donor_gives_zero_grid() {
    let f = fx();
    for policy in [PositionsPolicy::Last, PositionsPolicy::All] {
        let grid = sweep_pairs(&f.model, &pairs_of(&f.data, &f.data), &f.letters, policy).unwrap();
        assert_eq!(grid.values.len(), 2);
        assert!(grid.values.iter().flatten().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn sweep_covers_every_head_and_is_deterministic() {
    let f = fx();
    let a = patch_sweep(&f.model, &f.data, &f.vocab, 3, PositionsPolicy::Last, &f.letters, &f.tok).unwrap();
    let b = patch_sweep(&f.model, &f.data, &f.vocab, 3, PositionsPolicy::Last, &f.letters, &f.tok).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!((a.n_layers(), a.n_heads(), a.n_samples), (2, 2, 12));
    assert_eq!(a.to_csv().lines().count(), 1 + 4);
    assert!(a.values.iter().flatten().any(|v| *v != 0.0));
    assert_eq!(rank_components(&a, 200).len(), 4);
}

#[test]
fn cell_matches_full_patched_forward() {
    let f = fx();
    let donors = corrupt_dataset(&f.data, &f.vocab, 9, &f.tok).unwrap();
    let pairs = pairs_of(&f.data, &donors);
    let grid = sweep_pairs(&f.model, &pairs, &f.letters, PositionsPolicy::Last).unwrap();
    let mut sum = 0.0;
    for p in &pairs {
        let (clean_logits, _) = f.model.forward(&p.clean).unwrap();
        let (_, donor) = f.model.forward(&p.donor).unwrap();
        let spec = PatchSpec {
            target: PatchTarget::Head { layer: 1, head: 1 },
            positions: Positions::Only(vec![7]),
            donor: &donor,
        };
        let patched = f.model.forward_with_patch(&p.clean, &spec).unwrap();
        sum += logit_diff(patched.row(7), p.correct, &f.letters) - logit_diff(clean_logits.row(7), p.correct, &f.letters);
    }
    let mean = sum / pairs.len() as f64;
    assert!((grid.get(1, 1) - mean).abs() < 1e-5, "{} vs {mean}", grid.get(1, 1));
}

#[test]
fn corrupted_twins_keep_the_first_two_words() {
    let f = fx();
    let donors = corrupt_dataset(&f.data, &f.vocab, 4, &f.tok).unwrap();
    for (c, d) in f.data.iter().zip(&donors) {
        assert_eq!(c.words[..2], d.words[..2]);
        assert_ne!(c.words[2], d.words[2]);
        assert_eq!(c.token_ids.len(), d.token_ids.len());
    }
}

#[test]
fn length_mismatch_is_a_sweep_error() {
    let f = fx();
    let mut pairs = pairs_of(&f.data, &f.data);
    pairs[3].donor.pop();
    assert!(matches!(
        sweep_pairs(&f.model, &pairs, &f.letters, PositionsPolicy::Last),
        Err(Error::Sweep(_))
    ));
    let empty: Vec<PatchPair> = Vec::new();
    assert!(matches!(
        patch_deltas(&f.model, &empty, &[PatchTarget::Mlp { layer: 0 }], &f.letters, PositionsPolicy::All),
        Err(Error::Sweep(_))
    ));
}

#[test]
fn grid_json_round_trip() {
    let f = fx();
    let g = patch_sweep(&f.model, &f.data[..4], &f.vocab, 0, PositionsPolicy::All, &f.letters, &f.tok).unwrap();
    let back = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
    assert_eq!(g, back);
}
