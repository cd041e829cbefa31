//! One line per acceptance criterion. Criteria 1-5 need GPT-2 Small weights
//! (`MIVULN_GPT2_WEIGHTS` or `assets/gpt2/model.safetensors`) and report
//! NOT RUN without them. `MIVULN_ADV_COUNT` sets the adversarial set size
//! for criteria 3-5 (default 300; 1000 for the full check).

mod common;

use std::collections::HashSet;
use std::process::ExitCode;

use mivuln_core::adversarial::{brute_force_substitutions, AdvSample, GenConfig, Generator};
use mivuln_core::analysis::{adversarial_attribution, delta_p, head_letter_projection};
use mivuln_core::dataset::{build_dataset, AcronymSample, CandidateVocab};
use mivuln_core::metrics::{
    argmax_letter, attribute_values, letter_direction, letter_logit_diff, projected_value, LetterSet,
};
use mivuln_core::model::{
    LinearLogitLoss, ModelConfig, ModelParams, PatchSpec, PatchTarget, Positions, Readout, Real,
};
use mivuln_core::patching::{patch_sweep, rank_components, PositionsPolicy};
use mivuln_core::tokenizer::Tokenizer;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ACCURACY_MIN: f64 = 0.60;
const TOP_K_CELLS: usize = 5;
const DELTA_P_A_MIN: f64 = 2.0;
const COMPLETENESS_TOL: f64 = 1e-3;
const GRADIENT_TOL: f64 = 1e-3;
const SELF_PATCH_TOL: f64 = 1e-6;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

struct Ctx {
    tok: Tokenizer,
    vocab: CandidateVocab,
    letters: LetterSet,
    gpt2: Option<ModelParams<f32>>,
}

fn letter_logits<T: Real>(model: &ModelParams<T>, ids: &[u32], letters: &LetterSet) -> [f64; 26] {
    let (row, _) = model.forward_readout(ids, Readout::LastTokens(letters.token_ids())).unwrap();
    std::array::from_fn(|i| row[[0, i]].f64())
}

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn no_weights() -> Outcome {
    Outcome::NotRun("GPT-2 Small weights unavailable".into())
}

fn clean_competence(ctx: &Ctx) -> Outcome {
    let Some(model) = &ctx.gpt2 else { return no_weights() };
    let data = build_dataset(&ctx.vocab, 500, 0, &ctx.tok).unwrap();
    let (mut sum, mut correct) = (0.0, 0);
    for s in &data {
        let l = letter_logits(model, &s.token_ids, &ctx.letters);
        sum += letter_logit_diff(&l, s.target_letter);
        correct += usize::from(argmax_letter(&l) == s.target_letter);
    }
    let mean = sum / data.len() as f64;
    let acc = correct as f64 / data.len() as f64;
    check(
        mean > 0.0 && acc >= ACCURACY_MIN,
        format!("n=500 mean logit_diff={mean:.3} (>0) accuracy={acc:.3} (>={ACCURACY_MIN})"),
    )
}

fn circuit_localization(ctx: &Ctx) -> Outcome {
    let Some(model) = &ctx.gpt2 else { return no_weights() };
    let data = build_dataset(&ctx.vocab, 100, 0, &ctx.tok).unwrap();
    let grid = patch_sweep(model, &data, &ctx.vocab, 0, PositionsPolicy::Last, &ctx.letters, &ctx.tok).unwrap();
    let top: Vec<(usize, usize)> = rank_components(&grid, TOP_K_CELLS).iter().map(|h| (h.layer, h.head)).collect();
    let want = [(10, 10), (8, 11), (9, 9)];
    check(
        want.iter().all(|h| top.contains(h)),
        format!("top-{TOP_K_CELLS} of 144 = {top:?}, need {want:?}"),
    )
}

fn adversarial_set(ctx: &Ctx) -> Option<Vec<AdvSample>> {
    let model = ctx.gpt2.as_ref()?;
    let count = std::env::var("MIVULN_ADV_COUNT").ok().and_then(|v| v.parse().ok()).unwrap_or(300);
    let config = GenConfig {
        target_count: count,
        ..GenConfig::default()
    };
    let set = Generator::new(model, &ctx.vocab, &ctx.tok, config).unwrap().generate_batch().unwrap();
    Some(set.samples)
}

fn distribution_shift(ctx: &Ctx, adv: Option<&[AdvSample]>) -> Outcome {
    let Some(adv) = adv else { return no_weights() };
    let t = delta_p(adv, &ctx.vocab).unwrap();
    let ranked = t.ranked();
    let top2: HashSet<char> = ranked.iter().take(2).map(|r| r.letter).collect();
    let dp = |c| t.get(c).map_or(f64::NAN, |r| r.delta_p);
    check(
        top2 == HashSet::from(['A', 'S']) && dp('A') > dp('S') && dp('A') >= DELTA_P_A_MIN,
        format!(
            "n={} top letters {:?} dp(A)={:.2} dp(S)={:.2} (need A,S top-2, A>S, A>={DELTA_P_A_MIN})",
            adv.len(),
            ranked.iter().take(3).map(|r| r.letter).collect::<String>(),
            dp('A'),
            dp('S')
        ),
    )
}

fn vulnerability_localization(ctx: &Ctx, adv: Option<&[AdvSample]>) -> Outcome {
    let (Some(model), Some(adv)) = (&ctx.gpt2, adv) else { return no_weights() };
    let mut detail = Vec::new();
    let mut pass = true;
    for letter in ['A', 'S'] {
        match adversarial_attribution(model, adv, Some(letter), &ctx.letters) {
            Ok(t) => {
                let worst = t.heads_ascending()[0].0;
                pass &= worst == (10, 10);
                detail.push(format!("{letter}: most negative head {worst:?} (n={})", t.n_samples));
            }
            Err(_) => {
                pass = false;
                detail.push(format!("{letter}: no samples"));
            }
        }
    }
    check(pass, detail.join("; "))
}

fn vulnerability_mechanism(ctx: &Ctx, adv: Option<&[AdvSample]>) -> Outcome {
    let (Some(model), Some(adv)) = (&ctx.gpt2, adv) else { return no_weights() };
    let mut detail = Vec::new();
    let mut pass = true;
    for letter in ['A', 'S'] {
        match head_letter_projection(model, adv, (10, 10), Some(letter), &ctx.letters) {
            Ok(p) => {
                let top = p.top_other(letter);
                pass &= top == 'Q';
                detail.push(format!("{letter}: head 10.10 top incorrect letter {top}"));
            }
            Err(_) => {
                pass = false;
                detail.push(format!("{letter}: no samples"));
            }
        }
    }
    check(pass, detail.join("; "))
}

fn completeness_on<T: Real>(model: &ModelParams<T>, data: &[AcronymSample], letters: &LetterSet) -> f64 {
    let mut worst = 0.0f64;
    for s in data {
        let (_, cache) = model.forward_readout(&s.token_ids, Readout::None).unwrap();
        let dir = letter_direction(model, letters, s.target_letter);
        let pos = s.final_position();
        let total: f64 = attribute_values(model, &cache, dir.view(), pos).unwrap().iter().map(|v| v.1).sum();
        let proj = projected_value(model, &cache, dir.view(), pos);
        worst = worst.max((total - proj).abs() / proj.abs());
    }
    worst
}

fn attribution_completeness(ctx: &Ctx) -> Outcome {
    let data = build_dataset(&ctx.vocab, 100, 6, &ctx.tok).unwrap();
    let (name, worst) = match &ctx.gpt2 {
        Some(m) => ("GPT-2 Small", completeness_on(m, &data, &ctx.letters)),
        None => ("tiny fixture GPT-2", completeness_on(&common::tiny_model(), &data, &ctx.letters)),
    };
    check(
        worst < COMPLETENESS_TOL,
        format!("{name}, 100 prompts: max rel error {worst:.2e} (<{COMPLETENESS_TOL:e})"),
    )
}

fn gradient_correctness() -> Outcome {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: 40,
        context_len: 8,
        layer_norm_eps: 1e-5,
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let model: ModelParams<f64> = ModelParams::random(config, 100 + trial, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let ids: Vec<u32> = (0..6).map(|_| rng.random_range(0..40)).collect();
        let loss = LinearLogitLoss {
            tokens: (0..26).collect(),
            coefficients: Array1::from_shape_fn(26, |_| rng.random_range(-1.0..1.0)),
        };
        let emb = model.embed_tokens(&ids).unwrap();
        let g = model.grad_wrt_embeddings(emb.view(), &loss).unwrap();
        let f = |e: &ndarray::Array2<f64>| -> f64 {
            let (l, _) = model.forward_embeddings(e.view(), Readout::LastTokens(&loss.tokens)).unwrap();
            l.row(0).dot(&loss.coefficients)
        };
        let (mut max_err, mut max_fd) = (0.0f64, 0.0f64);
        for i in 0..emb.nrows() {
            for k in 0..emb.ncols() {
                let mut plus = emb.clone();
                plus[[i, k]] += h;
                let mut minus = emb.clone();
                minus[[i, k]] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                max_fd = max_fd.max(fd.abs());
                max_err = max_err.max((fd - g.grad[[i, k]]).abs());
            }
        }
        worst = worst.max(max_err / max_fd);
    }
    check(
        worst < GRADIENT_TOL,
        format!("20 random 2-layer/2-head models: max rel error {worst:.2e} (<{GRADIENT_TOL:e})"),
    )
}

fn self_patch_max<T: Real>(model: &ModelParams<T>, data: &[AcronymSample]) -> f64 {
    let cfg = &model.config;
    let mut targets = Vec::new();
    for layer in 0..cfg.n_layers {
        targets.extend((0..cfg.n_heads).map(|head| PatchTarget::Head { layer, head }));
        targets.push(PatchTarget::Mlp { layer });
        targets.push(PatchTarget::AttnLayer { layer });
    }
    let mut worst = 0.0f64;
    for s in data {
        let (logits, cache) = model.forward(&s.token_ids).unwrap();
        for &target in &targets {
            let spec = PatchSpec {
                target,
                positions: Positions::All,
                donor: &cache,
            };
            let patched = model.forward_with_patch(&s.token_ids, &spec).unwrap();
            for (a, b) in patched.iter().zip(logits.iter()) {
                worst = worst.max((a.f64() - b.f64()).abs());
            }
        }
    }
    worst
}

fn oracle_consistency<T: Real>(model: &ModelParams<T>, ctx: &Ctx, config: GenConfig) -> (usize, usize) {
    let step = ctx.vocab.len() / 200;
    let small = CandidateVocab::from_words(ctx.vocab.words().iter().step_by(step).take(200).cloned().collect());
    let generator = Generator::new(model, &small, &ctx.tok, config).unwrap();
    let (mut returned, mut confirmed) = (0, 0);
    for s in build_dataset(&small, 30, 8, &ctx.tok).unwrap() {
        if let Some(adv) = generator.generate(&s).unwrap() {
            returned += 1;
            let oracle = brute_force_substitutions(model, &s, &small, &ctx.tok).unwrap();
            confirmed += usize::from(oracle.contains(&adv.adv_word));
        }
    }
    (returned, confirmed)
}

fn patch_and_oracle(ctx: &Ctx) -> Outcome {
    let data = build_dataset(&ctx.vocab, 10, 7, &ctx.tok).unwrap();
    let tiny = common::tiny_model();
    let (name, patch_err, (returned, confirmed)) = match &ctx.gpt2 {
        Some(m) => (
            "GPT-2 Small",
            self_patch_max(m, &data[..3]),
            oracle_consistency(m, ctx, GenConfig::default()),
        ),
        None => {
            let config = GenConfig {
                num_steps: 20,
                learning_rate: 5.0,
                require_clean_correct: false,
                ..GenConfig::default()
            };
            ("tiny fixture GPT-2", self_patch_max(&tiny, &data), oracle_consistency(&tiny, ctx, config))
        }
    };
    check(
        patch_err < SELF_PATCH_TOL && returned > 0 && confirmed == returned,
        format!(
            "{name}: self-patch max |diff| {patch_err:.1e} (<{SELF_PATCH_TOL:e}); 200-word oracle confirmed {confirmed}/{returned}"
        ),
    )
}

fn tokenizer_fidelity(ctx: &Ctx) -> Outcome {
    let ids = ctx.tok.encode("The Slam Quick Amp (SQ").unwrap().ids;
    let pieces: Vec<String> = ids.iter().map(|&i| ctx.tok.decode(&[i]).unwrap()).collect();
    let expected = ["The", " Slam", " Quick", " Amp", " (", "S", "Q"];
    let segmentation = pieces == expected;
    let data = build_dataset(&ctx.vocab, 1000, 0, &ctx.tok).unwrap();
    let mismatches = data
        .iter()
        .filter(|s| {
            ctx.tok.encode(&s.prompt).unwrap().ids != s.token_ids[1..]
                || ctx.tok.decode(&s.token_ids[1..]).unwrap() != s.prompt
        })
        .count();
    check(
        segmentation && mismatches == 0,
        format!(
            "segmentation |{}| ; round-trip mismatches {mismatches}/1000",
            pieces.join("|")
        ),
    )
}

fn main() -> ExitCode {
    let tok = common::tokenizer();
    let vocab = CandidateVocab::build(common::nouns_path(), &tok).unwrap();
    let letters = LetterSet::new(&tok).unwrap();
    let ctx = Ctx {
        gpt2: common::gpt2_small(),
        tok,
        vocab,
        letters,
    };
    let adv = adversarial_set(&ctx);
    let results = [
        ("clean-task competence", clean_competence(&ctx)),
        ("circuit localization", circuit_localization(&ctx)),
        ("adversarial distribution shift", distribution_shift(&ctx, adv.as_deref())),
        ("vulnerability localization", vulnerability_localization(&ctx, adv.as_deref())),
        ("vulnerability mechanism", vulnerability_mechanism(&ctx, adv.as_deref())),
        ("attribution completeness", attribution_completeness(&ctx)),
        ("gradient correctness", gradient_correctness()),
        ("patch no-op and oracle consistency", patch_and_oracle(&ctx)),
        ("tokenizer fidelity", tokenizer_fidelity(&ctx)),
    ];
    let mut failed = false;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed = true;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {}: {tag} [{name}] {detail}", i + 1);
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
