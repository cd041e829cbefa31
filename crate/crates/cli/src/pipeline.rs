use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use mivuln_core::adversarial::{AdvSample, Generator};
use mivuln_core::analysis::{adversarial_attribution, delta_p, delta_p_vs_dataset, head_letter_projection};
use mivuln_core::dataset::{build_dataset, AcronymSample, CandidateVocab};
use mivuln_core::io::{read_jsonl, to_jsonl};
use mivuln_core::metrics::{argmax_letter, letter_logit_diff, LetterSet};
use mivuln_core::model::{ModelConfig, ModelParams, Readout};
use mivuln_core::patching::{patch_sweep, rank_components};
use mivuln_core::tokenizer::Tokenizer;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BuildDataset,
    Eval,
    PatchSweep,
    GenAdv,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::BuildDataset, Stage::Eval, Stage::PatchSweep, Stage::GenAdv, Stage::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildDataset => "build-dataset",
            Stage::Eval => "eval",
            Stage::PatchSweep => "patch-sweep",
            Stage::GenAdv => "gen-adv",
            Stage::Analyze => "analyze",
        }
    }

    fn needs_model(self) -> bool {
        self != Stage::BuildDataset
    }
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Debug, Serialize)]
struct Timing {
    stage: &'static str,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    config: &'a RunConfig,
    seeds: BTreeMap<&'static str, u64>,
    timings: Vec<Timing>,
    artifacts: Vec<Artifact>,
    partial: bool,
    notes: Vec<String>,
}

/// Loaded inputs shared by the stages of one invocation.
struct Inputs {
    tokenizer: Tokenizer,
    vocab: CandidateVocab,
    letters: LetterSet,
    model: Option<ModelParams<f32>>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    inputs: Inputs,
    artifacts: Vec<Artifact>,
    timings: Vec<Timing>,
    notes: Vec<String>,
    partial: bool,
    dataset: Option<Vec<AcronymSample>>,
    adv: Option<Vec<AdvSample>>,
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

/// Checks and loads every input the stages need, before anything is written.
fn load_inputs(cfg: &RunConfig, stages: &[Stage]) -> Result<Inputs> {
    let p = &cfg.paths;
    require_file("vocab.json", &p.vocab)?;
    require_file("merges.txt", &p.merges)?;
    require_file("noun list", &p.nouns)?;
    let needs_model = stages.iter().any(|s| s.needs_model());
    if needs_model {
        require_file("model weights", &p.weights)?;
        if let Some(mc) = &p.model_config {
            require_file("model config", mc)?;
        }
    }
    if stages.contains(&Stage::Analyze) && !stages.contains(&Stage::GenAdv) {
        require_file("adversarial set", &cfg.adv_set_path())?;
    }

    let tokenizer = Tokenizer::from_files(&p.vocab, &p.merges).context("loading tokenizer")?;
    let vocab = CandidateVocab::build(&p.nouns, &tokenizer).context("building candidate vocabulary")?;
    let letters = LetterSet::new(&tokenizer)?;
    let model = if needs_model {
        let config = match &p.model_config {
            Some(path) => ModelConfig::from_json_file(path)?,
            None => ModelConfig::gpt2_small(),
        };
        let model = ModelParams::load_with_config(&p.weights, config)
            .with_context(|| format!("loading weights {}", p.weights.display()))?;
        if stages.contains(&Stage::Analyze) {
            let (l, h) = cfg.analysis.head;
            if l >= model.config.n_layers || h >= model.config.n_heads {
                bail!("analysis head ({l},{h}) does not exist in this model");
            }
        }
        Some(model)
    } else {
        None
    };
    Ok(Inputs {
        tokenizer,
        vocab,
        letters,
        model,
    })
}

pub fn run(command: &str, stages: &[Stage], cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg, stages)?;
    std::fs::create_dir_all(&cfg.paths.out)
        .with_context(|| format!("creating output directory {}", cfg.paths.out.display()))?;
    let mut run = Run {
        cfg,
        inputs,
        artifacts: Vec::new(),
        timings: Vec::new(),
        notes: Vec::new(),
        partial: false,
        dataset: None,
        adv: None,
    };
    for &stage in stages {
        let start = Instant::now();
        log::info!("running {}", stage.name());
        match stage {
            Stage::BuildDataset => run.build_dataset()?,
            Stage::Eval => run.eval()?,
            Stage::PatchSweep => run.patch_sweep()?,
            Stage::GenAdv => run.gen_adv()?,
            Stage::Analyze => run.analyze()?,
        }
        run.timings.push(Timing {
            stage: stage.name(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    run.write_manifest(command)
}

impl Run<'_> {
    fn model(&self) -> &ModelParams<f32> {
        self.inputs.model.as_ref().expect("model loaded for this stage")
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.cfg.paths.out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(Artifact {
            path: name.to_owned(),
            sha256: hex::encode(Sha256::digest(contents.as_bytes())),
            bytes: contents.len(),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn dataset(&mut self) -> Result<&[AcronymSample]> {
        if self.dataset.is_none() {
            let d = build_dataset(
                &self.inputs.vocab,
                self.cfg.dataset.n_samples,
                self.cfg.dataset_seed(),
                &self.inputs.tokenizer,
            )?;
            self.dataset = Some(d);
        }
        Ok(self.dataset.as_deref().expect("just built"))
    }

    fn build_dataset(&mut self) -> Result<()> {
        let data = self.dataset()?.to_vec();
        let text = to_jsonl(&data)?;
        self.write("dataset.jsonl", &text)?;
        let counts = self.inputs.vocab.letter_counts();
        let summary = serde_json::json!({
            "n_samples": data.len(),
            "seed": self.cfg.dataset_seed(),
            "n_candidates": self.inputs.vocab.len(),
            "candidate_letter_counts": counts_by_letter(&counts),
        });
        self.write_json("dataset_summary.json", &summary)
    }

    fn eval(&mut self) -> Result<()> {
        let data = self.dataset()?.to_vec();
        let model = self.model();
        let ids = self.inputs.letters.token_ids();
        let rows: Vec<(char, f64)> = data
            .par_iter()
            .map(|s| {
                let (row, _) = model.forward_readout(&s.token_ids, Readout::LastTokens(ids))?;
                let l: [f64; 26] = std::array::from_fn(|i| f64::from(row[[0, i]]));
                Ok((argmax_letter(&l), letter_logit_diff(&l, s.target_letter)))
            })
            .collect::<Result<_>>()?;
        let mut csv = String::from("word1,word2,word3,target,predicted,logit_diff\n");
        for (s, (pred, ld)) in data.iter().zip(&rows) {
            let _ = writeln!(csv, "{},{},{},{},{pred},{ld}", s.words[0], s.words[1], s.words[2], s.target_letter);
        }
        let n = rows.len() as f64;
        let correct = data.iter().zip(&rows).filter(|(s, r)| r.0 == s.target_letter).count();
        let summary = serde_json::json!({
            "n_samples": rows.len(),
            "seed": self.cfg.dataset_seed(),
            "mean_logit_diff": rows.iter().map(|r| r.1).sum::<f64>() / n,
            "accuracy": correct as f64 / n,
        });
        self.write("eval.csv", &csv)?;
        self.write_json("eval.json", &summary)
    }

    fn patch_sweep(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let data = build_dataset(
            &self.inputs.vocab,
            cfg.sweep.n_samples,
            cfg.dataset_seed(),
            &self.inputs.tokenizer,
        )?;
        let grid = patch_sweep(
            self.model(),
            &data,
            &self.inputs.vocab,
            cfg.sweep_seed(),
            cfg.sweep.positions,
            &self.inputs.letters,
            &self.inputs.tokenizer,
        )?;
        let mut ranking = String::from("rank,layer,head,mean_delta\n");
        for (i, h) in rank_components(&grid, cfg.sweep.top_k).iter().enumerate() {
            let _ = writeln!(ranking, "{},{},{},{}", i + 1, h.layer, h.head, h.value);
        }
        self.write("patch_grid.csv", &grid.to_csv())?;
        self.write_json(
            "patch_grid.json",
            &serde_json::json!({ "seed": cfg.sweep_seed(), "grid": grid }),
        )?;
        self.write("head_ranking.csv", &ranking)
    }

    fn gen_adv(&mut self) -> Result<()> {
        let gen_config = self.cfg.generation.to_gen_config(self.cfg.seed);
        let set = Generator::new(self.model(), &self.inputs.vocab, &self.inputs.tokenizer, gen_config.clone())?
            .generate_batch()?;
        if set.stats.partial {
            self.partial = true;
            self.notes.push(format!(
                "gen-adv collected {} of {} samples before max_attempts",
                set.samples.len(),
                gen_config.target_count
            ));
        }
        self.write("adv_set.jsonl", &to_jsonl(&set.samples)?)?;
        self.write_json(
            "adv_stats.json",
            &serde_json::json!({
                "seed": gen_config.seed,
                "n_samples": set.samples.len(),
                "success_rate": set.stats.success_rate(),
                "stats": set.stats,
            }),
        )?;
        self.adv = Some(set.samples);
        Ok(())
    }

    fn analyze(&mut self) -> Result<()> {
        let adv = match self.adv.take() {
            Some(a) => a,
            None => {
                let path: PathBuf = self.cfg.adv_set_path();
                read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?
            }
        };
        if adv.is_empty() {
            bail!("adversarial set is empty");
        }
        let table = delta_p(&adv, &self.inputs.vocab)?;
        let vs_data = delta_p_vs_dataset(&adv, self.dataset()?)?;
        self.write("delta_p.csv", &table.to_csv())?;
        self.write("delta_p_dataset.csv", &vs_data.to_csv())?;

        let model = self.model();
        let letters = &self.inputs.letters;
        let all = adversarial_attribution(model, &adv, None, letters)?;
        let mut outputs = vec![("attribution_all.csv".to_owned(), all.to_csv())];
        let mut per_letter = BTreeMap::new();
        let head = self.cfg.analysis.head;
        let mut notes = Vec::new();
        for &letter in &self.cfg.analysis.letters {
            let Ok(table) = adversarial_attribution(model, &adv, Some(letter), letters) else {
                notes.push(format!("no adversarial samples with letter {letter}"));
                continue;
            };
            let proj = head_letter_projection(model, &adv, head, Some(letter), letters)?;
            let most_negative = table.heads_ascending().first().map(|h| h.0);
            per_letter.insert(
                letter.to_string(),
                serde_json::json!({
                    "n_samples": table.n_samples,
                    "most_negative_head": most_negative,
                    "head_top_incorrect_letter": proj.top_other(letter),
                }),
            );
            outputs.push((format!("attribution_{letter}.csv"), table.to_csv()));
            outputs.push((format!("head_{}_{}_letters_{letter}.csv", head.0, head.1), proj.to_csv()));
        }
        self.notes.extend(notes);
        for (name, text) in outputs {
            self.write(&name, &text)?;
        }
        let ranked: Vec<char> = table.ranked().iter().map(|r| r.letter).collect();
        self.write_json(
            "analysis.json",
            &serde_json::json!({
                "n_adversarial": adv.len(),
                "delta_p_ranking": ranked.iter().collect::<String>(),
                "head": head,
                "letters": per_letter,
            }),
        )?;
        self.adv = Some(adv);
        Ok(())
    }

    fn write_manifest(self, command: &str) -> Result<()> {
        let cfg = self.cfg;
        let mut seeds = BTreeMap::new();
        seeds.insert("global", cfg.seed);
        seeds.insert("dataset", cfg.dataset_seed());
        seeds.insert("sweep", cfg.sweep_seed());
        seeds.insert("generation", cfg.generation.seed.unwrap_or(cfg.seed));
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            seeds,
            timings: self.timings,
            artifacts: self.artifacts,
            partial: self.partial,
            notes: self.notes,
        };
        let path = cfg.paths.out.join(format!("manifest_{command}.json"));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn counts_by_letter(counts: &[usize; 26]) -> BTreeMap<String, usize> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (((b'A' + i as u8) as char).to_string(), c))
        .collect()
}
