use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mivuln_core::adversarial::GenConfig;
use mivuln_core::patching::PositionsPolicy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub weights: PathBuf,
    /// JSON model shape; GPT-2 Small when absent.
    pub model_config: Option<PathBuf>,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub nouns: PathBuf,
    pub out: PathBuf,
    /// Adversarial set read by `analyze`; `<out>/adv_set.jsonl` when absent.
    pub adv_set: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            weights: "assets/gpt2/model.safetensors".into(),
            model_config: None,
            vocab: "assets/gpt2/vocab.json".into(),
            merges: "assets/gpt2/merges.txt".into(),
            nouns: "assets/nouns.txt".into(),
            out: "runs/default".into(),
            adv_set: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_samples: usize,
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_samples: usize,
    pub positions: PositionsPolicy,
    pub seed: Option<u64>,
    /// Heads listed in the ranking report.
    pub top_k: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            n_samples: 100,
            positions: PositionsPolicy::Last,
            seed: None,
            top_k: 10,
        }
    }
}

/// Generator settings; the mask is fixed to the third word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub num_steps: usize,
    pub learning_rate: f64,
    pub kappa: f64,
    pub batch_size: usize,
    pub target_count: usize,
    pub seed: Option<u64>,
    pub max_attempts: usize,
    pub require_clean_correct: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let d = GenConfig::default();
        Self {
            num_steps: d.num_steps,
            learning_rate: d.learning_rate,
            kappa: d.kappa,
            batch_size: d.batch_size,
            target_count: d.target_count,
            seed: None,
            max_attempts: d.max_attempts,
            require_clean_correct: d.require_clean_correct,
        }
    }
}

impl GenerationSection {
    pub fn to_gen_config(&self, global_seed: u64) -> GenConfig {
        GenConfig {
            num_steps: self.num_steps,
            learning_rate: self.learning_rate,
            kappa: self.kappa,
            mask: None,
            batch_size: self.batch_size,
            target_count: self.target_count,
            seed: self.seed.unwrap_or(global_seed),
            max_attempts: self.max_attempts,
            require_clean_correct: self.require_clean_correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub letters: Vec<char>,
    /// Head whose output is projected onto the letter directions.
    pub head: (usize, usize),
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            letters: vec!['A', 'S'],
            head: (10, 10),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub sweep: SweepSection,
    pub generation: GenerationSection,
    pub analysis: AnalysisSection,
}

/// Command-line overrides, applied after the file is read.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub n_samples: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub kappa: Option<f64>,
    pub target_count: Option<usize>,
    pub positions: Option<PositionsPolicy>,
    pub letters: Vec<char>,
}

impl RunConfig {
    /// Reads `path` (relative paths inside resolve against its directory),
    /// or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    /// `n_samples` applies to the sweep for `patch-sweep` and to the
    /// dataset otherwise.
    pub fn apply(&mut self, o: &Overrides, sweep_command: bool) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(n) = o.n_samples {
            if sweep_command {
                self.sweep.n_samples = n;
            } else {
                self.dataset.n_samples = n;
            }
        }
        if let Some(s) = o.steps {
            self.generation.num_steps = s;
        }
        if let Some(lr) = o.lr {
            self.generation.learning_rate = lr;
        }
        if let Some(k) = o.kappa {
            self.generation.kappa = k;
        }
        if let Some(t) = o.target_count {
            self.generation.target_count = t;
        }
        if let Some(p) = o.positions {
            self.sweep.positions = p;
        }
        if !o.letters.is_empty() {
            self.analysis.letters = o.letters.clone();
        }
    }

    /// Fills every unset stage seed from the global one.
    pub fn finalize(&mut self) -> Result<()> {
        self.dataset.seed.get_or_insert(self.seed);
        self.sweep.seed.get_or_insert(self.seed);
        self.generation.seed.get_or_insert(self.seed);
        if self.dataset.n_samples == 0 || self.sweep.n_samples == 0 {
            bail!("sample counts must be at least 1");
        }
        if let Some(c) = self.analysis.letters.iter().find(|c| !c.is_ascii_uppercase()) {
            bail!("analysis letter {c:?} is not a capital A-Z");
        }
        self.generation.to_gen_config(self.seed).validate()?;
        Ok(())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn sweep_seed(&self) -> u64 {
        self.sweep.seed.unwrap_or(self.seed)
    }

    pub fn adv_set_path(&self) -> PathBuf {
        self.paths
            .adv_set
            .clone()
            .unwrap_or_else(|| self.paths.out.join("adv_set.jsonl"))
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.weights);
        fix(&mut self.vocab);
        fix(&mut self.merges);
        fix(&mut self.nouns);
        fix(&mut self.out);
        if let Some(p) = &mut self.model_config {
            fix(p);
        }
        if let Some(p) = &mut self.adv_set {
            fix(p);
        }
    }
}
