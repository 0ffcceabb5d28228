use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{SENTENCE_DIM, WORD_DIM};
use crate::error::{Error, Result};
use crate::explain::ExplainerConfig;
use crate::gnn::GnnConfig;
use crate::model::ModelConfig;
use crate::text::{Blocks, TextEncoderConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Prebuilt graph JSON; takes precedence over triplets + lexicon.
    pub graph: Option<PathBuf>,
    pub word_embeddings: Option<PathBuf>,
    pub sentence_embeddings: Option<PathBuf>,
}

impl Paths {
    /// Prefixes every relative path with `dir`.
    pub fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.dataset,
            &mut self.triplets,
            &mut self.lexicon,
            &mut self.graph,
            &mut self.word_embeddings,
            &mut self.sentence_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// Every knob of a run. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Seed for the dataset split; defaults to `seed`.
    pub split_seed: Option<u64>,
    pub class_count: usize,
    pub beta: f64,
    pub heads: usize,
    pub gat_heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub max_tokens: usize,
    pub max_sentences: usize,
    pub pad_to_max: bool,
    pub cosine_threshold: f64,
    pub top_k: Option<usize>,
    pub blocks: Vec<u8>,
    pub word_dim: usize,
    pub sentence_dim: usize,
    /// Seed of the synthetic embedding provider.
    pub embedding_seed: u64,
    pub explainer_epochs: usize,
    pub explainer_lr: f64,
    pub explainer_sparsity: f64,
    /// Accepted for compatibility; no loss term uses it.
    pub contrastive_temperature: Option<f64>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            split_seed: None,
            class_count: 4,
            beta: 3.0,
            heads: 8,
            gat_heads: 2,
            hidden: 128,
            dropout: 0.4,
            lr: 0.000278,
            epochs: 100,
            batch: 4,
            max_tokens: 64,
            max_sentences: 16,
            pad_to_max: false,
            cosine_threshold: 0.5,
            top_k: None,
            blocks: vec![1, 2, 3],
            word_dim: WORD_DIM,
            sentence_dim: SENTENCE_DIM,
            embedding_seed: 0,
            explainer_epochs: 100,
            explainer_lr: 0.01,
            explainer_sparsity: 0.01,
            contrastive_temperature: None,
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    /// `.json` is JSON; anything else is read as TOML.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        }
    }
}

fn known_keys() -> (BTreeSet<String>, BTreeSet<String>) {
    let top = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let paths = serde_json::to_value(Paths::default()).expect("paths serialize");
    let keys = |v: &serde_json::Value| v.as_object().expect("object").keys().cloned().collect();
    (keys(&top), keys(&paths))
}

impl RunConfig {
    /// Parses a config; unknown keys produce warnings (returned and logged) and are ignored.
    pub fn parse(text: &str, format: ConfigFormat) -> Result<(Self, Vec<String>)> {
        let value: serde_json::Value = match format {
            ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?,
            ConfigFormat::Toml => {
                let t: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("config TOML: {e}")))?;
                serde_json::to_value(t).map_err(|e| Error::Config(format!("config TOML: {e}")))?
            }
        };
        let mut value = value;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a table/object".into()))?;
        let (top, paths) = known_keys();
        let mut warnings = Vec::new();
        let unknown: Vec<String> = obj.keys().filter(|k| !top.contains(*k)).cloned().collect();
        for k in unknown {
            warnings.push(format!("unknown config key {k:?} ignored"));
            obj.remove(&k);
        }
        if let Some(p) = obj.get_mut("paths").and_then(|p| p.as_object_mut()) {
            let unknown: Vec<String> = p.keys().filter(|k| !paths.contains(*k)).cloned().collect();
            for k in unknown {
                warnings.push(format!("unknown config key \"paths.{k}\" ignored"));
                p.remove(&k);
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        warnings.extend(cfg.validate()?);
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((cfg, warnings))
    }

    /// Reads a config file. Relative paths inside it are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let (mut cfg, warnings) = Self::parse(&text, ConfigFormat::from_path(path))?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok((cfg, warnings))
    }

    /// Checks documented ranges; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(3..=4).contains(&self.class_count) {
            return bad(format!("class_count must be 3 or 4, got {}", self.class_count));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        for (name, v) in [
            ("heads", self.heads),
            ("gat_heads", self.gat_heads),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("max_tokens", self.max_tokens),
            ("max_sentences", self.max_sentences),
            ("word_dim", self.word_dim),
            ("sentence_dim", self.sentence_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.heads > self.word_dim || self.heads > self.sentence_dim {
            return bad(format!("{} heads exceed the embedding width", self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.explainer_lr > 0.0 && self.explainer_lr.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cosine_threshold) {
            return bad(format!("cosine_threshold must lie in [0, 1], got {}", self.cosine_threshold));
        }
        if self.explainer_sparsity < 0.0 {
            return bad("explainer_sparsity must be >= 0".into());
        }
        if self.top_k == Some(0) {
            return bad("top_k must be at least 1".into());
        }
        Blocks::from_numbers(&self.blocks)?;
        let mut warnings = Vec::new();
        if let Some(t) = self.contrastive_temperature {
            warnings.push(format!(
                "contrastive_temperature = {t} has no effect: the training objective has no contrastive term"
            ));
        }
        Ok(warnings)
    }

    pub fn blocks(&self) -> Result<Blocks> {
        Blocks::from_numbers(&self.blocks)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            text: TextEncoderConfig {
                word_dim: self.word_dim,
                sentence_dim: self.sentence_dim,
                hidden: self.hidden,
                heads: self.heads,
                max_tokens: self.max_tokens,
                max_sentences: self.max_sentences,
                pad_to_max: self.pad_to_max,
            },
            gnn: GnnConfig {
                in_dim: self.sentence_dim,
                hidden: self.hidden,
                gat_heads: self.gat_heads,
                leaky_slope: 0.2,
            },
            classes: self.class_count,
            beta: self.beta,
            head_hidden: self.hidden,
            dropout: self.dropout,
        }
    }

    pub fn explainer_config(&self) -> ExplainerConfig {
        ExplainerConfig {
            epochs: self.explainer_epochs,
            lr: self.explainer_lr,
            sparsity: self.explainer_sparsity,
            ..ExplainerConfig::default()
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Validation("a seed is required (pass --seed)".into()))
    }

    /// SHA-256 of the canonical JSON form, paths excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }
}
