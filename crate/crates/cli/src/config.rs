//! Pipeline configuration: one TOML file, `${VAR}` interpolation in string
//! values, command-line overrides on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use semrec::indexer::IndexMode;
use semrec::prompts::TaskKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub reviews: PathBuf,
    pub metadata: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kcore: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { kcore: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedProvider {
    Hashing,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub provider: EmbedProvider,
    pub dimension: usize,
    pub seed: u64,
    /// Precomputed vectors keyed by text, for the `table` provider.
    pub table: Option<PathBuf>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            provider: EmbedProvider::Hashing,
            dimension: semrec::embed::DEFAULT_DIMENSION,
            seed: 0,
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqvaeSection {
    pub codebook_size: usize,
    pub levels: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Train the attention matrix together with the autoencoder.
    pub joint: bool,
}

impl Default for RqvaeSection {
    fn default() -> Self {
        RqvaeSection {
            codebook_size: semrec::rqvae::DEFAULT_CODEBOOK_SIZE,
            levels: semrec::rqvae::DEFAULT_LEVELS,
            code_dim: semrec::rqvae::DEFAULT_CODE_DIM,
            hidden: semrec::rqvae::DEFAULT_HIDDEN,
            beta: semrec::rqvae::DEFAULT_BETA,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            kmeans_iters: 10,
            seed: 0,
            joint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub mode: IndexMode,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            mode: IndexMode::Pid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryProvider {
    Extractive,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    pub provider: SummaryProvider,
    pub terms: usize,
    pub endpoint: String,
    pub model: String,
    /// Usually `"${SOME_ENV_VAR}"`; never written to manifests.
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub cache: Option<PathBuf>,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        SummaryConfig {
            provider: SummaryProvider::Extractive,
            terms: semrec::prompts::DEFAULT_TERMS,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            token: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub total: usize,
    pub seed: u64,
    /// Uniform over the six tasks when absent.
    pub proportions: Option<BTreeMap<TaskKind, f64>>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            total: 600,
            seed: 0,
            proportions: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Cooc,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Overlap,
    Oracle,
    Adversarial,
    Random,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub retriever: RetrieverKind,
    pub candidates: Option<PathBuf>,
    pub scorer: ScorerKind,
    pub logits: Option<PathBuf>,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            retriever: RetrieverKind::Cooc,
            candidates: None,
            scorer: ScorerKind::Overlap,
            logits: None,
            top_k: semrec::rank::DEFAULT_TOP_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: semrec::eval::DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub rqvae: RqvaeSection,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub summary: SummaryConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Command-line values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<IndexMode>,
}

fn interpolate(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| format!("unterminated `${{` in {text:?}"))?;
        let name = &after[..end];
        let value =
            lookup(name).ok_or_else(|| format!("environment variable {name} is not set"))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(
    value: &mut toml::Value,
    path: &str,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<(), CliError> {
    match value {
        toml::Value::String(s) => {
            *s = interpolate(s, lookup).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
        }
        toml::Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                interpolate_value(v, &format!("{path}[{i}]"), lookup)?;
            }
        }
        toml::Value::Table(table) => {
            for (k, v) in table.iter_mut() {
                let child = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                interpolate_value(v, &child, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl PipelineConfig {
    /// Parse `text`; relative paths are taken relative to `base`.
    pub fn parse(
        text: &str,
        base: &Path,
        lookup: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let mut value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| CliError::Config(e.to_string()))?;
        interpolate_value(&mut value, "", lookup)?;
        let mut config: PipelineConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &|name| std::env::var(name).ok())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.reviews);
        fix(&mut self.paths.metadata);
        fix(&mut self.paths.workdir);
        for p in [
            &mut self.embed.table,
            &mut self.summary.cache,
            &mut self.rank.candidates,
            &mut self.rank.logits,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(w) = &overrides.workdir {
            self.paths.workdir = w.clone();
        }
        if let Some(seed) = overrides.seed {
            self.embed.seed = seed;
            self.rqvae.seed = seed;
            self.prompts.seed = seed;
            self.rank.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            self.index.mode = mode;
        }
    }

    /// Field-level range and presence checks.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if self.data.kcore == 0 {
            return bad("data.kcore", "must be at least 1");
        }
        if self.embed.dimension == 0 {
            return bad("embed.dimension", "must be positive");
        }
        if self.embed.provider == EmbedProvider::Table && self.embed.table.is_none() {
            return bad("embed.table", "required when embed.provider = \"table\"");
        }
        let r = &self.rqvae;
        if r.codebook_size == 0 || r.levels == 0 || r.code_dim == 0 || r.hidden == 0 {
            return bad(
                "rqvae",
                "codebook_size, levels, code_dim and hidden must be positive",
            );
        }
        if r.levels > semrec::indexer::MAX_LEVELS {
            return bad("rqvae.levels", "at most 26 levels can be rendered");
        }
        if !(r.beta >= 0.0 && r.beta.is_finite()) {
            return bad("rqvae.beta", "must be a non-negative number");
        }
        if !(r.lr > 0.0 && r.lr.is_finite()) {
            return bad("rqvae.lr", "must be positive");
        }
        if r.batch_size == 0 {
            return bad("rqvae.batch_size", "must be positive");
        }
        if self.summary.provider == SummaryProvider::Chat && self.summary.token.is_none() {
            return bad("summary.token", "required when summary.provider = \"chat\"");
        }
        if self.summary.terms == 0 {
            return bad("summary.terms", "must be positive");
        }
        if let Some(p) = &self.prompts.proportions {
            let sum: f64 = p.values().sum();
            if p.values().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return bad("prompts.proportions", "must be non-negative and sum to 1");
            }
        }
        if self.rank.top_k == 0 || self.rank.top_k > 26 * 27 {
            return bad("rank.top_k", "must be between 1 and 702");
        }
        if self.rank.retriever == RetrieverKind::File && self.rank.candidates.is_none() {
            return bad("rank.candidates", "required when rank.retriever = \"file\"");
        }
        if self.rank.scorer == ScorerKind::File && self.rank.logits.is_none() {
            return bad("rank.logits", "required when rank.scorer = \"file\"");
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks", "must be a non-empty list of positive cutoffs");
        }
        for (field, path) in [
            ("paths.reviews", Some(&self.paths.reviews)),
            ("paths.metadata", Some(&self.paths.metadata)),
        ]
        .into_iter()
        .chain([
            ("embed.table", self.embed.table.as_ref()),
            ("rank.candidates", self.rank.candidates.as_ref()),
            ("rank.logits", self.rank.logits.as_ref()),
        ]) {
            if let Some(p) = path {
                if !p.is_file() {
                    return bad(field, &format!("file {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (secrets excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seeds(&self) -> BTreeMap<&'static str, u64> {
        [
            ("embed", self.embed.seed),
            ("rqvae", self.rqvae.seed),
            ("prompts", self.prompts.seed),
            ("rank", self.rank.seed),
        ]
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(name: &str) -> Option<String> {
        (name == "TOKEN").then(|| "s3cret".to_string())
    }

    const MINIMAL: &str = r#"
[paths]
reviews = "data/r.jsonl"
metadata = "/abs/m.jsonl"
workdir = "runs"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = PipelineConfig::parse(MINIMAL, Path::new("/base"), &env).unwrap();
        assert_eq!(c.paths.reviews, PathBuf::from("/base/data/r.jsonl"));
        assert_eq!(c.paths.metadata, PathBuf::from("/abs/m.jsonl"));
        assert_eq!(c.rqvae.codebook_size, 256);
        assert_eq!(c.rqvae.levels, 4);
        assert_eq!(c.rqvae.code_dim, 32);
        assert_eq!(c.index.mode, IndexMode::Pid);
        assert_eq!(c.eval.ks, vec![5, 10]);
        assert_eq!(c.rank.top_k, 20);
    }

    #[test]
    fn env_interpolation() {
        let text =
            format!("{MINIMAL}\n[summary]\nprovider = \"chat\"\ntoken = \"Bearer ${{TOKEN}}\"\n");
        let c = PipelineConfig::parse(&text, Path::new("/b"), &env).unwrap();
        assert_eq!(c.summary.token.as_deref(), Some("Bearer s3cret"));
        assert!(!serde_json::to_string(&c).unwrap().contains("s3cret"));
        let missing = format!("{MINIMAL}\n[summary]\ntoken = \"${{NOPE}}\"\n");
        let err = PipelineConfig::parse(&missing, Path::new("/b"), &env).unwrap_err();
        assert!(err.to_string().contains("summary.token") && err.to_string().contains("NOPE"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{MINIMAL}\n[rqvae]\ncodebooks = 3\n");
        assert!(PipelineConfig::parse(&text, Path::new("/b"), &env).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.jsonl"), "").unwrap();
        std::fs::write(dir.path().join("m.jsonl"), "").unwrap();
        let text = "[paths]\nreviews = \"r.jsonl\"\nmetadata = \"m.jsonl\"\nworkdir = \"w\"\n";
        let mut c = PipelineConfig::parse(text, dir.path(), &env).unwrap();
        c.validate().unwrap();
        c.rqvae.lr = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("rqvae.lr"));
        c.rqvae.lr = 0.1;
        c.paths.reviews = dir.path().join("absent");
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("paths.reviews"));
    }

    #[test]
    fn overrides_and_hash() {
        let mut c = PipelineConfig::parse(MINIMAL, Path::new("/base"), &env).unwrap();
        let h = c.hash();
        assert_eq!(h, c.clone().hash());
        c.apply(&Overrides {
            seed: Some(7),
            mode: Some(IndexMode::Oid),
            workdir: None,
        });
        assert_ne!(h, c.hash());
        assert!(c.seeds().values().all(|&s| s == 7));
        assert_eq!(c.index.mode, IndexMode::Oid);
    }
}
