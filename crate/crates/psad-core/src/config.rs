//! Run configuration: a nested TOML file merged with CLI overrides, then
//! validated as a whole (every violated constraint is reported at once).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of sessions the synthetic generator produces.
    pub sessions: usize,
    /// History length cap N; longer histories are truncated from the front.
    pub history_len: usize,
    /// Candidate set size M.
    pub candidates: usize,
    pub item_sparse_fields: usize,
    pub item_vocab: Vec<usize>,
    pub item_dense: usize,
    pub user_sparse_fields: usize,
    pub user_vocab: Vec<usize>,
    pub user_dense: usize,
    /// Target click rate for synthetic labels.
    pub label_rate: f64,
    /// Distinct users in the synthetic pool.
    pub users: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sessions: 1000,
            history_len: 50,
            candidates: 20,
            item_sparse_fields: 2,
            item_vocab: vec![50, 30],
            item_dense: 2,
            user_sparse_fields: 2,
            user_vocab: vec![10, 4],
            user_dense: 2,
            label_rate: 0.3,
            users: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width per sparse feature field.
    pub embed_dim: usize,
    /// Model width d after the input projection.
    pub d: usize,
    /// Encoder (and decoder) layer count L.
    pub layers: usize,
    /// Reranked list length T.
    pub target_len: usize,
    /// Semi-autoregressive block size K.
    pub block_size: usize,
    /// Number of positions re-predicted by contextual enhancement (gamma).
    pub refine_masks: usize,
    /// Beam width B for generator inference.
    pub beam_width: usize,
    /// Hidden width of the two gate MLPs; 0 means "use d".
    pub gate_hidden: usize,
    /// Hidden width of the position-bias MLP.
    pub pos_hidden: usize,
    /// Relative-offset clipping radius R; 0 means "history_len + candidates - 1".
    pub clip_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            d: 64,
            layers: 1,
            target_len: 10,
            block_size: 4,
            refine_masks: 1,
            beam_width: 4,
            gate_hidden: 0,
            pos_hidden: 8,
            clip_radius: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    /// Teacher and student train jointly from scratch.
    Online,
    /// Teacher trains first, then is frozen while the student distills.
    Offline,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Distillation weight alpha.
    pub alpha: f64,
    /// Distillation temperature tau.
    pub tau: f64,
    /// Detach teacher targets so distillation only updates the student.
    pub teacher_detach: bool,
    pub mode: DistillMode,
    /// Generator-only epochs before the offline student phase; 0 means "epochs".
    pub teacher_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 5,
            alpha: 0.5,
            tau: 1.0,
            teacher_detach: true,
            mode: DistillMode::Online,
            teacher_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Metric cutoffs (NDCG@K / MAP@K).
    pub ks: Vec<usize>,
    /// Worker threads for evaluation; 1 keeps it sequential.
    pub workers: usize,
    /// Also report metrics segmented by user activity (history length).
    pub segment_by_activity: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            workers: 1,
            segment_by_activity: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub warmup_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![64, 128, 256],
            warmup_steps: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Generate all positions in one block (K := T).
    pub disable_sa: bool,
    /// Skip contextual enhancement (gamma := 0).
    pub disable_ce: bool,
    /// Skip personalized gating (X̂ ≡ X).
    pub disable_pg: bool,
    /// Skip personalized position encoding (P̂ ≡ P).
    pub disable_ppe: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Parse a TOML config file, apply `key.path=value` overrides, resolve
    /// ablation aliases and validate every constraint.
    pub fn parse_and_validate(path: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {path}"), e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("parse error: {e}")))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validated()
    }

    /// Apply ablation aliases (disable-sa → K=T, disable-ce → gamma=0) and
    /// defaulted widths, then check all invariants.
    pub fn validated(mut self) -> Result<RunConfig> {
        if self.ablation.disable_sa {
            self.model.block_size = self.model.target_len;
        }
        if self.ablation.disable_ce {
            self.model.refine_masks = 0;
        }
        if self.model.gate_hidden == 0 {
            self.model.gate_hidden = self.model.d;
        }
        if self.model.clip_radius == 0 {
            self.model.clip_radius = (self.data.history_len + self.data.candidates).max(2) - 1;
        }
        if self.train.teacher_epochs == 0 {
            self.train.teacher_epochs = self.train.epochs;
        }

        let mut violations = Vec::new();
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        if !(1 <= m.block_size && m.block_size <= m.target_len && m.target_len <= d.candidates) {
            violations.push(format!(
                "1 <= K <= T <= M violated: K={}, T={}, M={}",
                m.block_size, m.target_len, d.candidates
            ));
        }
        if m.refine_masks >= m.target_len {
            violations.push(format!(
                "0 <= gamma < T violated: gamma={}, T={}",
                m.refine_masks, m.target_len
            ));
        }
        if t.tau <= 0.0 {
            violations.push(format!("tau > 0 violated: tau={}", t.tau));
        }
        if t.alpha < 0.0 {
            violations.push(format!("alpha >= 0 violated: alpha={}", t.alpha));
        }
        if m.d == 0 {
            violations.push("model width d must be >= 1".into());
        }
        if m.layers == 0 {
            violations.push("layer count L must be >= 1".into());
        }
        if m.embed_dim == 0 {
            violations.push("embed_dim must be >= 1".into());
        }
        if m.beam_width == 0 {
            violations.push("beam width B must be >= 1".into());
        }
        if d.item_vocab.len() != d.item_sparse_fields {
            violations.push(format!(
                "item_vocab has {} entries but item_sparse_fields={}",
                d.item_vocab.len(),
                d.item_sparse_fields
            ));
        }
        if d.user_vocab.len() != d.user_sparse_fields {
            violations.push(format!(
                "user_vocab has {} entries but user_sparse_fields={}",
                d.user_vocab.len(),
                d.user_sparse_fields
            ));
        }
        if d.item_vocab.iter().any(|&v| v == 0) || d.user_vocab.iter().any(|&v| v == 0) {
            violations.push("vocabulary sizes must be >= 1".into());
        }
        if d.history_len == 0 {
            violations.push("history_len must be >= 1".into());
        }
        if d.candidates == 0 {
            violations.push("candidates must be >= 1".into());
        }
        if !(0.0 < d.label_rate && d.label_rate < 1.0) {
            violations.push(format!("label_rate must be in (0,1): {}", d.label_rate));
        }
        if d.users == 0 {
            violations.push("users must be >= 1".into());
        }
        if t.batch_size == 0 {
            violations.push("batch_size must be >= 1".into());
        }
        if t.learning_rate <= 0.0 {
            violations.push(format!("learning_rate must be > 0: {}", t.learning_rate));
        }
        if self.eval.ks.is_empty() {
            violations.push("eval.ks must not be empty".into());
        }
        for &k in &self.eval.ks {
            if k == 0 || k > m.target_len {
                violations.push(format!("eval cutoff K={k} must satisfy 1 <= K <= T={}", m.target_len));
            }
        }
        if self.eval.workers == 0 {
            violations.push("eval.workers must be >= 1".into());
        }
        if self.bench.batch_sizes.is_empty() || self.bench.batch_sizes.iter().any(|&b| b == 0) {
            violations.push("bench.batch_sizes must be non-empty positive".into());
        }

        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::ConfigViolations { violations })
        }
    }

    /// Item feature width before the input projection: 16k + |dense| style.
    pub fn item_feature_width(&self) -> usize {
        self.model.embed_dim * self.data.item_sparse_fields + self.data.item_dense
    }

    /// User profile width d_u.
    pub fn user_feature_width(&self) -> usize {
        self.model.embed_dim * self.data.user_sparse_fields + self.data.user_dense
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Set a dotted-path key inside a TOML document. The raw value is parsed as
/// TOML when possible, falling back to a plain string.
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut current = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = current
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        current = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}
