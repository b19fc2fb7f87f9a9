//! Static configuration: the shape contract of the hierarchy, training
//! hyperparameters, and data sources, with validation and TOML loading.

use std::fmt;
use std::ops::Deref;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Byte vocabulary: 256 byte values plus one pad token.
pub const VOCAB_SIZE: usize = 257;
/// Id of the pad token (0-indexed; byte values occupy 0-255).
pub const PAD_ID: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Transformer,
    SelectiveSsm,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageKind::Transformer => write!(f, "transformer"),
            StageKind::SelectiveSsm => write!(f, "selective_ssm"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedding {
    None,
    LearnedAbsolute,
    Rotary,
}

/// One stage of the hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub patch_size: usize,
    pub width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Number of sequential chunks the packed patch batch is split into;
    /// chunks beyond the first stage trade compute for memory.
    #[serde(default = "default_chunk_count")]
    pub chunk_count: usize,
    /// Defaults per kind: rotary for transformers, none for SSMs.
    #[serde(default)]
    pub pos_embedding: Option<PosEmbedding>,
    #[serde(default)]
    pub dropout: f64,
    /// Attention heads (transformer stages only).
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// SSM state width per channel (selective_ssm stages only).
    #[serde(default = "default_state_width")]
    pub state_width: usize,
}

fn default_layers() -> usize {
    1
}
fn default_chunk_count() -> usize {
    1
}
fn default_heads() -> usize {
    2
}
fn default_state_width() -> usize {
    8
}

impl StageConfig {
    /// Stage defaults: rotary positions for transformers, none for SSMs
    /// (SSMs perform best without positional information).
    pub fn effective_pos(&self) -> PosEmbedding {
        self.pos_embedding.unwrap_or(match self.kind {
            StageKind::Transformer => PosEmbedding::Rotary,
            StageKind::SelectiveSsm => PosEmbedding::None,
        })
    }

    pub fn transformer(patch_size: usize, width: usize, layers: usize) -> Self {
        Self {
            kind: StageKind::Transformer,
            patch_size,
            width,
            layers,
            chunk_count: 1,
            pos_embedding: None,
            dropout: 0.0,
            heads: default_heads(),
            state_width: default_state_width(),
        }
    }

    pub fn selective_ssm(patch_size: usize, width: usize, layers: usize) -> Self {
        Self { kind: StageKind::SelectiveSsm, ..Self::transformer(patch_size, width, layers) }
    }
}

/// The static shape contract of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_pad")]
    pub pad_id: u32,
    /// Allow the first stage's patch count to grow beyond `patch_size`
    /// when inputs exceed the configured maximum context.
    #[serde(default)]
    pub allow_p1_extension: bool,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_pad() -> u32 {
    PAD_ID
}

impl HierarchyConfig {
    pub fn new(stages: Vec<StageConfig>) -> Self {
        Self { stages, vocab_size: VOCAB_SIZE, pad_id: PAD_ID, allow_p1_extension: false }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }
}

/// A configuration that passed [`validate`]; immutable by construction and
/// safe to share across threads by value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedConfig {
    inner: HierarchyConfig,
}

impl Deref for ValidatedConfig {
    type Target = HierarchyConfig;
    fn deref(&self) -> &HierarchyConfig {
        &self.inner
    }
}

/// Check every structural invariant; returns the immutable config or the
/// full list of violations, each naming the failing invariant and stage.
pub fn validate(config: HierarchyConfig) -> Result<ValidatedConfig, ConfigError> {
    let mut violations = Vec::new();
    if config.stages.is_empty() {
        violations.push("hierarchy must have at least one stage".to_string());
    }
    if config.vocab_size != VOCAB_SIZE {
        violations.push(format!(
            "vocab_size must be {VOCAB_SIZE} (256 byte values + pad), got {}",
            config.vocab_size
        ));
    }
    if config.pad_id != PAD_ID {
        violations.push(format!("pad_id must be {PAD_ID}, got {}", config.pad_id));
    }
    for (idx, stage) in config.stages.iter().enumerate() {
        let stage_no = idx + 1;
        if stage.patch_size < 1 {
            violations.push(format!("patch_size must be ≥ 1 at stage {stage_no}"));
        }
        if stage.width < 1 {
            violations.push(format!("width must be ≥ 1 at stage {stage_no}"));
        }
        if stage.layers < 1 {
            violations.push(format!("layers must be ≥ 1 at stage {stage_no}"));
        }
        if stage.chunk_count < 1 {
            violations.push(format!("chunk_count must be ≥ 1 at stage {stage_no}"));
        }
        if idx == 0 && stage.chunk_count != 1 {
            violations
                .push("chunk_count must be 1 at stage 1 (the first stage is never chunked)".to_string());
        }
        if !(0.0..1.0).contains(&stage.dropout) {
            violations.push(format!("dropout must be in [0, 1) at stage {stage_no}"));
        }
        match stage.kind {
            StageKind::Transformer => {
                if stage.heads < 1 || stage.width % stage.heads != 0 {
                    violations.push(format!(
                        "width {} must be divisible by heads {} at stage {stage_no}",
                        stage.width, stage.heads
                    ));
                }
                if stage.heads >= 1
                    && stage.width % stage.heads == 0
                    && (stage.width / stage.heads) % 2 != 0
                    && stage.effective_pos() == PosEmbedding::Rotary
                {
                    violations
                        .push(format!("rotary positions need an even head width at stage {stage_no}"));
                }
            }
            StageKind::SelectiveSsm => {
                if stage.state_width < 1 {
                    violations.push(format!("state_width must be ≥ 1 at stage {stage_no}"));
                }
                if stage.effective_pos() == PosEmbedding::Rotary {
                    violations.push(format!(
                        "rotary positions apply inside attention and cannot be used by a selective_ssm stage (stage {stage_no})"
                    ));
                }
            }
        }
    }
    if config.allow_p1_extension {
        if let Some(first) = config.stages.first() {
            if first.effective_pos() == PosEmbedding::LearnedAbsolute {
                violations.push(
                    "allow_p1_extension requires stage 1 to use no absolute positional embedding"
                        .to_string(),
                );
            }
        }
    }
    if violations.is_empty() {
        Ok(ValidatedConfig { inner: config })
    } else {
        Err(ConfigError::new(violations))
    }
}

impl ValidatedConfig {
    pub fn into_inner(self) -> HierarchyConfig {
        self.inner
    }

    /// Maximum context: the product of all patch sizes.
    pub fn l_max(&self) -> usize {
        self.stages.iter().map(|s| s.patch_size).product()
    }

    /// Product of the patch sizes of stages 2..=N (1 for a 1-stage model).
    pub fn inner_len(&self) -> usize {
        self.stages.iter().skip(1).map(|s| s.patch_size).product()
    }

    /// Packed batch sizes `K_i = B * prod_{j<i} P_j` for a given batch.
    pub fn k_sizes(&self, batch: usize) -> Vec<usize> {
        let mut ks = Vec::with_capacity(self.stages.len());
        let mut acc = batch;
        for stage in &self.stages {
            ks.push(acc);
            acc *= stage.patch_size;
        }
        ks
    }

    /// Padded sequence length and effective first-stage patch count for an
    /// input of `len` bytes. Lengths within `l_max` pad up to full capacity;
    /// beyond it the first stage extends if allowed.
    pub fn padded_len(&self, len: usize) -> Result<(usize, usize), ConfigError> {
        let inner = self.inner_len();
        let p1 = self.stages[0].patch_size;
        if len <= self.l_max() {
            return Ok((self.l_max(), p1));
        }
        if !self.allow_p1_extension {
            return Err(ConfigError::new(vec![format!(
                "input of {len} bytes exceeds maximum context {} and allow_p1_extension is off",
                self.l_max()
            )]));
        }
        let p1_eff = len.div_ceil(inner);
        Ok((p1_eff * inner, p1_eff))
    }

    /// Embedding width: all stages embed bytes at the local stage's width.
    pub fn embed_width(&self) -> usize {
        self.stages.last().expect("validated: N >= 1").width
    }

    /// Exact scalar parameter count of the model this config instantiates.
    pub fn param_count(&self) -> usize {
        let n = self.stages.len();
        let d_n = self.embed_width();
        let mut total = 0usize;
        for (idx, stage) in self.stages.iter().enumerate() {
            let d = stage.width;
            total += self.vocab_size * d_n; // per-stage byte embedding
            if stage.effective_pos() == PosEmbedding::LearnedAbsolute {
                total += stage.patch_size * d_n;
            }
            if idx < n - 1 {
                let flat: usize =
                    self.stages[idx + 1..].iter().map(|s| s.patch_size).product::<usize>() * d_n;
                total += flat * d; // patch projection
                total += d * self.stages[idx + 1].width; // global projection
            }
            total += d; // trainable start token
            total += match stage.kind {
                StageKind::Transformer => stage.layers * (8 * d * d + 2 * d) + d,
                StageKind::SelectiveSsm => {
                    let ns = stage.state_width;
                    stage.layers * (2 * d * d + 3 * d * ns + 3 * d) + d
                }
            };
        }
        total += d_n * self.vocab_size + self.vocab_size; // logits head + bias
        total
    }
}

/// Optimizer, schedule, and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    pub total_steps: u64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_grad_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "default_one")]
    pub accumulation: usize,
    #[serde(default = "default_one")]
    pub micro_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Steps between validation evaluations during fit (0 = only at the end).
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Validation windows per evaluation.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
}

fn default_peak_lr() -> f64 {
    1e-3
}
fn default_warmup_fraction() -> f64 {
    0.10
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}
fn default_eval_interval() -> u64 {
    200
}
fn default_eval_windows() -> usize {
    16
}

impl TrainConfig {
    pub fn with_steps(total_steps: u64) -> Self {
        Self {
            peak_lr: default_peak_lr(),
            warmup_fraction: default_warmup_fraction(),
            total_steps,
            betas: default_betas(),
            grad_clip_norm: default_grad_clip(),
            accumulation: 1,
            micro_batch: 1,
            seed: 0,
            weight_decay: 0.0,
            eval_interval: default_eval_interval(),
            eval_windows: default_eval_windows(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut violations = Vec::new();
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            violations.push("warmup_fraction must be in (0, 1)".to_string());
        }
        if self.grad_clip_norm <= 0.0 {
            violations.push("grad_clip_norm must be > 0".to_string());
        }
        if self.accumulation < 1 || self.micro_batch < 1 {
            violations.push("accumulation and micro_batch must be ≥ 1".to_string());
        }
        if self.peak_lr <= 0.0 {
            violations.push("peak_lr must be > 0".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::new(violations))
        }
    }

    /// Samples contributing to one optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation
    }
}

/// Deterministic synthetic text corpus settings (bundled demo data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticText {
    pub bytes: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Where training and evaluation bytes come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory of raw files read as bytes and concatenated.
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    /// Generated text corpus (no external files needed).
    #[serde(default)]
    pub synthetic_text: Option<SyntheticText>,
    /// Serialized VQA sample shards (training split).
    #[serde(default)]
    pub vqa_shards: Option<PathBuf>,
    /// Serialized VQA sample shards (validation split).
    #[serde(default)]
    pub vqa_val_shards: Option<PathBuf>,
    /// Tail fraction of a byte corpus held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.05
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sources = [
            self.corpus_dir.is_some(),
            self.synthetic_text.is_some(),
            self.vqa_shards.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        let mut violations = Vec::new();
        if sources != 1 {
            violations.push(format!(
                "exactly one data source required (corpus_dir, synthetic_text, or vqa_shards), found {sources}"
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            violations.push("val_fraction must be in [0, 1)".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::new(violations))
        }
    }
}

/// A full run configuration file: `[model]`, `[train]`, `[data]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: HierarchyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(vec![format!("config parse: {e}")]))
    }

    /// Parse with dotted-key overrides (`model.stages.0.patch_size=8`)
    /// applied to the document before deserialization, so every override
    /// type-checks against the schema before any work starts.
    pub fn from_toml_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut doc: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::new(vec![format!("config parse: {e}")]))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        doc.try_into()
            .map_err(|e| ConfigError::new(vec![format!("config after overrides: {e}")]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hex digest of the canonical serialized config.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(self) -> Result<(ValidatedConfig, TrainConfig, DataConfig), ConfigError> {
        self.train.validate()?;
        self.data.validate()?;
        let model = validate(self.model)?;
        Ok((model, self.train, self.data))
    }
}

fn apply_override(doc: &mut toml::Value, key: &str, value: &str) -> Result<(), ConfigError> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .or_else(|| {
            // Bare words are strings.
            toml::from_str::<toml::Table>(&format!("v = \"{value}\"")).ok().and_then(|t| t.get("v").cloned())
        })
        .ok_or_else(|| ConfigError::new(vec![format!("override {key}: unparseable value {value:?}")]))?;
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Ok(index) = part.parse::<usize>() {
            let arr = cursor.as_array_mut().ok_or_else(|| {
                ConfigError::new(vec![format!("override {key}: {part} indexes a non-array")])
            })?;
            if index >= arr.len() {
                return Err(ConfigError::new(vec![format!(
                    "override {key}: index {index} out of range"
                )]));
            }
            if last {
                arr[index] = parsed;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            let table = cursor.as_table_mut().ok_or_else(|| {
                ConfigError::new(vec![format!("override {key}: {part} is not a table")])
            })?;
            if last {
                table.insert(part.to_string(), parsed);
                return Ok(());
            }
            cursor = table.get_mut(*part).ok_or_else(|| {
                ConfigError::new(vec![format!("override {key}: unknown key {part}")])
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patches: &[usize]) -> HierarchyConfig {
        HierarchyConfig::new(patches.iter().map(|&p| StageConfig::transformer(p, 8, 1)).collect())
    }

    #[test]
    fn l_max_is_product_of_patch_sizes() {
        assert_eq!(validate(cfg(&[5, 3, 2])).unwrap().l_max(), 30);
        assert_eq!(validate(cfg(&[8192, 16, 8])).unwrap().l_max(), 1_048_576);
    }

    #[test]
    fn zero_patch_size_is_rejected_naming_the_stage() {
        let err = validate(cfg(&[5, 0, 2])).unwrap_err();
        assert!(err.violations.iter().any(|v| v == "patch_size must be ≥ 1 at stage 2"), "{err}");
    }

    #[test]
    fn validate_is_idempotent() {
        let v1 = validate(cfg(&[4, 2])).unwrap();
        let v2 = validate(v1.clone().into_inner()).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn k_sizes_follow_the_packing_formula() {
        let v = validate(cfg(&[5, 3, 2])).unwrap();
        assert_eq!(v.k_sizes(2), vec![2, 10, 30]);
    }

    #[test]
    fn padded_len_pads_to_capacity_and_extends_when_allowed() {
        let v = validate(cfg(&[5, 3, 2])).unwrap();
        assert_eq!(v.padded_len(27).unwrap(), (30, 5));
        assert!(v.padded_len(36).is_err());
        let mut c = cfg(&[5, 3, 2]);
        c.allow_p1_extension = true;
        let v = validate(c).unwrap();
        assert_eq!(v.padded_len(36).unwrap(), (36, 6));
    }

    #[test]
    fn extension_requires_non_absolute_positions_at_stage_1() {
        let mut c = cfg(&[4, 2]);
        c.allow_p1_extension = true;
        c.stages[0].pos_embedding = Some(PosEmbedding::LearnedAbsolute);
        assert!(validate(c).is_err());
    }

    #[test]
    fn first_stage_chunking_is_rejected() {
        let mut c = cfg(&[4, 2]);
        c.stages[0].chunk_count = 2;
        let err = validate(c).unwrap_err();
        assert!(err.violations[0].contains("stage 1"));
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let text = r#"
[model]
allow_p1_extension = false

[[model.stages]]
kind = "transformer"
patch_size = 4
width = 8
layers = 2

[[model.stages]]
kind = "selective_ssm"
patch_size = 2
width = 8

[train]
total_steps = 100

[data]
synthetic_text = { bytes = 1000, seed = 1 }
"#;
        let rc = RunConfig::from_toml(text).unwrap();
        assert_eq!(rc.model.stages.len(), 2);
        assert_eq!(rc.model.vocab_size, VOCAB_SIZE);
        assert_eq!(rc.train.betas, (0.9, 0.95));
        assert!((rc.train.warmup_fraction - 0.10).abs() < 1e-12);

        let over = RunConfig::from_toml_with_overrides(
            text,
            &[
                ("train.total_steps".into(), "1".into()),
                ("model.stages.0.patch_size".into(), "8".into()),
            ],
        )
        .unwrap();
        assert_eq!(over.train.total_steps, 1);
        assert_eq!(over.model.stages[0].patch_size, 8);

        let bad = RunConfig::from_toml_with_overrides(text, &[("train.nope.x".into(), "1".into())]);
        assert!(bad.is_err());
        let bad_type =
            RunConfig::from_toml_with_overrides(text, &[("train.total_steps".into(), "\"a\"".into())]);
        assert!(bad_type.is_err());
    }

    #[test]
    fn ssm_defaults_to_no_positions_and_rejects_rotary() {
        let s = StageConfig::selective_ssm(4, 8, 1);
        assert_eq!(s.effective_pos(), PosEmbedding::None);
        let mut c = cfg(&[4]);
        c.stages[0] = StageConfig::selective_ssm(4, 8, 1);
        c.stages[0].pos_embedding = Some(PosEmbedding::Rotary);
        assert!(validate(c).is_err());
    }
}
