use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DistillSchedule, KdBuildSpec, TimestepSampler, EXPERT_BOUNDARY};
use crate::error::{Error, Result};
use crate::sandwich::{BudgetProfile, HighMixer, ModelConfig, SearchSchedule};
use crate::streaming::{ChunkPlan, LatencyInputs};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// One run: shared settings plus a section per subcommand. Every manifest
/// embeds the fully resolved config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Precision,
    pub out: PathBuf,
    /// Hardened layout JSON.
    pub layout: Option<PathBuf>,
    /// Device profile TOML with `[budget]` and `[latency]` tables.
    pub profile: Option<PathBuf>,
    /// Checkpoint directory.
    pub weights: Option<PathBuf>,
    /// Distillation cache file.
    pub cache: Option<PathBuf>,
    /// Model used when no layout file is given.
    pub model: Option<ModelConfig>,
    pub search: SearchSection,
    pub bench: BenchSection,
    pub stream: StreamSection,
    pub kd: KdSection,
    pub distill: DistillSection,
    pub grad_check: GradCheckSection,
    pub attn_dump: AttnDumpSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: Precision::F64,
            out: PathBuf::from("out"),
            layout: None,
            profile: None,
            weights: None,
            cache: None,
            model: None,
            search: SearchSection::default(),
            bench: BenchSection::default(),
            stream: StreamSection::default(),
            kd: KdSection::default(),
            distill: DistillSection::default(),
            grad_check: GradCheckSection::default(),
            attn_dump: AttnDumpSection::default(),
        }
    }
}

/// Config error naming the offending key: the key on the line the parser
/// stopped at, or the field serde reports.
fn toml_error(what: &str, text: &str, e: toml::de::Error) -> Error {
    let key = e.span().and_then(|span| {
        let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
        let line = text[start..].lines().next()?;
        let (key, _) = line.split_once('=')?;
        Some(key.trim().to_string())
    });
    match key {
        Some(k) if !k.is_empty() && !k.starts_with('[') => Error::config(format!("{what}.{k}"), e.message().to_string()),
        _ => Error::config(what, e.message().to_string()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error("config", text, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SearchSection {
    pub schedule: SearchSchedule,
    /// Mask the teacher runs; all LCHA (self-distillation) when unset.
    pub teacher_mask: Option<Vec<u8>>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub repeats: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { repeats: 5, frames: 3, height: 8, width: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub frames_per_chunk: usize,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub chunks: usize,
    /// KV window in chunks; unset keeps every chunk.
    pub window: Option<usize>,
    /// Also run the offline causal forward and report the deviation.
    pub oracle: bool,
}

impl Default for StreamSection {
    fn default() -> Self {
        let p = ChunkPlan::default();
        Self { frames_per_chunk: p.frames_per_chunk, steps: p.steps, height: p.height, width: p.width, chunks: p.chunks, window: Some(2), oracle: false }
    }
}

impl StreamSection {
    pub fn plan(&self) -> ChunkPlan {
        ChunkPlan { frames_per_chunk: self.frames_per_chunk, steps: self.steps, height: self.height, width: self.width, chunks: self.chunks }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdSection {
    pub records: usize,
    pub sampler: TimestepSampler,
    pub two_expert: bool,
    pub boundary: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub teacher: ModelConfig,
    /// All LCHA when unset.
    pub teacher_mask: Option<Vec<u8>>,
}

impl Default for KdSection {
    fn default() -> Self {
        let spec = KdBuildSpec::default();
        Self {
            records: spec.records,
            sampler: spec.sampler,
            two_expert: spec.two_expert,
            boundary: EXPERT_BOUNDARY,
            frames: 2,
            height: 4,
            width: 4,
            teacher: toy_teacher_config(),
            teacher_mask: None,
        }
    }
}

impl KdSection {
    pub fn spec(&self) -> KdBuildSpec {
        KdBuildSpec { records: self.records, sampler: self.sampler.clone(), two_expert: self.two_expert, boundary: self.boundary }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub schedule: DistillSchedule,
    /// Latent grid of the cached tuples.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let kd = KdSection::default();
        Self { schedule: DistillSchedule::default(), frames: kd.frames, height: kd.height, width: kd.width }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub tol: f64,
    /// Negative control: corrupt the VJP of every case whose name starts with this.
    pub corrupt: Option<String>,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self { tol: 1e-4, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnDumpSection {
    /// S2TN latent `[tokens, in_channels]`; random when unset.
    pub input: Option<PathBuf>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Block of the first group to dump.
    pub block: usize,
    /// Largest sequence length whose `L x L` maps may be materialized.
    pub max_tokens: usize,
}

impl Default for AttnDumpSection {
    fn default() -> Self {
        Self { input: None, frames: 2, height: 4, width: 4, block: 0, max_tokens: 4096 }
    }
}

/// Device description shared by the allocator and the latency projection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub budget: Option<BudgetProfile>,
    pub latency: Option<LatencyInputs>,
}

impl DeviceProfile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| toml_error("profile", text, e))?;
        if let Some(b) = &p.budget {
            b.validate()?;
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Component latencies of the reference phone deployment.
pub fn reference_latency() -> LatencyInputs {
    LatencyInputs { text_encoder_ms: 4.0, dit_step_ms: 260.0, decoder_ms: 80.0, steps: 4, frames_per_chunk: 12 }
}

/// Student-sized sandwich used when no model is configured.
pub fn toy_config() -> ModelConfig {
    let mut cfg = ModelConfig { in_channels: 2, dim: 8, mlp_hidden: 16, groups: 3, group_size: 1, ..ModelConfig::default() };
    cfg.lcha.head_dim = 4;
    cfg.ssa.attn.head_dim = 8;
    cfg
}

/// Same shape as [`toy_config`] with full attention in the high groups.
pub fn toy_teacher_config() -> ModelConfig {
    ModelConfig { high_mixer: HighMixer::Full, ..toy_config() }
}

/// `1, 0, ..., 0, 1`
pub fn default_mask(groups: usize) -> Vec<u8> {
    (0..groups).map(|i| u8::from(i == 0 || i + 1 == groups)).collect()
}
