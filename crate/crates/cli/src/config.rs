//! Pipeline configuration: one TOML file, every field overridable from the
//! command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use docstruct_core::clear::calibration::DEFAULT_ALPHA;
use docstruct_core::corpus::{ChunkingParams, SampleMode, DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE, DEFAULT_SAMPLE_SIZE};
use docstruct_core::discovery::{
    DiscoveryConfig, DiscoveryMode, DEFAULT_CHUNKS_PER_QUESTION, DEFAULT_MAX_ITERATIONS, DEFAULT_PROBE_BREADTH,
};
use docstruct_core::gateway::{
    EndpointConfig, ProviderRole, ReplayMode, Role, DEFAULT_COMMITTEE_SIZE, DEFAULT_MAX_IN_FLIGHT, DEFAULT_REPAIR_RETRIES,
};
use docstruct_core::model::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingSection {
    pub size: usize,
    pub overlap: usize,
}

impl Default for ChunkingSection {
    fn default() -> Self {
        Self {
            size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverySection {
    pub mode: DiscoveryMode,
    pub max_iterations: usize,
    pub probe_breadth: usize,
    pub chunks_per_question: usize,
    pub sample_size: usize,
    pub sample_mode: SampleMode,
}

impl Default for DiscoverySection {
    fn default() -> Self {
        Self {
            mode: DiscoveryMode::Active,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            probe_breadth: DEFAULT_PROBE_BREADTH,
            chunks_per_question: DEFAULT_CHUNKS_PER_QUESTION,
            sample_size: DEFAULT_SAMPLE_SIZE,
            sample_mode: SampleMode::Biased,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub no_clear: bool,
    pub no_schema_discovery: bool,
    pub no_structured_reasoning: bool,
    /// Answer text from the result template instead of the reasoning role.
    pub no_llm_synthesis: bool,
    /// Also enforce constraints the schema role proposed.
    pub enforce_proposed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersSection {
    pub replay: Option<PathBuf>,
    pub replay_mode: ReplayMode,
    pub endpoints: BTreeMap<Role, EndpointConfig>,
    pub committee: Vec<EndpointConfig>,
    pub committee_size: usize,
    pub repair_retries: usize,
    pub max_in_flight: usize,
}

impl Default for ProvidersSection {
    fn default() -> Self {
        Self {
            replay: None,
            replay_mode: ReplayMode::Digest,
            endpoints: BTreeMap::new(),
            committee: Vec::new(),
            committee_size: DEFAULT_COMMITTEE_SIZE,
            repair_retries: DEFAULT_REPAIR_RETRIES,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl ProvidersSection {
    /// Configured committee endpoints, or `committee-1..n` labels when none
    /// are given (enough for replay).
    pub fn committee_roles(&self) -> Vec<ProviderRole> {
        if self.committee.is_empty() {
            (1..=self.committee_size)
                .map(|i| ProviderRole::member(format!("committee-{i}")))
                .collect()
        } else {
            self.committee
                .iter()
                .map(|e| ProviderRole {
                    role: Role::CommitteeMember,
                    endpoint: e.clone(),
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub calibration: Option<PathBuf>,
    pub alpha: f64,
    pub constraints: Option<PathBuf>,
    pub schema_file: Option<PathBuf>,
    pub chunking: ChunkingSection,
    pub discovery: DiscoverySection,
    pub ablation: AblationSection,
    pub providers: ProvidersSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out_dir: PathBuf::from("out"),
            calibration: None,
            alpha: DEFAULT_ALPHA,
            constraints: None,
            schema_file: None,
            chunking: ChunkingSection::default(),
            discovery: DiscoverySection::default(),
            ablation: AblationSection::default(),
            providers: ProvidersSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config does not parse: {e}")))
    }

    /// Reads a config file. Relative paths in it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.corpus);
        rebase(base, &mut self.calibration);
        rebase(base, &mut self.constraints);
        rebase(base, &mut self.schema_file);
        rebase(base, &mut self.providers.replay);
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn chunking_params(&self) -> ChunkingParams {
        ChunkingParams {
            size: self.chunking.size,
            overlap: self.chunking.overlap,
        }
    }

    pub fn discovery_config(&self) -> DiscoveryConfig {
        let d = &self.discovery;
        DiscoveryConfig {
            mode: d.mode,
            max_iterations: d.max_iterations,
            probe_breadth: d.probe_breadth,
            chunks_per_question: d.chunks_per_question,
            sample_size: d.sample_size,
            sample_mode: d.sample_mode,
        }
    }

    /// Checks values and flag combinations, without touching the disk.
    pub fn check(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.chunking.size == 0 || self.chunking.overlap >= self.chunking.size {
            return Err(ConfigError(format!(
                "chunk overlap {} must be smaller than chunk size {}",
                self.chunking.overlap, self.chunking.size
            )));
        }
        if self.ablation.no_schema_discovery && self.schema_file.is_none() {
            return Err(ConfigError("no_schema_discovery requires a schema file".into()));
        }
        if self.discovery.sample_size == 0 || self.discovery.chunks_per_question == 0 {
            return Err(ConfigError("sample_size and chunks_per_question must be at least 1".into()));
        }
        if self.providers.committee.is_empty() && self.providers.committee_size == 0 {
            return Err(ConfigError("the committee needs at least one member".into()));
        }
        Ok(())
    }

    /// [`PipelineConfig::check`] plus existence of every input path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.check()?;
        let Some(corpus) = &self.corpus else {
            return Err(ConfigError("no corpus path configured".into()));
        };
        let inputs = [
            ("corpus", Some(corpus)),
            ("calibration", self.calibration.as_ref()),
            ("constraints", self.constraints.as_ref()),
            ("schema file", self.schema_file.as_ref()),
            ("replay fixture", self.providers.replay.as_ref()),
        ];
        for (what, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError(format!("{what} {} does not exist", p.display())));
                }
            }
        }
        if self.providers.replay.is_none() && self.providers.endpoints.is_empty() {
            return Err(ConfigError("no provider configured: set providers.replay or providers.endpoints".into()));
        }
        Ok(())
    }

    /// Digest of the configuration minus the output directory, so runs into
    /// different directories share it.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_default_independently() {
        let cfg = PipelineConfig::from_toml(
            r#"
            corpus = "docs.jsonl"
            alpha = 0.2
            [discovery]
            mode = "passive"
            [providers]
            replay = "replay.jsonl"
            [providers.endpoints.schema]
            base_url = "http://localhost:8000/v1"
            model = "m"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.discovery.mode, DiscoveryMode::Passive);
        assert_eq!(cfg.discovery.max_iterations, DEFAULT_MAX_ITERATIONS);
        assert_eq!(cfg.chunking, ChunkingSection::default());
        assert_eq!(cfg.providers.endpoints[&Role::Schema].model, "m");
        assert_eq!(cfg.providers.committee_roles().len(), 3);
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("colour = 1").is_err());
    }

    #[test]
    fn no_schema_discovery_needs_a_schema() {
        let mut cfg = PipelineConfig::default();
        cfg.ablation.no_schema_discovery = true;
        assert_eq!(cfg.check().unwrap_err().0, "no_schema_discovery requires a schema file");
        cfg.schema_file = Some("schema.json".into());
        cfg.check().unwrap();
    }

    #[test]
    fn alpha_bounds() {
        for a in [0.0, 1.0, -0.1, f64::NAN] {
            let cfg = PipelineConfig {
                alpha: a,
                ..PipelineConfig::default()
            };
            assert!(cfg.check().is_err(), "{a}");
        }
    }

    #[test]
    fn digest_ignores_out_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            out_dir: "elsewhere".into(),
            ..PipelineConfig::default()
        };
        assert_eq!(a.digest(), b.digest());
        let c = PipelineConfig {
            alpha: 0.3,
            ..PipelineConfig::default()
        };
        assert_ne!(a.digest(), c.digest());
    }
}
