//! The run configuration: one TOML document covering data synthesis, both
//! training stages and ablation switches.

use std::path::{Path, PathBuf};

use olc_hdr::autoencoder::OlcTrainConfig;
use olc_hdr::codebook::CodebookMode;
use olc_hdr::datasets::SynthConfig;
use olc_hdr::hdrnet::{HdrTrainConfig, MergeMode};
use serde::{Deserialize, Serialize};

pub const RESOLVED_FILE: &str = "resolved-config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stage; overrides the per-stage `seed` fields when set.
    pub seed: Option<u64>,
    /// Root for checkpoints and resolved configs.
    pub out: Option<PathBuf>,
    /// Dataset directory used for training.
    pub data: Option<PathBuf>,
    pub synth: SynthSection,
    pub olc: OlcTrainConfig,
    pub hdr: HdrTrainConfig,
    pub ablation: Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scenes: usize,
    pub scene: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            scenes: 16,
            scene: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Row of the component ablation table (1 baseline … 7 full model).
    pub row: Option<u8>,
    pub vanilla_codebook: bool,
    pub disable_pa: bool,
    pub disable_fsm: bool,
    pub disable_rf: bool,
    pub disable_dvq: bool,
    pub merge: Option<MergeMode>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." {
                ConfigError(msg)
            } else {
                ConfigError(format!("{path}: {msg}"))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    /// Applies the seed override and ablation switches, then validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, ConfigError> {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.olc.seed = s;
            self.hdr.seed = s;
        }
        let ab = &self.ablation;
        if let Some(row) = ab.row {
            self.hdr.arch = self
                .hdr
                .arch
                .clone()
                .ablation(row)
                .map_err(|e| ConfigError(format!("ablation.row: {e}")))?;
        }
        if ab.vanilla_codebook {
            self.olc.codebook_mode = CodebookMode::Vanilla;
        }
        if ab.disable_pa {
            self.hdr.arch.use_pa = false;
        }
        if ab.disable_fsm && self.hdr.arch.merge == MergeMode::Fsm {
            self.hdr.arch.merge = MergeMode::Reference;
        }
        if let Some(m) = ab.merge {
            self.hdr.arch.merge = m;
        }
        if ab.disable_rf {
            self.hdr.arch.use_rf = false;
        }
        if ab.disable_dvq {
            self.hdr.arch.use_dvq = false;
        }
        if self.hdr.code_dim.is_none() {
            self.hdr.code_dim = Some(self.olc.arch.code_dim);
        }
        self.synth.scene.validate().map_err(|e| ConfigError(format!("synth: {e}")))?;
        if self.synth.scenes == 0 {
            return Err(ConfigError("synth.scenes: must be positive".into()));
        }
        self.olc.validate().map_err(|e| ConfigError(format!("olc: {e}")))?;
        self.hdr.validate().map_err(|e| ConfigError(format!("hdr: {e}")))?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_FILE), self.to_toml())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::parse("[olc.arch]\nbase_channel = 8\n").unwrap_err();
        assert!(err.0.starts_with("olc.arch"), "{err}");
        assert!(err.0.contains("base_channel"), "{err}");
        let err = RunConfig::parse("[hdr]\nlr = \"fast\"\n").unwrap_err();
        assert!(err.0.starts_with("hdr.lr"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse("seed = 7\n[ablation]\nrow = 2\nvanilla_codebook = true\n")
            .unwrap()
            .resolve(None)
            .unwrap();
        assert_eq!((cfg.olc.seed, cfg.hdr.seed), (7, 7));
        assert!(cfg.hdr.arch.use_pa && !cfg.hdr.arch.use_dvq);
        assert_eq!(cfg.olc.codebook_mode, CodebookMode::Vanilla);
        let back = RunConfig::parse(&cfg.to_toml()).unwrap().resolve(None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn example_config_is_valid() {
        let text = include_str!("../../../configs/toy.toml");
        RunConfig::parse(text).unwrap().resolve(None).unwrap();
    }
}
