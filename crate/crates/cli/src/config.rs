use std::path::{Path, PathBuf};

use peswap_core::mmdit::ModelConfig;
use peswap_core::raster::Rect;
use peswap_core::toyworld::encoder::EncoderConfig;
use peswap_core::toyworld::eval::{Method, DEFAULT_SEEDS};
use peswap_core::toyworld::train::TrainConfig;
use peswap_core::toyworld::WorldGeometry;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Settings shared by every subcommand. Every field has a default so an
/// empty file is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run name, the last component of the default output directory.
    pub name: String,
    /// Top-level seed; subsystem seeds are derived from it by label.
    pub seed: u64,
    /// Output directory. Unset means `out/<command>/<name>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Directory holding model.pbw, model.json and the feature encoders.
    pub checkpoint: PathBuf,
    /// LoRA adapter file. Unset falls back to `<checkpoint>/adapter.pbw` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<PathBuf>,
    pub model: ModelConfig,
    pub geometry: WorldGeometry,
    pub train: TrainConfig,
    pub lora: LoraSettings,
    pub encoder: EncoderConfig,
    pub sampler: SamplerSettings,
    pub edit: EditSettings,
    pub ablate: AblateSettings,
    pub clone: CloneSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 42,
            out: None,
            checkpoint: PathBuf::from("out/train-toy/default"),
            adapter: None,
            model: ModelConfig::desk(),
            geometry: WorldGeometry::default(),
            train: TrainConfig {
                steps: 6000,
                lr: 2e-3,
                warmup: 100,
                ..TrainConfig::default()
            },
            lora: LoraSettings::default(),
            encoder: EncoderConfig::default(),
            sampler: SamplerSettings::default(),
            edit: EditSettings::default(),
            ablate: AblateSettings::default(),
            clone: CloneSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f32,
    /// Set `train.steps = 0` to skip adapter training.
    pub train: TrainConfig,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            train: TrainConfig {
                steps: 2000,
                lr: 1e-3,
                warmup: 50,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub n_steps: usize,
    pub tau: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            n_steps: 49,
            tau: 2,
        }
    }
}

/// Inputs of `edit`. Without a background the command edits the built-in
/// scene of `class_id`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<PathBuf>,
    /// 1-4 reference PNGs; fewer than four are cycled over the slots.
    pub references: Vec<PathBuf>,
    /// Segmentation mask PNG per reference (white = object).
    pub masks: Vec<PathBuf>,
    /// Edit region in background pixels. Unset means the centred square.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<Rect>,
    pub class_id: usize,
    /// Prompt token. Unset means the class token with an adapter, else the null token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSettings {
    /// Unset means 0, 2, 4, 8, 16 and `n_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taus: Option<Vec<usize>>,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloneSettings {
    /// Number of seeds, starting at the top-level seed.
    pub runs: usize,
}

impl Default for CloneSettings {
    fn default() -> Self {
        Self { runs: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub methods: Vec<Method>,
    pub classes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            classes: (0..peswap_core::toyworld::NUM_CLASSES).collect(),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<usize>,
    pub out: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.tau {
            self.sampler.tau = t;
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(p) = &o.adapter {
            self.adapter = Some(p.clone());
        }
        if let Some(p) = &o.checkpoint {
            self.checkpoint = p.clone();
        }
    }

    /// Fixes the output directory for `command` so the echoed config names it.
    pub fn resolve(&mut self, command: &str) -> Result<PathBuf, CliError> {
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| Path::new("out").join(command).join(&self.name));
        self.out = Some(out.clone());
        self.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.streams.patch != self.geometry.patch {
            return bad(format!(
                "model patch {} != geometry patch {}",
                self.model.streams.patch, self.geometry.patch
            ));
        }
        if self.sampler.n_steps == 0 {
            return bad("sampler.n_steps must be positive".into());
        }
        if self.sampler.tau > self.sampler.n_steps {
            return bad(format!(
                "tau {} exceeds n_steps {}",
                self.sampler.tau, self.sampler.n_steps
            ));
        }
        if let Some(taus) = &self.ablate.taus {
            if let Some(t) = taus.iter().find(|&&t| t > self.sampler.n_steps) {
                return bad(format!(
                    "ablate tau {t} exceeds n_steps {}",
                    self.sampler.n_steps
                ));
            }
        }
        if self.edit.references.len() > 4 {
            return bad(format!(
                "at most 4 references, got {}",
                self.edit.references.len()
            ));
        }
        if self.edit.references.len() != self.edit.masks.len() {
            return bad(format!(
                "{} references but {} masks",
                self.edit.references.len(),
                self.edit.masks.len()
            ));
        }
        if self.edit.background.is_some() && self.edit.references.is_empty() {
            return bad("a custom background needs at least one reference".into());
        }
        let classes = peswap_core::toyworld::NUM_CLASSES;
        for &c in self
            .eval
            .classes
            .iter()
            .chain([&self.edit.class_id, &self.ablate.class_id])
        {
            if c >= classes {
                return bad(format!("class id {c} out of range (0..{classes})"));
            }
        }
        Ok(())
    }

    pub fn ablate_taus(&self) -> Vec<usize> {
        self.ablate
            .taus
            .clone()
            .unwrap_or_else(|| vec![0, 2, 4, 8, 16, self.sampler.n_steps])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sede = 3"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[sampler]\nsteps = 3"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[model.streams]\nwidth = 3"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.edit.region = Some(Rect::new(4, 4, 8, 8));
        c.ablate.taus = Some(vec![0, 3]);
        c.resolve("edit").unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_toml("seed = 1\n[sampler]\ntau = 5").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            tau: Some(0),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.sampler.tau), (9, 0));
    }

    #[test]
    fn full_edit_config_parses() {
        let text = "name = \"mug\"\nseed = 100\n[sampler]\nn_steps = 49\ntau = 2\n[edit]\nbackground = \"bg.png\"\n\
                    references = [\"ref.png\"]\nmasks = [\"ref_mask.png\"]\nregion = { y = 8, x = 8, h = 16, w = 16 }\nclass_id = 3\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.edit.region, Some(Rect::new(8, 8, 16, 16)));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn default_out_dir() {
        let mut c = RunConfig {
            name: "x".into(),
            ..RunConfig::default()
        };
        assert_eq!(c.resolve("eval").unwrap(), Path::new("out/eval/x"));
    }

    #[test]
    fn default_taus_end_at_step_count() {
        let c = RunConfig::default();
        assert_eq!(c.ablate_taus(), vec![0, 2, 4, 8, 16, 49]);
        assert_eq!(c.sampler.tau, 2);
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut c = RunConfig::default();
        c.sampler.tau = 50;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.edit.references = vec!["a.png".into()];
        assert!(c.validate().is_err());
        c.edit.masks = vec!["m.png".into()];
        assert!(c.validate().is_ok());
    }
}
