//! Layered run configuration: defaults < TOML file < command-line flags.

use std::path::{Path, PathBuf};

use fasvit::data::synth::SynthConfig;
use fasvit::protocol::Aggregation;
use fasvit::trainer::TrainConfig;
use fasvit::vit::ModelConfig;
use fasvit::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FASVIT_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Tiny,
    Desk,
    Base,
}

impl ModelPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Tiny => ModelConfig::tiny(),
            ModelPreset::Desk => ModelConfig::desk(),
            ModelPreset::Base => ModelConfig::base(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub aggregation: Aggregation,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            aggregation: Aggregation::Frame,
        }
    }
}

/// Fully resolved configuration. `seed` is the single source of randomness
/// and overrides the per-section seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Omit wall-clock timings from outputs so reruns are byte-identical.
    pub deterministic: bool,
    pub model_preset: ModelPreset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub protocol: ProtocolConfig,
    /// Output root; not part of the fingerprint.
    pub out: PathBuf,
}

/// Flag-level overrides, applied last.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

fn defaults(preset: ModelPreset) -> RunConfig {
    let model = preset.config();
    RunConfig {
        seed: 0,
        deterministic: false,
        model_preset: preset,
        synth: SynthConfig {
            image_size: model.image_size,
            ..SynthConfig::default()
        },
        model,
        train: TrainConfig::desk(),
        protocol: ProtocolConfig::default(),
        out: std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| DEFAULT_OUT.into()),
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

impl RunConfig {
    /// Resolves the layers. Unknown keys, bad values and failed invariants
    /// are configuration errors.
    pub fn load(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let layer = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
                serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_layer(layer, flags)
    }

    pub fn from_toml(text: &str, flags: &Overrides) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::from_layer(
            serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?,
            flags,
        )
    }

    fn from_layer(layer: Value, flags: &Overrides) -> Result<Self> {
        let preset = match layer.get("model_preset") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("model_preset: {e}")))?,
            None => ModelPreset::default(),
        };
        let mut value = serde_json::to_value(defaults(preset)).expect("defaults serialize");
        merge(&mut value, layer);
        let mut cfg: RunConfig = deserialize_checked(value)?;
        if let Some(seed) = flags.seed {
            cfg.seed = seed;
        }
        cfg.deterministic |= flags.deterministic;
        if let Some(out) = &flags.out {
            cfg.out = out.clone();
        }
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from model.image_size {}",
                self.synth.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, output root excluded.
    pub fn canonical(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().unwrap().remove("out");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_fingerprint(&self) -> String {
        self.fingerprint()[..12].to_string()
    }

    /// Writes the resolved configuration into `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        let mut text = serde_json::to_string_pretty(&serde_json::from_str::<Value>(&self.canonical()).unwrap())
            .expect("value serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Deserializes, prefixing errors with the table that holds the bad key.
fn deserialize_checked(value: Value) -> Result<RunConfig> {
    if let Value::Object(map) = &value {
        for section in ["model", "train", "synth", "protocol"] {
            if let Some(v) = map.get(section) {
                let check = match section {
                    "model" => serde_json::from_value::<ModelConfig>(v.clone()).map(|_| ()),
                    "train" => serde_json::from_value::<TrainConfig>(v.clone()).map(|_| ()),
                    "synth" => serde_json::from_value::<SynthConfig>(v.clone()).map(|_| ()),
                    _ => serde_json::from_value::<ProtocolConfig>(v.clone()).map(|_| ()),
                };
                check.map_err(|e| Error::Config(format!("[{section}] {e}")))?;
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let flags = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nbatch_size = 4\n", &flags).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.lr_head, TrainConfig::desk().lr_head);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n", &Overrides::default()).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn fingerprint_ignores_output_root_and_key_order() {
        let a = RunConfig::from_toml(
            "seed = 1\nout = \"x\"\n[train]\nbatch_size = 8\npatience = 3\n",
            &Overrides::default(),
        )
        .unwrap();
        let b = RunConfig::from_toml(
            "[train]\npatience = 3\nbatch_size = 8\n",
            &Overrides {
                seed: Some(1),
                out: Some("y".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig::from_toml("seed = 2\n", &Overrides::default()).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn base_preset_switches_geometry() {
        let cfg = RunConfig::from_toml("model_preset = \"base\"\n", &Overrides::default()).unwrap();
        assert_eq!(cfg.model, ModelConfig::base());
        assert_eq!(cfg.synth.image_size, 224);
    }
}
