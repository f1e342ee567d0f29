//! Run configuration read from a TOML file, with command-line overrides.
//!
//! Precedence is flag, then file, then built-in default. Every key has a
//! default except `[dataset]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synth_dataset, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::models::{ArchId, TrainConfig};
use crate::untrain::UntrainConfig;

/// Image/label IDX file pairs; the validation split is carved out of the training files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SynthSpec),
    Idx(IdxSpec),
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DatasetConfig::Synthetic(spec) => {
                let s = synth_dataset(spec)?;
                Ok(Splits { train: s.train, val: s.val, test: s.test })
            }
            DatasetConfig::Idx(spec) => {
                let full = load_idx(&spec.train_images, &spec.train_labels, Split::Train)?;
                let (train, val) = full.split_off(spec.val_fraction, spec.split_seed)?;
                let mut test = load_idx(&spec.test_images, &spec.test_labels, Split::Test)?;
                if test.n_classes() != train.n_classes() {
                    let (images, labels) = (test.images().clone(), test.labels().to_vec());
                    test = Dataset::new(images, labels, train.n_classes(), Split::Test)?;
                }
                Ok(Splits { train, val: val.with_split(Split::Val), test })
            }
        }
    }
}

/// Which split the untraining stream is drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UntrainSource {
    #[default]
    Train,
    /// Untrain on held-out validation data only.
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchId,
    /// Seed for model initialization, training and untraining. The dataset has its own seed.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub untrain: UntrainConfig,
    pub untrain_source: UntrainSource,
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// The file as written; absent keys fall back to defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    arch: Option<ArchId>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dataset: Option<DatasetConfig>,
    train: Option<TrainConfig>,
    untrain: Option<toml::Table>,
    untrain_source: Option<UntrainSource>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().replace('\n', " "))
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(config_err)?;
        let arch = raw.arch.unwrap_or(ArchId::SmallCnn);
        let dataset = raw.dataset.ok_or_else(|| Error::Config("missing required [dataset] table".into()))?;
        // The architecture picks the untraining defaults; keys in the file override them.
        let mut untrain = toml::Table::try_from(UntrainConfig::for_arch(arch)).map_err(config_err)?;
        untrain.extend(raw.untrain.unwrap_or_default());
        let untrain: UntrainConfig = untrain.try_into().map_err(config_err)?;
        let mut cfg = RunConfig {
            arch,
            seed: raw.seed.unwrap_or(0),
            out: raw.out.unwrap_or_else(|| PathBuf::from("runs/default")),
            dataset,
            train: raw.train.unwrap_or_default(),
            untrain,
            untrain_source: raw.untrain_source.unwrap_or_default(),
        };
        let seed = overrides.seed.or(raw.seed);
        if let Some(seed) = seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
            cfg.untrain.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.untrain.validate()?;
        if let DatasetConfig::Idx(spec) = &self.dataset {
            if !(0.0 < spec.val_fraction && spec.val_fraction < 1.0) {
                return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", spec.val_fraction)));
            }
        }
        Ok(())
    }

    /// The fully resolved configuration, for writing next to run outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::untrain::LossMode;

    const MINIMAL: &str = "[dataset]\nkind = \"synthetic\"\n";

    #[test]
    fn defaults_fill_everything_but_dataset() {
        let cfg = RunConfig::from_toml_str(MINIMAL, &Overrides::default()).unwrap();
        assert_eq!(cfg.arch, ArchId::SmallCnn);
        assert_eq!(cfg.dataset, DatasetConfig::Synthetic(SynthSpec::default()));
        assert_eq!(cfg.untrain, UntrainConfig::default());
        assert_eq!(cfg.untrain_source, UntrainSource::Train);
        assert!(matches!(RunConfig::from_toml_str("seed = 1\n", &Overrides::default()), Err(Error::Config(_))));
    }

    #[test]
    fn arch_sets_forget_weight_unless_given() {
        let vit = format!("arch = \"tiny_vit\"\n{MINIMAL}[untrain]\nlearning_rate = 50.0\n");
        let cfg = RunConfig::from_toml_str(&vit, &Overrides::default()).unwrap();
        assert_eq!(cfg.untrain.lambda1, 100.0);
        assert_eq!(cfg.untrain.learning_rate, 50.0);
        let explicit = format!("arch = \"tiny_vit\"\n{MINIMAL}[untrain]\nlambda1 = 7.0\nloss_mode = \"difference\"\n");
        let cfg = RunConfig::from_toml_str(&explicit, &Overrides::default()).unwrap();
        assert_eq!(cfg.untrain.lambda1, 7.0);
        assert_eq!(cfg.untrain.loss_mode, LossMode::Difference);
    }

    #[test]
    fn flags_beat_file_beats_default() {
        let text = format!("seed = 4\nout = \"a\"\n{MINIMAL}[train]\nseed = 9\n");
        let file = RunConfig::from_toml_str(&text, &Overrides::default()).unwrap();
        assert_eq!((file.seed, file.train.seed, file.untrain.seed), (4, 4, 4));
        assert_eq!(file.out, PathBuf::from("a"));
        let flags = Overrides { seed: Some(11), out: Some("b".into()) };
        let cfg = RunConfig::from_toml_str(&text, &flags).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.untrain.seed), (11, 11, 11));
        assert_eq!(cfg.out, PathBuf::from("b"));
        // Without a top-level seed the per-stage seeds from the file stand.
        let staged = RunConfig::from_toml_str(&format!("{MINIMAL}[train]\nseed = 9\n"), &Overrides::default()).unwrap();
        assert_eq!(staged.train.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            format!("colour = 1\n{MINIMAL}"),
            format!("{MINIMAL}image_sise = 16\n"),
            format!("{MINIMAL}[train]\nlr = 1.0\n"),
            format!("{MINIMAL}[untrain]\nlambda9 = 1.0\n"),
            "[dataset]\nkind = \"tape\"\n".to_string(),
        ] {
            let err = RunConfig::from_toml_str(&bad, &Overrides::default()).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
            assert!(!err.to_string().contains('\n'));
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "arch = \"tiny_vit\"\n[dataset]\nkind = \"idx\"\ntrain_images = \"a\"\ntrain_labels = \"b\"\ntest_images = \"c\"\ntest_labels = \"d\"\n";
        let cfg = RunConfig::from_toml_str(text, &Overrides::default()).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
        let bad = text.replace("kind = \"idx\"", "kind = \"idx\"\nval_fraction = 1.5");
        assert!(RunConfig::from_toml_str(&bad, &Overrides::default()).is_err());
    }
}
