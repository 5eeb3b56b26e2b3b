//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! n_clients = 20
//! k = 2
//! topology.p = 0.3
//! init_mode = gi
//! ```
//!
//! Unknown keys, duplicate keys and out-of-range values are rejected with a
//! message naming the key.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::datagen::SyntheticSpec;
use crate::dfca::{AggregationMode, Hyperparams, InitMode};
use crate::error::{Error, Result};
use crate::model::ModelShape;
use crate::topology::MixingKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dfca,
    Ifca,
    Davg,
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dfca" => Ok(Self::Dfca),
            "ifca" => Ok(Self::Ifca),
            "davg" => Ok(Self::Davg),
            _ => Err(format!("expected `dfca`, `ifca` or `davg`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dfca => "dfca",
            Self::Ifca => "ifca",
            Self::Davg => "davg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OnDisconnected {
    Abort,
    Proceed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub n_clients: usize,
    pub k: usize,
    pub topology_p: f64,
    /// Fixed graph seed; derived from `seed` when absent.
    pub topology_seed: Option<u64>,
    pub on_disconnected: OnDisconnected,
    pub init_mode: InitMode,
    pub aggregation_mode: AggregationMode,
    pub mixing_kind: MixingKind,
    pub gamma: f64,
    pub tau: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub participation_fraction: f64,
    pub non_participants_receive: bool,
    pub hidden: usize,
    pub data: SyntheticSpec,
    /// Center seed override; derived from `seed` when absent.
    pub data_center_seed: Option<u64>,
    pub test_fraction: f64,
    pub data_source: DataSource,
    /// Master seed of the experiment. Run `s` of `n_seeds` uses `seed + s`.
    pub seed: u64,
    pub n_seeds: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            algorithm: Algorithm::Dfca,
            n_clients: 20,
            k: 2,
            topology_p: 0.3,
            topology_seed: None,
            on_disconnected: OnDisconnected::Proceed,
            init_mode: InitMode::Global,
            aggregation_mode: AggregationMode::Sequential,
            mixing_kind: MixingKind::PaperUniform,
            gamma: 0.1,
            tau: 5,
            batch_size: 32,
            rounds: 150,
            participation_fraction: 1.0,
            non_participants_receive: true,
            hidden: 32,
            data: SyntheticSpec::default(),
            data_center_seed: None,
            test_fraction: 0.2,
            data_source: DataSource::Synthetic,
            seed: 0,
            n_seeds: 5,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`].
pub const KEYS: &[&str] = &[
    "name",
    "algorithm",
    "n_clients",
    "k",
    "topology.p",
    "topology.seed",
    "topology.on_disconnected",
    "init_mode",
    "aggregation_mode",
    "mixing_kind",
    "gamma",
    "tau",
    "batch_size",
    "T",
    "participation_fraction",
    "non_participants_receive",
    "model.hidden",
    "data.source",
    "data.n_classes",
    "data.dim",
    "data.samples_per_client",
    "data.class_separation",
    "data.noise_std",
    "data.center_seed",
    "data.rotation_planes",
    "data.test_fraction",
    "data.idx_images",
    "data.idx_labels",
    "seed",
    "n_seeds",
    "output_dir",
];

/// Numeric keys that `sweep` may vary.
pub const SWEEPABLE: &[&str] = &[
    "n_clients",
    "k",
    "topology.p",
    "topology.seed",
    "gamma",
    "tau",
    "batch_size",
    "T",
    "participation_fraction",
    "model.hidden",
    "data.n_classes",
    "data.dim",
    "data.samples_per_client",
    "data.class_separation",
    "data.noise_std",
    "data.center_seed",
    "data.test_fraction",
    "seed",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::invalid(key, format!("`{value}`: {e}")))
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_inner(text).map(|(cfg, _)| cfg)
    }

    fn parse_inner(text: &str) -> Result<(Self, bool)> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut idx_images = None;
        let mut idx_labels = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: no + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::invalid(key, "given more than once"));
            }
            match key {
                "data.idx_images" => idx_images = Some(PathBuf::from(value)),
                "data.idx_labels" => idx_labels = Some(PathBuf::from(value)),
                _ => cfg.set(key, value)?,
            }
        }
        if let DataSource::Idx { images, labels } = &mut cfg.data_source {
            match (idx_images, idx_labels) {
                (Some(i), Some(l)) => {
                    *images = i;
                    *labels = l;
                }
                _ => {
                    return Err(Error::invalid(
                        "data.source",
                        "idx source needs data.idx_images and data.idx_labels",
                    ))
                }
            }
        } else if idx_images.is_some() || idx_labels.is_some() {
            return Err(Error::invalid(
                "data.idx_images",
                "only valid with data.source = idx",
            ));
        }
        cfg.validate()?;
        Ok((cfg, seen.contains("name")))
    }

    /// Reads a config file. The experiment name defaults to the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut cfg, named) = Self::parse_inner(&text)?;
        if !named {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                cfg.name = stem.to_string();
            }
        }
        Ok(cfg)
    }

    /// Sets one key from its text form. Does not re-validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(Error::invalid(key, "must be a non-empty plain file name"));
                }
                self.name = value.to_string();
            }
            "algorithm" => self.algorithm = parse_value(key, value)?,
            "n_clients" => self.n_clients = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "topology.p" => self.topology_p = parse_value(key, value)?,
            "topology.seed" => self.topology_seed = Some(parse_value(key, value)?),
            "topology.on_disconnected" => {
                self.on_disconnected = match value {
                    "abort" => OnDisconnected::Abort,
                    "proceed" => OnDisconnected::Proceed,
                    _ => return Err(Error::invalid(key, format!("expected `abort` or `proceed`, got `{value}`"))),
                }
            }
            "init_mode" => self.init_mode = parse_value(key, value)?,
            "aggregation_mode" => self.aggregation_mode = parse_value(key, value)?,
            "mixing_kind" => self.mixing_kind = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "T" => self.rounds = parse_value(key, value)?,
            "participation_fraction" => self.participation_fraction = parse_value(key, value)?,
            "non_participants_receive" => self.non_participants_receive = parse_value(key, value)?,
            "model.hidden" => self.hidden = parse_value(key, value)?,
            "data.source" => {
                self.data_source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    },
                    _ => return Err(Error::invalid(key, format!("expected `synthetic` or `idx`, got `{value}`"))),
                }
            }
            "data.n_classes" => self.data.n_classes = parse_value(key, value)?,
            "data.dim" => self.data.dim = parse_value(key, value)?,
            "data.samples_per_client" => self.data.samples_per_client = parse_value(key, value)?,
            "data.class_separation" => self.data.class_separation = parse_value(key, value)?,
            "data.noise_std" => self.data.noise_std = parse_value(key, value)?,
            "data.center_seed" => self.data_center_seed = Some(parse_value(key, value)?),
            "data.rotation_planes" => {
                self.data.rotation_planes = match value {
                    "all" => None,
                    _ => Some(parse_value(key, value)?),
                }
            }
            "data.test_fraction" => self.test_fraction = parse_value(key, value)?,
            "data.idx_images" | "data.idx_labels" => {
                let DataSource::Idx { images, labels } = &mut self.data_source else {
                    return Err(Error::invalid(key, "only valid with data.source = idx"));
                };
                if key == "data.idx_images" {
                    *images = PathBuf::from(value);
                } else {
                    *labels = PathBuf::from(value);
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "n_seeds" => self.n_seeds = parse_value(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override `{o}` is not `key=value`")))?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::invalid(key, msg)) };
        check(self.n_clients >= 1, "n_clients", "must be at least 1")?;
        check(
            self.n_clients <= crate::topology::MAX_CLIENTS,
            "n_clients",
            "exceeds the supported maximum of 4096",
        )?;
        check(self.k >= 1, "k", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.topology_p), "topology.p", "must lie in [0, 1]")?;
        check(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma", "must be a finite value >= 0")?;
        check(self.tau >= 1, "tau", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(
            self.participation_fraction > 0.0 && self.participation_fraction <= 1.0,
            "participation_fraction",
            "must lie in (0, 1]",
        )?;
        check(self.data.n_classes >= 2, "data.n_classes", "must be at least 2")?;
        check(
            self.test_fraction > 0.0 && self.test_fraction < 1.0,
            "data.test_fraction",
            "must lie in (0, 1)",
        )?;
        check(self.n_seeds >= 1, "n_seeds", "must be at least 1")?;
        if self.data_source == DataSource::Synthetic {
            check(
                matches!(self.k, 1 | 2 | 4),
                "k",
                "synthetic rotated data supports k in {1, 2, 4}",
            )?;
            check(self.data.dim >= 2, "data.dim", "must be at least 2")?;
            check(self.data.class_separation > 0.0, "data.class_separation", "must be positive")?;
            check(self.data.noise_std > 0.0, "data.noise_std", "must be positive")?;
            self.data.validate()?;
        } else {
            check(matches!(self.k, 1 | 2 | 4), "k", "image rotation supports k in {1, 2, 4}")?;
        }
        check(self.data.samples_per_client >= 2, "data.samples_per_client", "must be at least 2")?;
        let n_test = (self.data.samples_per_client as f64 * self.test_fraction).round() as usize;
        check(
            n_test >= 1 && n_test < self.data.samples_per_client,
            "data.test_fraction",
            "leaves an empty train or test split",
        )?;
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            gamma: self.gamma,
            tau: self.tau,
            batch_size: self.batch_size,
        }
    }

    pub fn model_shape(&self, input_dim: usize) -> ModelShape {
        ModelShape::new(input_dim, self.hidden, self.data.n_classes)
    }

    /// Number of cluster models each client holds.
    pub fn model_count(&self) -> usize {
        match self.algorithm {
            Algorithm::Davg => 1,
            _ => self.k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let cfg = ExperimentConfig::parse(
            "# desk scale\n\
             n_clients = 50\n\
             k = 4\n\
             topology.p = 0.15   # sparse\n\
             topology.seed = 3\n\
             init_mode = li\n\
             aggregation_mode = batch\n\
             mixing_kind = metropolis\n\
             gamma = 0.25\n\
             tau = 2\n\
             batch_size = 16\n\
             T = 10\n\
             participation_fraction = 0.5\n\
             data.samples_per_client = 100\n\
             data.noise_std = 0.5\n\
             algorithm = ifca\n\
             seed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.n_clients, 50);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.topology_p, 0.15);
        assert_eq!(cfg.topology_seed, Some(3));
        assert_eq!(cfg.init_mode, InitMode::Local);
        assert_eq!(cfg.aggregation_mode, AggregationMode::Batch);
        assert_eq!(cfg.mixing_kind, MixingKind::Metropolis);
        assert_eq!(cfg.rounds, 10);
        assert_eq!(cfg.data.samples_per_client, 100);
        assert_eq!(cfg.algorithm, Algorithm::Ifca);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("gama = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        for (text, key) in [
            ("topology.p = 1.5", "topology.p"),
            ("tau = 0", "tau"),
            ("k = 3", "k"),
            ("gamma = fast", "gamma"),
            ("participation_fraction = 0", "participation_fraction"),
            ("n_seeds = 0", "n_seeds"),
            ("k = 2\nk = 4", "k"),
            ("data.source = idx", "data.source"),
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(err.to_string().contains(key), "{text}: {err}");
        }
        assert!(ExperimentConfig::parse("just words").is_err());
    }

    #[test]
    fn idx_paths() {
        let cfg = ExperimentConfig::parse(
            "data.idx_labels = l.idx\ndata.source = idx\ndata.idx_images = i.idx\ndata.dim = 784\n",
        )
        .unwrap();
        assert_eq!(
            cfg.data_source,
            DataSource::Idx {
                images: "i.idx".into(),
                labels: "l.idx".into()
            }
        );
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["gamma=0.05", " T = 3 "])
            .unwrap();
        assert_eq!(cfg.gamma, 0.05);
        assert_eq!(cfg.rounds, 3);
        assert!(ExperimentConfig::default().with_overrides(&["bogus=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["gamma"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["gamma=-1"]).is_err());
    }

    #[test]
    fn every_key_is_settable() {
        for key in KEYS {
            let err = ExperimentConfig::default().set(key, "\u{0}");
            assert!(!matches!(err, Err(Error::UnknownKey(_))), "{key}");
        }
        for key in SWEEPABLE {
            assert!(KEYS.contains(key));
        }
    }
}
