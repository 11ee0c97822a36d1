//! Pruning configuration files (TOML). Every key is optional.
//!
//! ```toml
//! pattern_count = 4
//! keep_ratio = "1/2"
//! balanced = true
//! method = "admm"
//!
//! [layer_keep]
//! 3 = "1/4"
//!
//! [admm]
//! rho = 1e-3
//! rounds = 3
//!
//! [data]
//! train = 4000
//! validation = 1000
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use pconv_core::prune::{AdmmConfig, KeepRatio, PruneConfig, PruneMethod};
use serde::Deserialize;

use crate::error::{read_file, Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdmmFile {
    rho: Option<f32>,
    rounds: Option<usize>,
    epochs_per_round: Option<usize>,
    learning_rate: Option<f32>,
    momentum: Option<f32>,
    batch_size: Option<usize>,
    finetune_epochs: Option<usize>,
    seed: Option<u64>,
}

/// Sizes of the synthetic train and validation sets used by ADMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub validation: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: 4000, validation: 1000 }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    pattern_count: Option<usize>,
    keep_ratio: Option<String>,
    balanced: Option<bool>,
    method: Option<String>,
    #[serde(default)]
    layer_keep: BTreeMap<String, String>,
    #[serde(default)]
    admm: AdmmFile,
    #[serde(default)]
    data: DataConfig,
}

fn keep(text: &str) -> Result<KeepRatio> {
    Ok(text.parse::<KeepRatio>()?)
}

/// Parses a config; absent keys keep [`PruneConfig::default`].
pub fn parse_prune_config(text: &str) -> Result<(PruneConfig, DataConfig)> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse(format!("prune config: {e}")))?;
    let mut c = PruneConfig::default();
    if let Some(k) = file.pattern_count {
        c.pattern_count = k;
    }
    if let Some(r) = &file.keep_ratio {
        c.keep_ratio = keep(r)?;
    }
    if let Some(b) = file.balanced {
        c.balanced = b;
    }
    if let Some(m) = &file.method {
        c.method = m.parse::<PruneMethod>()?;
    }
    for (layer, ratio) in &file.layer_keep {
        let i = layer
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("layer_keep key {layer:?} is not a layer index")))?;
        c.layer_keep.push((i, keep(ratio)?));
    }
    let a = &file.admm;
    let d = AdmmConfig::default();
    c.admm = AdmmConfig {
        rho: a.rho.unwrap_or(d.rho),
        rounds: a.rounds.unwrap_or(d.rounds),
        epochs_per_round: a.epochs_per_round.unwrap_or(d.epochs_per_round),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        momentum: a.momentum.unwrap_or(d.momentum),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        finetune_epochs: a.finetune_epochs.unwrap_or(d.finetune_epochs),
        seed: a.seed.unwrap_or(d.seed),
    };
    c.validate()?;
    Ok((c, file.data))
}

pub fn read_prune_config(path: &Path) -> Result<(PruneConfig, DataConfig)> {
    let bytes = read_file(path)?;
    parse_prune_config(std::str::from_utf8(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let (c, d) = parse_prune_config("").unwrap();
        assert_eq!(c, PruneConfig::default());
        assert_eq!(d, DataConfig::default());
    }

    #[test]
    fn full_file() {
        let text = "pattern_count = 8\nkeep_ratio = \"0.5\"\nbalanced = false\nmethod = \"admm\"\n\
                    [layer_keep]\n3 = \"1/4\"\n[admm]\nrho = 0.01\nrounds = 1\n[data]\ntrain = 64\n";
        let (c, d) = parse_prune_config(text).unwrap();
        assert_eq!(c.pattern_count, 8);
        assert_eq!(c.keep_ratio, KeepRatio::new(1, 2).unwrap());
        assert!(!c.balanced);
        assert_eq!(c.method, PruneMethod::Admm);
        assert_eq!(c.keep_for(3), KeepRatio::new(1, 4).unwrap());
        assert_eq!(c.keep_for(0), c.keep_ratio);
        assert_eq!((c.admm.rho, c.admm.rounds, c.admm.epochs_per_round), (0.01, 1, 2));
        assert_eq!(d, DataConfig { train: 64, validation: 1000 });
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse_prune_config("keep_ratio = \"0\"").is_err());
        assert!(parse_prune_config("keep_ratio = \"3/2\"").is_err());
        assert!(parse_prune_config("method = \"random\"").is_err());
        assert!(parse_prune_config("pattern_count = 300").is_err());
        assert!(parse_prune_config("[layer_keep]\nfirst = \"1/2\"").is_err());
        assert!(parse_prune_config("typo = 1").is_err());
    }
}
