//! Pattern manifests: a TOML file holding `k` and the 9-bit mask encodings.
//!
//! ```toml
//! k = 4
//! encodings = [184, 178, 154, 58]
//! ```

use std::path::Path;

use pconv_core::scp::{extended_scp_set, PatternSet};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};

/// Pattern counts accepted by `derive-patterns`.
pub const SUPPORTED_COUNTS: [usize; 3] = [4, 8, 12];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternManifest {
    pub k: usize,
    pub encodings: Vec<u16>,
}

impl PatternManifest {
    pub fn from_set(set: &PatternSet) -> Self {
        PatternManifest { k: set.len(), encodings: set.encodings() }
    }

    pub fn to_set(&self) -> Result<PatternSet> {
        if self.k != self.encodings.len() {
            return Err(Error::Parse(format!("k = {} but {} encodings are listed", self.k, self.encodings.len())));
        }
        Ok(PatternSet::new(&self.encodings)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("pattern manifest: {e}")))
    }
}

/// The library for `k` patterns; only the counts in [`SUPPORTED_COUNTS`].
pub fn derive_patterns(k: usize) -> Result<PatternSet> {
    if !SUPPORTED_COUNTS.contains(&k) {
        return Err(
            pconv_core::Error::Config(format!("unsupported pattern count {k}; expected one of 4, 8, 12")).into()
        );
    }
    Ok(extended_scp_set(k)?)
}

pub fn read_patterns(path: &Path) -> Result<PatternSet> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    PatternManifest::from_toml(text)?.to_set()
}

pub fn write_patterns(path: &Path, set: &PatternSet) -> Result<()> {
    write_file(path, PatternManifest::from_set(set).to_toml().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pconv_core::scp::canonical_scp_set;

    #[test]
    fn canonical_round_trip() {
        let set = derive_patterns(4).unwrap();
        assert_eq!(set, canonical_scp_set());
        let text = PatternManifest::from_set(&set).to_toml();
        assert_eq!(text, "k = 4\nencodings = [184, 178, 154, 58]\n");
        assert_eq!(PatternManifest::from_toml(&text).unwrap().to_set().unwrap(), set);
    }

    #[test]
    fn larger_sets_extend_the_canonical_four() {
        for k in [8, 12] {
            let set = derive_patterns(k).unwrap();
            assert_eq!(set.len(), k);
            assert_eq!(set.encodings()[..4], canonical_scp_set().encodings()[..]);
        }
    }

    #[test]
    fn rejects_bad_counts_and_manifests() {
        assert!(derive_patterns(3).is_err());
        assert!(derive_patterns(16).is_err());
        assert!(PatternManifest::from_toml("k = 2\nencodings = [184]\n").unwrap().to_set().is_err());
        assert!(PatternManifest::from_toml("k = 1\nencodings = [1024]\n").unwrap().to_set().is_err());
        assert!(PatternManifest::from_toml("k = 1\nencodings = [184]\nextra = 1\n").is_err());
    }
}
