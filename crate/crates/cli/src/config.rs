use std::path::Path;

use serde::{Deserialize, Serialize};

use bitforge_core::{Error, PartitionConfig};

/// Run configuration file. Every field is optional.
///
/// ```toml
/// seed = 1
///
/// [partition]
/// link_limit_gbps = 75.0
/// max_copies = 4
///
/// [partition.throughput]
/// word_clocks = 30
/// frequency_hz = { conv2 = 353e6, conv3 = 353e6, conv4 = 353e6, conv5 = 156e6 }
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub partition: PartitionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
