//! Run manifests: what a command read, what it wrote and with which
//! settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use capablate::{util, Error, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Digest of the command, config and inputs, so identical runs share
    /// an id.
    pub run_id: String,
    pub command: String,
    pub version: String,
    /// The config file exactly as read, or the effective settings when no
    /// file was given.
    pub config: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn build(
        command: &str,
        config: String,
        inputs: &[PathBuf],
        outputs: Vec<PathBuf>,
    ) -> Result<Self> {
        let inputs: Vec<InputDigest> = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.clone(),
                    sha256: util::sha256_hex(&util::read_bytes(p)?),
                })
            })
            .collect::<Result<_>>()?;
        let mut key = format!("{command}\n{VERSION}\n{config}\n");
        for i in &inputs {
            key.push_str(&i.sha256);
            key.push('\n');
        }
        let run_id = util::sha256_hex(key.as_bytes())[..16].to_string();
        Ok(RunManifest {
            run_id,
            command: command.into(),
            version: VERSION.into(),
            config,
            inputs,
            outputs,
        })
    }

    /// Writes the manifest after checking that every listed output exists.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.is_file()) {
            return Err(Error::Contract(format!(
                "output {} was not written",
                missing.display()
            )));
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        util::write_bytes(path, text + "\n")
    }
}
