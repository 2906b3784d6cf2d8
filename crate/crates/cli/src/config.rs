// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config resolution, run manifests and the exit-code contract.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Exit code for bad inputs: flags, files, incompatible artifacts.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<cotsteer::Error> for CliError {
    fn from(e: cotsteer::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Write a file, naming it in the error.
pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

/// Resolve a command's settings: flags override the config file, which
/// overrides the defaults of `T`.
pub fn resolve<T: DeserializeOwned>(flags: &impl Serialize, config: Option<&Path>) -> CliResult<T> {
    let mut merged = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(invalid(format!("config {} must be a JSON object", path.display())));
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    let flags = serde_json::to_value(flags).map_err(|e| invalid(e.to_string()))?;
    if let (Value::Object(m), Value::Object(f)) = (&mut merged, flags) {
        for (k, v) in f {
            m.insert(k, v);
        }
    }
    serde_json::from_value(merged).map_err(|e| invalid(format!("invalid settings: {e}")))
}

pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| invalid(format!("missing required setting {flag}")))
}

pub fn is_false(b: &bool) -> bool {
    !*b
}

/// Written next to every output artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// Fingerprints of the inputs, keyed by kind.
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            inputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn input(mut self, kind: &str, fingerprint: impl Into<String>) -> Self {
        self.inputs.insert(kind.to_string(), fingerprint.into());
        self
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write(&path, text)?;
        Ok(path)
    }
}
