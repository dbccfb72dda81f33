//! Input hashing, provenance records and output writing.

use std::collections::BTreeMap;
use std::path::Path;

use openset_core::sha256_hex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, Result};

pub const PROVENANCE_KEY: &str = "provenance";

/// A file read once; the hash covers exactly the bytes that get parsed.
pub struct Input {
    pub path: String,
    pub text: String,
    pub sha256: String,
}

impl Input {
    pub fn read(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{display}: {e}")))?;
        let sha256 = sha256_hex(&bytes);
        let text = String::from_utf8(bytes)
            .map_err(|_| CliError::Data(format!("{display}: not valid UTF-8")))?;
        Ok(Input {
            path: display,
            text,
            sha256,
        })
    }

    /// Parses with one of the core loaders, tagging errors with the path.
    pub fn parse<T>(&self, f: impl FnOnce(&str) -> openset_core::Result<T>) -> Result<T> {
        f(&self.text).map_err(|source| CliError::InFile {
            path: self.path.clone(),
            source,
        })
    }
}

/// Records what went into a command so every output can say where it came
/// from.
pub struct Provenance {
    command: &'static str,
    inputs: BTreeMap<String, Value>,
}

impl Provenance {
    pub fn new(command: &'static str) -> Self {
        Provenance {
            command,
            inputs: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, role: &str, input: &Input) {
        self.inputs.insert(
            role.to_string(),
            json!({ "path": input.path, "sha256": input.sha256 }),
        );
    }

    pub fn record_value(&mut self, role: &str, value: Value) {
        self.inputs.insert(role.to_string(), value);
    }

    pub fn to_value(&self, params: &impl Serialize) -> Value {
        json!({
            "tool": "openset",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "params": params,
            "inputs": self.inputs,
        })
    }
}

/// Loads a JSON parameter file (when given) over the defaults.
pub fn load_config<P: DeserializeOwned + Default>(
    path: Option<&Path>,
    prov: &mut Provenance,
) -> Result<P> {
    let Some(path) = path else {
        return Ok(P::default());
    };
    let input = Input::read(path)?;
    prov.record("config", &input);
    serde_json::from_str(&input.text)
        .map_err(|e| CliError::Usage(format!("{}: invalid config: {e}", input.path)))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn to_pretty(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(openset_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

/// CSV files carry their provenance as a leading comment line.
pub fn csv_with_header(provenance: &Value, body: &str) -> String {
    format!("# {provenance}\n{body}")
}
