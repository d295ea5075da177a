//! Run manifests, input digests and canonical JSON output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use vidguard_core::encoder::ModelConfig;

use crate::error::CliError;

pub const MANIFEST_SCHEMA: &str = "vidguard.manifest/v1";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub options: Value,
    /// SHA-256 of every input, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Option<ModelConfig>, options: Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            options,
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), digest(path)?);
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a file, or of a directory's sorted `(name, file digest)` list.
pub fn digest(path: &Path) -> Result<String, CliError> {
    let meta = fs::metadata(path).map_err(CliError::io(path))?;
    if !meta.is_dir() {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        return Ok(hex(&Sha256::digest(&bytes)));
    }
    let mut names: Vec<_> = fs::read_dir(path)
        .map_err(CliError::io(path))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()
        .map_err(CliError::io(path))?;
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        h.update(name.as_encoded_bytes());
        h.update([0]);
        h.update(digest(&path.join(&name))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex(&h.finalize()))
}

fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Rounds every float to 9 significant digits.
pub fn canonical(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .map(round_sig)
            .and_then(serde_json::Number::from_f64)
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, canonical(v))).collect()),
        other => other,
    }
}

pub fn to_value(x: &impl Serialize) -> Result<Value, CliError> {
    serde_json::to_value(x).map_err(|e| CliError::Serialize(e.to_string()))
}

/// `{"schema": .., "manifest": .., ...fields}`.
pub fn document(schema: &str, manifest: &RunManifest, body: Value) -> Result<Value, CliError> {
    let mut out = Map::new();
    out.insert("schema".into(), Value::String(schema.into()));
    out.insert("manifest".into(), to_value(manifest)?);
    match body {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("data".into(), other);
        }
    }
    Ok(Value::Object(out))
}

fn write_text(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(CliError::io(dir))?;
            }
            fs::write(path, text).map_err(CliError::io(path))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(CliError::io(Path::new("<stdout>")))
        }
    }
}

pub fn write_json(v: Value, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&canonical(v)).map_err(|e| CliError::Serialize(e.to_string()))?;
    write_text(&(text + "\n"), out)
}

pub fn write_jsonl(lines: impl IntoIterator<Item = Value>, out: &Path) -> Result<(), CliError> {
    let mut text = String::new();
    for v in lines {
        text.push_str(&serde_json::to_string(&canonical(v)).map_err(|e| CliError::Serialize(e.to_string()))?);
        text.push('\n');
    }
    write_text(&text, Some(out))
}

pub fn write_plain(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    write_text(text, out)
}
