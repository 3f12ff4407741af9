//! JSON and CSV emission. JSON documents are flat objects (scalars and
//! arrays of scalars); CSV floats carry 17 significant digits.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::config::{emit_config, ExperimentConfig};
use crate::CliError;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Builder for a flat JSON object with provenance fields.
pub struct Json(Map<String, Value>);

impl Json {
    pub fn new(command: &str, config: Option<&ExperimentConfig>, seed: u64) -> Self {
        let mut m = Map::new();
        m.insert("command".into(), command.into());
        m.insert("version".into(), VERSION.into());
        m.insert("seed".into(), seed.into());
        if let Some(c) = config {
            m.insert("config".into(), emit_config(c).into());
        }
        Self(m)
    }

    pub fn num(&mut self, key: &str, v: f64) -> &mut Self {
        self.0.insert(key.into(), float(v));
        self
    }

    pub fn int(&mut self, key: &str, v: u64) -> &mut Self {
        self.0.insert(key.into(), v.into());
        self
    }

    pub fn flag(&mut self, key: &str, v: bool) -> &mut Self {
        self.0.insert(key.into(), v.into());
        self
    }

    pub fn text(&mut self, key: &str, v: &str) -> &mut Self {
        self.0.insert(key.into(), v.into());
        self
    }

    pub fn nums(&mut self, key: &str, v: &[f64]) -> &mut Self {
        self.0.insert(
            key.into(),
            Value::Array(v.iter().map(|x| float(*x)).collect()),
        );
        self
    }

    pub fn opt(&mut self, key: &str, v: Option<f64>) -> &mut Self {
        self.0.insert(key.into(), v.map_or(Value::Null, float));
        self
    }

    pub fn to_string_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("flat JSON serialises")
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_text(path, &(self.to_string_pretty() + "\n"))
    }
}

/// Non-finite numbers become `null`.
fn float(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// 17 significant digits, `NaN`/`inf` spelled as such.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}
