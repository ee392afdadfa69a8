//! Parameter files, output metadata and result files.

use crate::model::{CloneOrigin, MarrowState, ModelError, ModelParameters, ParameterValues};
use crate::protocol::{parse_protocol, Protocol, ProtocolError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The bundled reference parameter file.
pub const DEFAULT_PARAMS_JSON: &str = include_str!("../data/params.json");

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write `{path}`: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}:{column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: {source}")]
    Model {
        origin: String,
        #[source]
        source: ModelError,
    },
    #[error("{origin}: initial_state must be finite and nonnegative")]
    InitialState { origin: String },
    #[error("{origin}: {source}")]
    Protocol {
        origin: String,
        #[source]
        source: ProtocolError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "C3")]
    pub c3: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

impl From<InitialState> for MarrowState {
    fn from(s: InitialState) -> Self {
        MarrowState::new(s.c1, s.c2, s.c3, s.l)
    }
}

impl From<MarrowState> for InitialState {
    fn from(s: MarrowState) -> Self {
        Self {
            c1: s.c1,
            c2: s.c2,
            c3: s.c3,
            l: s.l,
        }
    }
}

/// On-disk parameter set: the model constants plus the starting marrow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub c0: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub k: f64,
    #[serde(rename = "gamma_L")]
    pub gamma_l: f64,
    #[serde(rename = "L_max")]
    pub l_max: f64,
    pub clone_origin: CloneOrigin,
    pub initial_state: InitialState,
}

impl ParamsFile {
    pub fn bundled() -> Self {
        parse_params(DEFAULT_PARAMS_JSON, "bundled params.json").expect("bundled parameter file is valid")
    }

    pub fn values(&self) -> ParameterValues {
        ParameterValues {
            c0: self.c0,
            rho1: self.rho1,
            rho2: self.rho2,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            k: self.k,
            gamma_l: self.gamma_l,
            l_max: self.l_max,
            clone_origin: self.clone_origin,
        }
    }

    pub fn parameters(&self) -> Result<ModelParameters, ModelError> {
        ModelParameters::new(self.values())
    }

    pub fn initial_state(&self) -> MarrowState {
        self.initial_state.into()
    }

    pub fn with_origin(mut self, origin: CloneOrigin) -> Self {
        self.clone_origin = origin;
        self
    }
}

/// Parses and validates a parameter file. `origin` names the source in errors.
pub fn parse_params(text: &str, origin: &str) -> Result<ParamsFile, IoError> {
    let file: ParamsFile = serde_json::from_str(text).map_err(|e| IoError::Parse {
        origin: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.parameters().map_err(|source| IoError::Model {
        origin: origin.to_string(),
        source,
    })?;
    let s = file.initial_state();
    if !(s.to_array().iter().all(|v| v.is_finite()) && s.is_nonnegative()) {
        return Err(IoError::InitialState {
            origin: origin.to_string(),
        });
    }
    Ok(file)
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_params(path: &Path) -> Result<ParamsFile, IoError> {
    parse_params(&read(path)?, &path.display().to_string())
}

pub fn load_protocol(path: &Path) -> Result<Protocol, IoError> {
    parse_protocol(&read(path)?).map_err(|source| IoError::Protocol {
        origin: path.display().to_string(),
        source,
    })
}

/// Provenance of one output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunMetadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    /// `(input name, SHA-256 hex)` pairs.
    pub digests: Vec<(String, String)>,
}

impl RunMetadata {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            tool: "lymphosim",
            version: TOOL_VERSION,
            command: command.to_string(),
            seed,
            digests: Vec::new(),
        }
    }

    pub fn with_digest(mut self, name: &str, digest: String) -> Self {
        self.digests.push((name.to_string(), digest));
        self
    }

    /// Single line for a `# `-prefixed CSV header.
    pub fn header_line(&self) -> String {
        let mut line = format!("{} {} command={} seed={}", self.tool, self.version, self.command, self.seed);
        for (name, d) in &self.digests {
            line.push_str(&format!(" {name}_sha256={d}"));
        }
        line
    }

    /// JSON form, embedded under a `metadata` key in JSON outputs.
    pub fn to_json(&self) -> serde_json::Value {
        let digests: serde_json::Map<String, serde_json::Value> =
            self.digests.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
        serde_json::json!({
            "tool": self.tool,
            "version": self.version,
            "command": self.command,
            "seed": self.seed,
            "sha256": digests,
        })
    }
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| IoError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Pretty JSON: `body` merged with a `metadata` object.
pub fn json_with_metadata(meta: &RunMetadata, body: serde_json::Value) -> String {
    let mut map = serde_json::Map::new();
    map.insert("metadata".into(), meta.to_json());
    match body {
        serde_json::Value::Object(o) => map.extend(o),
        other => {
            map.insert("result".into(), other);
        }
    }
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("JSON values serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_file_is_the_reference_set() {
        let f = ParamsFile::bundled();
        assert_eq!(f.values(), ParameterValues::reference(CloneOrigin::ProB));
        assert_eq!(f.initial_state(), MarrowState::reference_initial(1.0));
    }

    #[test]
    fn parse_errors_are_located() {
        let text = DEFAULT_PARAMS_JSON.replace("\"k\": 1e-10", "\"k\": \"x\"");
        match parse_params(&text, "p.json") {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let extra = DEFAULT_PARAMS_JSON.replacen('{', "{\n  \"rho3\": 1.0,", 1);
        assert!(matches!(parse_params(&extra, "p"), Err(IoError::Parse { .. })));
        let neg = DEFAULT_PARAMS_JSON.replace("\"alpha2\": 0.144", "\"alpha2\": -0.144");
        assert!(matches!(parse_params(&neg, "p"), Err(IoError::Model { .. })));
        let bad_state = DEFAULT_PARAMS_JSON.replace("\"L\": 1.0", "\"L\": -1.0");
        assert!(matches!(parse_params(&bad_state, "p"), Err(IoError::InitialState { .. })));
    }

    #[test]
    fn round_trip() {
        let f = ParamsFile::bundled();
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(parse_params(&text, "rt").unwrap(), f);
    }

    #[test]
    fn header_and_json_metadata_agree() {
        let m = RunMetadata::new("grow", 7).with_digest("params", "ab".into());
        assert_eq!(m.header_line(), format!("lymphosim {TOOL_VERSION} command=grow seed=7 params_sha256=ab"));
        let j: serde_json::Value = serde_json::from_str(&json_with_metadata(&m, serde_json::json!({"x": 1}))).unwrap();
        assert_eq!(j["metadata"]["sha256"]["params"], "ab");
        assert_eq!(j["x"], 1);
    }
}
