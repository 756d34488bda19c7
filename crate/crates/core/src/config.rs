//! Experiment configuration files (TOML, with JSON as a fallback).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{StudyConfig, StudyMode};
use crate::coeff::FieldDescriptor;
use crate::error::{MsfemError, Result};
use crate::fem::Source;
use crate::mesh::Rect;
use crate::msfem::Normalization;

/// Parses `text` as TOML or JSON. The extension decides when known,
/// otherwise TOML is tried first.
pub fn parse_config<T: DeserializeOwned>(text: &str, extension: Option<&str>) -> Result<T> {
    let json = |t: &str| serde_json::from_str::<T>(t).map_err(|e| MsfemError::Parse(format!("invalid JSON config: {e}")));
    let toml = |t: &str| toml::from_str::<T>(t).map_err(|e| MsfemError::Parse(format!("invalid TOML config: {e}")));
    match extension.map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("json") => json(text),
        Some("toml") => toml(text),
        _ => toml(text).or_else(|te| {
            if text.trim_start().starts_with('{') {
                json(text)
            } else {
                Err(te)
            }
        }),
    }
}

/// Config document as canonical JSON (keys sorted), for hashing.
pub fn canonical_json(text: &str, extension: Option<&str>) -> Result<String> {
    let value: serde_json::Value = parse_config(text, extension)?;
    serde_json::to_string(&value).map_err(|e| MsfemError::Parse(e.to_string()))
}

pub trait HasField {
    fn field_mut(&mut self) -> &mut FieldDescriptor;
}

/// Reads a config file; relative data paths inside it resolve against its directory.
pub fn load_config<T: DeserializeOwned + HasField>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MsfemError::Parse(format!("cannot read config {}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str());
    let mut cfg: T = parse_config(&text, ext)?;
    if let Some(dir) = path.parent() {
        cfg.field_mut().resolve_paths(dir);
    }
    Ok(cfg)
}

fn default_n_cell() -> usize {
    crate::cell::DEFAULT_N_CELL
}
fn default_samples() -> usize {
    32
}
fn default_dilation() -> f64 {
    2.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_mode() -> StudyMode {
    StudyMode::Oversampled
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub field: FieldDescriptor,
    #[serde(default = "default_n_cell")]
    pub n_cell: usize,
    /// Sample points (grid and random) for the ellipticity checks.
    #[serde(default = "default_samples")]
    pub ellipticity_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub field: FieldDescriptor,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub domain: Rect,
    pub h: f64,
    pub eps: f64,
    #[serde(default = "default_mode")]
    pub mode: StudyMode,
    #[serde(default = "default_dilation")]
    pub dilation: f64,
    #[serde(default)]
    pub normalization: Normalization,
    /// Fine element diameter inside each coarse element; `eps / 8` if unset.
    #[serde(default)]
    pub fine_target_h: Option<f64>,
    /// Explicit refinement depth of the coarse elements.
    #[serde(default)]
    pub levels: Option<usize>,
    #[serde(default = "default_n_cell")]
    pub n_cell: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Write the solution interpolated on the fine grid.
    #[serde(default = "default_true")]
    pub write_fine: bool,
    #[serde(default)]
    pub seed: u64,
}

impl HasField for CellConfig {
    fn field_mut(&mut self) -> &mut FieldDescriptor {
        &mut self.field
    }
}

impl HasField for SolveConfig {
    fn field_mut(&mut self) -> &mut FieldDescriptor {
        &mut self.field
    }
}

impl HasField for StudyConfig {
    fn field_mut(&mut self) -> &mut FieldDescriptor {
        &mut self.field
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CELL_TOML: &str = "n_cell = 32\n[field]\nkind = \"laminate\"\na1 = 1.0\na2 = 4.0\n";

    #[test]
    fn toml_and_json_agree() {
        let a: CellConfig = parse_config(CELL_TOML, Some("toml")).unwrap();
        let json = r#"{"field": {"kind": "laminate", "a1": 1.0, "a2": 4.0}, "n_cell": 32}"#;
        let b: CellConfig = parse_config(json, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_cell, 32);
    }

    #[test]
    fn canonical_form_ignores_key_order() {
        let reordered = "[field]\na2 = 4.0\nkind = \"laminate\"\na1 = 1.0\n\n";
        let reordered = format!("n_cell = 32\n{reordered}");
        assert_eq!(
            canonical_json(CELL_TOML, Some("toml")).unwrap(),
            canonical_json(&reordered, Some("toml")).unwrap()
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config::<CellConfig>("n_cells = 3\n[field]\nkind = \"checkerboard\"\na1 = 1\na2 = 2\n", None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("n_cells"), "{err}");
    }

    #[test]
    fn sampled_grid_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "1\n2\n3\n4\n").unwrap();
        let cfg_path = dir.path().join("cell.toml");
        std::fs::write(&cfg_path, "[field]\nkind = \"sampled_grid\"\nn = 2\npath = \"a.csv\"\n").unwrap();
        let cfg: CellConfig = load_config(&cfg_path).unwrap();
        let field = cfg.field.build().unwrap();
        assert_eq!(field.m(), 1);
    }
}
