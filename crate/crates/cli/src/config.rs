use std::path::{Path, PathBuf};

use csa2sls::simulation::SubsetDraws;
use csa2sls::DatasetSchema;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Schema given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Inline(DatasetSchema),
    File(PathBuf),
}

/// Parameters of one run. Read from `--config` and then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<SchemaSource>,
    pub methods: Option<Vec<String>>,
    pub lambda: Option<Vec<f64>>,
    pub subsets_r: Option<SubsetDraws>,
    pub seed: Option<u64>,
    pub fixed_k: Option<usize>,
    pub preliminary_k: Option<usize>,
    pub cluster_col: Option<String>,
    pub level: Option<f64>,
    pub reps: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    /// Population quantities for the oracle column of `criterion`.
    pub truth: Option<PathBuf>,
    /// Design grid for `simulate`.
    pub design: Option<Map<String, Value>>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $(if $top.$field.is_some() { $base.$field = $top.$field; })*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Fields set in `top` replace those in `self`; design keys merge one by one.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        let design = match (self.design.take(), top.design.clone()) {
            (Some(mut base), Some(over)) => {
                base.extend(over);
                Some(base)
            }
            (base, over) => over.or(base),
        };
        overlay!(
            self,
            top,
            data,
            schema,
            methods,
            lambda,
            subsets_r,
            seed,
            fixed_k,
            preliminary_k,
            cluster_col,
            level,
            reps,
            jobs,
            out,
            truth
        );
        self.design = design;
        self
    }

    /// SHA-256 of the canonical JSON form, leaving out the output directory.
    pub fn hash(&self) -> String {
        let keyed = RunConfig {
            out: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&keyed).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("an output directory is required (--out)".into()))
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Config("a data file is required (--data)".into()))
    }

    /// The schema with the cluster override applied.
    pub fn resolve_schema(&self) -> Result<DatasetSchema, CliError> {
        let mut schema = match &self.schema {
            None => return Err(CliError::Config("a schema is required (--schema)".into())),
            Some(SchemaSource::Inline(s)) => s.clone(),
            Some(SchemaSource::File(path)) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read schema {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("schema {}: {e}", path.display())))?
            }
        };
        if let Some(c) = &self.cluster_col {
            schema.cluster = Some(c.clone());
        }
        schema
            .check()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(schema)
    }
}
