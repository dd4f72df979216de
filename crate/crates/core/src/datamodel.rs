//! Harmonized data models: synonym renaming and required-attribute checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContextElement, ModelError};

#[derive(Debug, Error)]
pub enum DataModelError {
    #[error("renaming `{raw}` to `{canonical}` collides with an existing attribute")]
    SynonymCollision { raw: String, canonical: String },
    #[error("invalid data model `{model}`: {detail}")]
    InvalidModel { model: String, detail: String },
    #[error("cannot read models from {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredAttribute {
    pub name: String,
    #[serde(rename = "type")]
    pub attr_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct DataModel {
    name: String,
    required: Vec<RequiredAttribute>,
    synonyms: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawModel {
    name: String,
    #[serde(default)]
    required_attributes: Vec<RequiredAttribute>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
}

impl TryFrom<RawModel> for DataModel {
    type Error = DataModelError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        DataModel::new(raw.name, raw.required_attributes, raw.synonyms)
    }
}

impl From<DataModel> for RawModel {
    fn from(m: DataModel) -> Self {
        RawModel {
            name: m.name,
            required_attributes: m.required,
            synonyms: m.synonyms,
        }
    }
}

impl DataModel {
    pub fn new(
        name: impl Into<String>,
        required: Vec<RequiredAttribute>,
        synonyms: BTreeMap<String, String>,
    ) -> Result<Self, DataModelError> {
        let name = name.into();
        let invalid = |detail: String| DataModelError::InvalidModel {
            model: name.clone(),
            detail,
        };
        if name.is_empty() {
            return Err(invalid("empty model name".into()));
        }
        for (raw, canonical) in &synonyms {
            if synonyms.contains_key(canonical) {
                return Err(invalid(format!(
                    "synonym `{raw}` maps to `{canonical}`, which is itself a synonym"
                )));
            }
        }
        for r in &required {
            if synonyms.contains_key(&r.name) {
                return Err(invalid(format!("required attribute `{}` is not canonical", r.name)));
            }
        }
        Ok(DataModel {
            name,
            required,
            synonyms,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn required(&self) -> &[RequiredAttribute] {
        &self.required
    }

    pub fn synonyms(&self) -> &BTreeMap<String, String> {
        &self.synonyms
    }

    /// Canonical name for `attr`; names that are not synonym keys map to themselves.
    pub fn canonical<'a>(&'a self, attr: &'a str) -> &'a str {
        self.synonyms.get(attr).map(String::as_str).unwrap_or(attr)
    }
}

/// Rename every synonym attribute to its canonical name, leaving values and
/// metadata untouched.
pub fn harmonize(e: &ContextElement, m: &DataModel) -> Result<ContextElement, DataModelError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(e.attributes().len());
    for a in e.attributes() {
        let canonical = m.canonical(a.name());
        if !seen.insert(canonical.to_string()) {
            return Err(DataModelError::SynonymCollision {
                raw: a.name().to_string(),
                canonical: canonical.to_string(),
            });
        }
        out.push(if canonical == a.name() {
            a.clone()
        } else {
            a.clone().renamed(canonical)
        });
    }
    // `seen` already guarantees unique names.
    ContextElement::new(e.entity().clone(), out).map_err(|err: ModelError| {
        DataModelError::InvalidModel {
            model: m.name.clone(),
            detail: err.to_string(),
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidationReport {
    pub missing: Vec<String>,
    pub type_mismatches: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.type_mismatches.is_empty()
    }
}

pub fn validate(e: &ContextElement, m: &DataModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    for r in &m.required {
        match e.attribute(&r.name) {
            None => report.missing.push(r.name.clone()),
            Some(a) if a.attr_type() != r.attr_type => report.type_mismatches.push(r.name.clone()),
            Some(_) => {}
        }
    }
    report
}

/// Set of models addressable by name.
#[derive(Debug, Clone, Default)]
pub struct ModelCatalog {
    models: BTreeMap<String, DataModel>,
}

impl ModelCatalog {
    pub fn new(models: impl IntoIterator<Item = DataModel>) -> Self {
        ModelCatalog {
            models: models.into_iter().map(|m| (m.name.clone(), m)).collect(),
        }
    }

    /// Load every `*.json` file of `dir` as one model.
    pub fn load_dir(dir: &Path) -> Result<Self, DataModelError> {
        let io = |detail: String| DataModelError::Io {
            path: dir.display().to_string(),
            detail,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| io(e.to_string()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut models = Vec::new();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| io(e.to_string()))?;
            let model: DataModel = serde_json::from_str(&text).map_err(|e| DataModelError::InvalidModel {
                model: p.display().to_string(),
                detail: e.to_string(),
            })?;
            models.push(model);
        }
        Ok(Self::new(models))
    }

    pub fn get(&self, name: &str) -> Option<&DataModel> {
        self.models.get(name)
    }

    pub fn insert(&mut self, m: DataModel) {
        self.models.insert(m.name.clone(), m);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}
