//! Context data model and its canonical JSON encoding.
//!
//! A [`ContextElement`] is an entity reference plus a list of typed
//! attributes, each optionally carrying metadata. Every type validates its
//! invariants on construction and on deserialization, so values of these
//! types are always well formed.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Metadatum name carrying the measurement time in epoch milliseconds (UTC).
pub const TIMESTAMP: &str = "timestamp";
/// Metadatum name carrying the measurement unit.
pub const UNIT: &str = "unit";
/// Attribute name holding a `[lat, lon]` position.
pub const LOCATION: &str = "location";
/// Entity type wildcard accepted in query patterns.
pub const ANY_TYPE: &str = "*";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("invariant violated on `{field}`: {detail}")]
    InvariantViolation { field: String, detail: String },
}

impl ModelError {
    pub(crate) fn violation(field: &str, detail: impl Into<String>) -> Self {
        ModelError::InvariantViolation {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ModelError::InvariantViolation { field, .. } => Some(field),
            ModelError::MalformedJson(_) => None,
        }
    }
}

fn check_token(field: &str, s: &str) -> Result<(), ModelError> {
    if s.is_empty() {
        return Err(ModelError::violation(field, "must not be empty"));
    }
    if s.chars().any(char::is_whitespace) {
        return Err(ModelError::violation(field, "must not contain whitespace"));
    }
    Ok(())
}

/// Reference to one entity (literal id) or a family of entities (anchored
/// regular expression over ids).
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "RawEntityRef", into = "RawEntityRef")]
pub struct EntityRef {
    id: String,
    entity_type: String,
    is_pattern: bool,
    matcher: Option<Arc<Regex>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawEntityRef {
    id: String,
    #[serde(rename = "type")]
    entity_type: String,
    #[serde(default)]
    is_pattern: bool,
}

impl TryFrom<RawEntityRef> for EntityRef {
    type Error = ModelError;

    fn try_from(raw: RawEntityRef) -> Result<Self, Self::Error> {
        if raw.is_pattern {
            EntityRef::pattern(raw.id, raw.entity_type)
        } else {
            EntityRef::new(raw.id, raw.entity_type)
        }
    }
}

impl From<EntityRef> for RawEntityRef {
    fn from(e: EntityRef) -> Self {
        RawEntityRef {
            id: e.id,
            entity_type: e.entity_type,
            is_pattern: e.is_pattern,
        }
    }
}

impl EntityRef {
    /// A literal entity reference.
    pub fn new(id: impl Into<String>, entity_type: impl Into<String>) -> Result<Self, ModelError> {
        let (id, entity_type) = (id.into(), entity_type.into());
        check_token("id", &id)?;
        check_token("type", &entity_type)?;
        Ok(EntityRef {
            id,
            entity_type,
            is_pattern: false,
            matcher: None,
        })
    }

    /// A pattern reference; `id` is a regular expression matched against
    /// the whole entity id.
    pub fn pattern(id: impl Into<String>, entity_type: impl Into<String>) -> Result<Self, ModelError> {
        let (id, entity_type) = (id.into(), entity_type.into());
        check_token("id", &id)?;
        check_token("type", &entity_type)?;
        let re = Regex::new(&format!("^(?:{id})$"))
            .map_err(|e| ModelError::violation("id", format!("invalid pattern: {e}")))?;
        Ok(EntityRef {
            id,
            entity_type,
            is_pattern: true,
            matcher: Some(Arc::new(re)),
        })
    }

    /// Pattern matching every entity of the given type (`"*"` for any type).
    pub fn any_of_type(entity_type: impl Into<String>) -> Result<Self, ModelError> {
        Self::pattern(".*", entity_type)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entity_type(&self) -> &str {
        &self.entity_type
    }

    pub fn is_pattern(&self) -> bool {
        self.is_pattern
    }

    pub fn type_matches(&self, entity_type: &str) -> bool {
        self.entity_type == ANY_TYPE || self.entity_type == entity_type
    }

    pub fn id_matches(&self, id: &str) -> bool {
        match &self.matcher {
            Some(re) => re.is_match(id),
            None => self.id == id,
        }
    }

    /// Whether the concrete entity `(id, entity_type)` is covered by this reference.
    pub fn matches(&self, id: &str, entity_type: &str) -> bool {
        self.type_matches(entity_type) && self.id_matches(id)
    }

    /// Conservative overlap test between two references.
    ///
    /// Types must be equal (or either a wildcard). A literal is tested against
    /// the other side's pattern; two patterns are assumed to overlap.
    pub fn intersects(&self, other: &EntityRef) -> bool {
        let types = self.entity_type == ANY_TYPE
            || other.entity_type == ANY_TYPE
            || self.entity_type == other.entity_type;
        if !types {
            return false;
        }
        match (self.is_pattern, other.is_pattern) {
            (false, false) => self.id == other.id,
            (true, false) => self.id_matches(&other.id),
            (false, true) => other.id_matches(&self.id),
            (true, true) => true,
        }
    }

    fn key(&self) -> (&str, &str, bool) {
        (&self.entity_type, &self.id, self.is_pattern)
    }
}

impl PartialEq for EntityRef {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for EntityRef {}

impl Hash for EntityRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

impl PartialOrd for EntityRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EntityRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Debug for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pattern {
            write!(f, "{}~/{}/", self.entity_type, self.id)
        } else {
            write!(f, "{}:{}", self.entity_type, self.id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetadatum", into = "RawMetadatum")]
pub struct Metadatum {
    name: String,
    md_type: String,
    value: Value,
}

#[derive(Serialize, Deserialize)]
struct RawMetadatum {
    name: String,
    #[serde(rename = "type", default)]
    md_type: String,
    value: Value,
}

impl TryFrom<RawMetadatum> for Metadatum {
    type Error = ModelError;

    fn try_from(raw: RawMetadatum) -> Result<Self, Self::Error> {
        Metadatum::new(raw.name, raw.md_type, raw.value)
    }
}

impl From<Metadatum> for RawMetadatum {
    fn from(m: Metadatum) -> Self {
        RawMetadatum {
            name: m.name,
            md_type: m.md_type,
            value: m.value,
        }
    }
}

impl Metadatum {
    pub fn new(name: impl Into<String>, md_type: impl Into<String>, value: Value) -> Result<Self, ModelError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ModelError::violation("metadata.name", "must not be empty"));
        }
        Ok(Metadatum {
            name,
            md_type: md_type.into(),
            value,
        })
    }

    pub fn timestamp(ms: u64) -> Self {
        Metadatum {
            name: TIMESTAMP.into(),
            md_type: "number".into(),
            value: Value::from(ms),
        }
    }

    pub fn unit(unit: impl Into<String>) -> Self {
        Metadatum {
            name: UNIT.into(),
            md_type: "string".into(),
            value: Value::String(unit.into()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn md_type(&self) -> &str {
        &self.md_type
    }

    pub fn value(&self) -> &Value {
        &self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttribute", into = "RawAttribute")]
pub struct ContextAttribute {
    name: String,
    attr_type: String,
    value: Value,
    metadata: Vec<Metadatum>,
}

#[derive(Serialize, Deserialize)]
struct RawAttribute {
    name: String,
    #[serde(rename = "type", default)]
    attr_type: String,
    value: Value,
    #[serde(default)]
    metadata: Vec<Metadatum>,
}

impl TryFrom<RawAttribute> for ContextAttribute {
    type Error = ModelError;

    fn try_from(raw: RawAttribute) -> Result<Self, Self::Error> {
        ContextAttribute::with_metadata(raw.name, raw.attr_type, raw.value, raw.metadata)
    }
}

impl From<ContextAttribute> for RawAttribute {
    fn from(a: ContextAttribute) -> Self {
        RawAttribute {
            name: a.name,
            attr_type: a.attr_type,
            value: a.value,
            metadata: a.metadata,
        }
    }
}

impl ContextAttribute {
    pub fn new(name: impl Into<String>, attr_type: impl Into<String>, value: Value) -> Result<Self, ModelError> {
        Self::with_metadata(name, attr_type, value, Vec::new())
    }

    pub fn with_metadata(
        name: impl Into<String>,
        attr_type: impl Into<String>,
        value: Value,
        metadata: Vec<Metadatum>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ModelError::violation("attributes.name", "must not be empty"));
        }
        for (i, m) in metadata.iter().enumerate() {
            if metadata[..i].iter().any(|o| o.name == m.name) {
                return Err(ModelError::violation(
                    "metadata",
                    format!("duplicate metadatum `{}` on attribute `{name}`", m.name),
                ));
            }
        }
        Ok(ContextAttribute {
            name,
            attr_type: attr_type.into(),
            value,
            metadata,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attr_type(&self) -> &str {
        &self.attr_type
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn metadata(&self) -> &[Metadatum] {
        &self.metadata
    }

    pub fn metadatum(&self, name: &str) -> Option<&Metadatum> {
        self.metadata.iter().find(|m| m.name == name)
    }

    /// Measurement time from the `timestamp` metadatum, if present and numeric.
    pub fn timestamp(&self) -> Option<u64> {
        let v = self.metadatum(TIMESTAMP)?.value();
        v.as_u64().or_else(|| v.as_f64().filter(|f| *f >= 0.0).map(|f| f as u64))
    }

    pub(crate) fn renamed(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// Same attribute with a different value; type and metadata are kept.
    pub fn with_value(mut self, value: Value) -> Self {
        self.value = value;
        self
    }
}

/// One entity with its attributes; the unit of update, query result and
/// notification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawElement", into = "RawElement")]
pub struct ContextElement {
    entity: EntityRef,
    attributes: Vec<ContextAttribute>,
}

#[derive(Serialize, Deserialize)]
struct RawElement {
    entity: EntityRef,
    #[serde(default)]
    attributes: Vec<ContextAttribute>,
}

impl TryFrom<RawElement> for ContextElement {
    type Error = ModelError;

    fn try_from(raw: RawElement) -> Result<Self, Self::Error> {
        ContextElement::new(raw.entity, raw.attributes)
    }
}

impl From<ContextElement> for RawElement {
    fn from(e: ContextElement) -> Self {
        RawElement {
            entity: e.entity,
            attributes: e.attributes,
        }
    }
}

impl ContextElement {
    pub fn new(entity: EntityRef, attributes: Vec<ContextAttribute>) -> Result<Self, ModelError> {
        if entity.is_pattern() {
            return Err(ModelError::violation("entity.isPattern", "element entity must be literal"));
        }
        if entity.entity_type() == ANY_TYPE {
            return Err(ModelError::violation("type", "element entity type must be concrete"));
        }
        for (i, a) in attributes.iter().enumerate() {
            if attributes[..i].iter().any(|o| o.name == a.name) {
                return Err(ModelError::violation(
                    "attributes",
                    format!("duplicate attribute `{}`", a.name),
                ));
            }
        }
        Ok(ContextElement { entity, attributes })
    }

    /// Shorthand for a literal entity with the given attributes.
    pub fn build(
        id: &str,
        entity_type: &str,
        attributes: Vec<ContextAttribute>,
    ) -> Result<Self, ModelError> {
        Self::new(EntityRef::new(id, entity_type)?, attributes)
    }

    pub fn entity(&self) -> &EntityRef {
        &self.entity
    }

    pub fn id(&self) -> &str {
        self.entity.id()
    }

    pub fn entity_type(&self) -> &str {
        self.entity.entity_type()
    }

    pub fn attributes(&self) -> &[ContextAttribute] {
        &self.attributes
    }

    pub fn attribute(&self, name: &str) -> Option<&ContextAttribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn into_parts(self) -> (EntityRef, Vec<ContextAttribute>) {
        (self.entity, self.attributes)
    }

    /// Overwrite (or append) the attribute with the same name.
    pub fn upsert(&mut self, attr: ContextAttribute) {
        match self.attributes.iter_mut().find(|a| a.name == attr.name) {
            Some(slot) => *slot = attr,
            None => self.attributes.push(attr),
        }
    }

    /// Copy restricted to the named attributes; an empty filter keeps all.
    pub fn project(&self, filter: &[String]) -> ContextElement {
        if filter.is_empty() {
            return self.clone();
        }
        ContextElement {
            entity: self.entity.clone(),
            attributes: self
                .attributes
                .iter()
                .filter(|a| filter.iter().any(|f| f == &a.name))
                .cloned()
                .collect(),
        }
    }
}

/// Axis-aligned WGS84 box, closed on every side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GeoBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, ModelError> {
        let b = GeoBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<(), ModelError> {
        let lat_ok = |v: f64| (-90.0..=90.0).contains(&v);
        let lon_ok = |v: f64| (-180.0..=180.0).contains(&v);
        if !(lat_ok(self.min_lat) && lat_ok(self.max_lat)) {
            return Err(ModelError::violation("scope.lat", "latitude outside [-90, 90]"));
        }
        if !(lon_ok(self.min_lon) && lon_ok(self.max_lon)) {
            return Err(ModelError::violation("scope.lon", "longitude outside [-180, 180]"));
        }
        if self.min_lat > self.max_lat || self.min_lon > self.max_lon {
            return Err(ModelError::violation("scope", "box minimum exceeds maximum"));
        }
        Ok(())
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }

    pub fn intersects(&self, other: &GeoBox) -> bool {
        self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
            && self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
    }

    pub fn covers(&self, other: &GeoBox) -> bool {
        self.min_lat <= other.min_lat
            && self.min_lon <= other.min_lon
            && self.max_lat >= other.max_lat
            && self.max_lon >= other.max_lon
    }
}

/// Restriction on where context comes from: a geographic box over the
/// `location` attribute, or a substring match over a named attribute or
/// metadatum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScope", into = "RawScope")]
pub enum Scope {
    GeoBox(GeoBox),
    StringMatch { target: String, value: String },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
enum RawScope {
    GeoBox(GeoBox),
    StringMatch { target: String, value: String },
}

impl TryFrom<RawScope> for Scope {
    type Error = ModelError;

    fn try_from(raw: RawScope) -> Result<Self, Self::Error> {
        match raw {
            RawScope::GeoBox(b) => {
                b.check()?;
                Ok(Scope::GeoBox(b))
            }
            RawScope::StringMatch { target, value } => {
                if target.is_empty() {
                    return Err(ModelError::violation("scope.target", "must not be empty"));
                }
                Ok(Scope::StringMatch { target, value })
            }
        }
    }
}

impl From<Scope> for RawScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::GeoBox(b) => RawScope::GeoBox(b),
            Scope::StringMatch { target, value } => RawScope::StringMatch { target, value },
        }
    }
}

impl Scope {
    pub fn geo_box(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, ModelError> {
        GeoBox::new(min_lat, min_lon, max_lat, max_lon).map(Scope::GeoBox)
    }

    pub fn string_match(target: impl Into<String>, value: impl Into<String>) -> Result<Self, ModelError> {
        let target = target.into();
        if target.is_empty() {
            return Err(ModelError::violation("scope.target", "must not be empty"));
        }
        Ok(Scope::StringMatch {
            target,
            value: value.into(),
        })
    }
}

/// JSON value rendered for substring tests: strings bare, everything else compact JSON.
pub fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `[lat, lon]` of the element's `location` attribute, when well formed.
pub fn location_of(e: &ContextElement) -> Option<(f64, f64)> {
    let arr = e.attribute(LOCATION)?.value().as_array()?;
    match arr.as_slice() {
        [lat, lon] => Some((lat.as_f64()?, lon.as_f64()?)),
        _ => None,
    }
}

/// Whether the element lies inside the scope. Missing fields never match.
pub fn scope_matches(scope: &Scope, e: &ContextElement) -> bool {
    match scope {
        Scope::GeoBox(b) => location_of(e).is_some_and(|(lat, lon)| b.contains(lat, lon)),
        Scope::StringMatch { target, value } => {
            if let Some(a) = e.attribute(target) {
                return render_value(a.value()).contains(value.as_str());
            }
            e.attributes()
                .iter()
                .filter_map(|a| a.metadatum(target))
                .any(|m| render_value(m.value()).contains(value.as_str()))
        }
    }
}

/// Serialize `v` as canonical JSON: object keys in lexicographic order, no
/// insignificant whitespace.
pub fn to_canonical_vec<T: Serialize>(v: &T) -> Vec<u8> {
    let value = serde_json::to_value(v).expect("model types always serialize");
    let mut out = Vec::with_capacity(128);
    write_canonical(&value, &mut out);
    out
}

pub fn to_canonical_string<T: Serialize>(v: &T) -> String {
    String::from_utf8(to_canonical_vec(v)).expect("JSON is UTF-8")
}

fn write_canonical(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, k).expect("in-memory write");
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("in-memory write"),
    }
}

pub fn encode_element(e: &ContextElement) -> Vec<u8> {
    to_canonical_vec(e)
}

/// Parse and validate an element. Syntax and shape errors are
/// `MalformedJson`; semantic errors name the offending field.
pub fn decode_element(bytes: &[u8]) -> Result<ContextElement, ModelError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| ModelError::MalformedJson(e.to_string()))?;
    element_from_value(value)
}

pub fn element_from_value(value: Value) -> Result<ContextElement, ModelError> {
    let raw: RawElement = from_value_typed(value)?;
    ContextElement::try_from(raw)
}

/// Deserialize while keeping invariant violations distinct from shape errors.
pub fn from_value_typed<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, ModelError> {
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("invariant violated on `") {
            Some(rest) => {
                let (field, detail) = rest.split_once("`: ").unwrap_or((rest, ""));
                ModelError::violation(field, detail.to_string())
            }
            None => ModelError::MalformedJson(msg),
        }
    })
}
