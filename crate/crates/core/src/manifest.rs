//! Dataset manifests and the feature store behind their payload references.
//!
//! Manifest file layout (UTF-8, tab-separated, one record per line):
//!
//! ```text
//! #fairkd-manifest v1
//! #name <name>
//! #groups <G>
//! #meta <key> <value>
//! #stat group=<g> source=<real|synthetic> identities=<n> images=<n>
//! #shortfall group=<g> source=<real|synthetic|any> requested=<n> available=<n>
//! sample_id	identity_id	source	soft_labels	payload_ref
//! <records...>
//! ```
//!
//! `soft_labels` is a comma-separated probability vector of length G.
//! `#stat` lines are derived on write and ignored on read.
//!
//! Feature files hold the payloads:
//!
//! ```text
//! #fairkd-features v1
//! #dim <D>
//! <sample_id>	<v1,v2,...>
//! ```
//!
//! and a payload reference reads `<feature file name>#<sample_id>`, resolved
//! relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Sample;
use crate::io::{format_floats, parse_error, parse_floats, read_to_string, write_atomic};

pub const MANIFEST_MAGIC: &str = "#fairkd-manifest v1";
pub const FEATURES_MAGIC: &str = "#fairkd-features v1";
const COLUMNS: &str = "sample_id\tidentity_id\tsource\tsoft_labels\tpayload_ref";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Source::Real),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub identity_id: String,
    pub source: Source,
    pub soft_labels: Vec<f64>,
    pub payload_ref: String,
}

/// A group quota that could not be filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub group: usize,
    /// `None` when the quota covers both sources.
    pub source: Option<Source>,
    pub requested: usize,
    pub available: usize,
}

impl std::fmt::Display for Shortfall {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "group={} source={} requested={} available={}",
            self.group,
            self.source.map_or("any", Source::as_str),
            self.requested,
            self.available
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub groups: usize,
    pub entries: Vec<ManifestEntry>,
    /// Free-form provenance (config digest, tool version, ...), kept sorted.
    pub meta: BTreeMap<String, String>,
    pub shortfalls: Vec<Shortfall>,
}

const LABEL_SUM_TOL: f64 = 1e-6;

impl DatasetManifest {
    pub fn new(name: impl Into<String>, groups: usize) -> Self {
        DatasetManifest {
            name: name.into(),
            groups,
            entries: Vec::new(),
            meta: BTreeMap::new(),
            shortfalls: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Identities in order of first appearance; position is the class index.
    pub fn identities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.identity_id.as_str()))
            .map(|e| e.identity_id.as_str())
            .collect()
    }

    pub fn class_indices(&self) -> HashMap<&str, usize> {
        self.identities()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    /// Entries grouped by identity, identities in first-appearance order.
    pub fn by_identity(&self) -> Vec<(&str, Vec<&ManifestEntry>)> {
        let idx = self.class_indices();
        let mut out: Vec<(&str, Vec<&ManifestEntry>)> = self
            .identities()
            .into_iter()
            .map(|id| (id, Vec::new()))
            .collect();
        for e in &self.entries {
            out[idx[e.identity_id.as_str()]].1.push(e);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidManifest(format!("{}: {m}", self.name)));
        if self.groups == 0 {
            return bad("group count must be positive".into());
        }
        let mut ids = HashSet::new();
        let mut sources: HashMap<&str, Source> = HashMap::new();
        for e in &self.entries {
            if e.sample_id.is_empty() || e.identity_id.is_empty() {
                return bad("empty sample or identity id".into());
            }
            if !ids.insert(e.sample_id.as_str()) {
                return bad(format!("duplicate sample_id `{}`", e.sample_id));
            }
            if e.soft_labels.len() != self.groups {
                return bad(format!(
                    "sample `{}` has {} soft labels, expected {}",
                    e.sample_id,
                    e.soft_labels.len(),
                    self.groups
                ));
            }
            if e.soft_labels.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return bad(format!(
                    "sample `{}` has a negative soft label",
                    e.sample_id
                ));
            }
            let sum: f64 = e.soft_labels.iter().sum();
            if (sum - 1.0).abs() > LABEL_SUM_TOL {
                return bad(format!("sample `{}` soft labels sum to {sum}", e.sample_id));
            }
            match sources.insert(e.identity_id.as_str(), e.source) {
                Some(prev) if prev != e.source => {
                    return bad(format!("identity `{}` mixes sources", e.identity_id));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_MAGIC);
        out.push('\n');
        let _ = writeln!(out, "#name {}", self.name);
        let _ = writeln!(out, "#groups {}", self.groups);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "#meta {k} {v}");
        }
        let stats = crate::sampling::manifest_stats(self);
        for ((g, src), c) in &stats.cells {
            let _ = writeln!(
                out,
                "#stat group={g} source={src} identities={} images={}",
                c.identities, c.images
            );
        }
        for s in &self.shortfalls {
            let _ = writeln!(out, "#shortfall {s}");
        }
        out.push_str(COLUMNS);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.sample_id,
                e.identity_id,
                e.source,
                format_floats(&e.soft_labels),
                e.payload_ref
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MANIFEST_MAGIC => {}
            _ => {
                return Err(parse_error(
                    path,
                    1,
                    format!("expected `{MANIFEST_MAGIC}` header"),
                ))
            }
        }
        let mut m = DatasetManifest::new("", 0);
        let mut seen_columns = false;
        for (i, raw) in lines {
            let lineno = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                match key {
                    "name" => m.name = value.to_string(),
                    "groups" => {
                        m.groups = value
                            .parse()
                            .map_err(|_| parse_error(path, lineno, "bad #groups"))?
                    }
                    "meta" => {
                        let (k, v) = value.split_once(' ').unwrap_or((value, ""));
                        m.meta.insert(k.to_string(), v.to_string());
                    }
                    "shortfall" => m
                        .shortfalls
                        .push(parse_shortfall(value).map_err(|r| parse_error(path, lineno, r))?),
                    _ => {}
                }
                continue;
            }
            if !seen_columns {
                if line != COLUMNS {
                    return Err(parse_error(path, lineno, "missing column header"));
                }
                seen_columns = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(parse_error(
                    path,
                    lineno,
                    format!("expected 5 fields, found {}", fields.len()),
                ));
            }
            m.entries.push(ManifestEntry {
                sample_id: fields[0].to_string(),
                identity_id: fields[1].to_string(),
                source: fields[2]
                    .parse()
                    .map_err(|r: String| parse_error(path, lineno, r))?,
                soft_labels: parse_floats(fields[3]).map_err(|r| parse_error(path, lineno, r))?,
                payload_ref: fields[4].to_string(),
            });
        }
        if !seen_columns {
            return Err(parse_error(
                path,
                text.lines().count(),
                "missing column header",
            ));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }
}

fn parse_shortfall(text: &str) -> std::result::Result<Shortfall, String> {
    let mut group = None;
    let mut source = None;
    let mut requested = None;
    let mut available = None;
    for kv in text.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("bad shortfall field `{kv}`"))?;
        let num = || {
            v.parse::<usize>()
                .map_err(|_| format!("bad number in `{kv}`"))
        };
        match k {
            "group" => group = Some(num()?),
            "source" => source = Some(if v == "any" { None } else { Some(v.parse()?) }),
            "requested" => requested = Some(num()?),
            "available" => available = Some(num()?),
            _ => return Err(format!("unknown shortfall field `{k}`")),
        }
    }
    match (group, source, requested, available) {
        (Some(group), Some(source), Some(requested), Some(available)) => Ok(Shortfall {
            group,
            source,
            requested,
            available,
        }),
        _ => Err("incomplete shortfall line".into()),
    }
}

/// Feature vectors keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    features: HashMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            features: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, feature: Vec<f64>) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: feature.len(),
            });
        }
        self.features.insert(sample_id.into(), feature);
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Result<&[f64]> {
        self.features
            .get(sample_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingSample(sample_id.to_string()))
    }

    pub fn merge(&mut self, other: FeatureStore) -> Result<()> {
        if !other.is_empty() && !self.is_empty() && other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        if self.is_empty() {
            self.dim = other.dim;
        }
        self.features.extend(other.features);
        Ok(())
    }

    /// Serializes the features of `ids`, in that order.
    pub fn to_text<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<String> {
        self.to_text_with_meta(ids, &BTreeMap::new())
    }

    /// As [`FeatureStore::to_text`], with `#meta` provenance lines.
    pub fn to_text_with_meta<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
        meta: &BTreeMap<String, String>,
    ) -> Result<String> {
        let mut out = String::new();
        out.push_str(FEATURES_MAGIC);
        out.push('\n');
        for (k, v) in meta {
            let _ = writeln!(out, "#meta {k} {v}");
        }
        let _ = writeln!(out, "#dim {}", self.dim);
        for id in ids {
            let _ = writeln!(out, "{id}\t{}", format_floats(self.get(id)?));
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == FEATURES_MAGIC => {}
            _ => {
                return Err(parse_error(
                    path,
                    1,
                    format!("expected `{FEATURES_MAGIC}` header"),
                ))
            }
        }
        let mut store: Option<FeatureStore> = None;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(d) = line.strip_prefix("#dim ") {
                let dim = d
                    .parse()
                    .map_err(|_| parse_error(path, lineno, "bad #dim"))?;
                store = Some(FeatureStore::new(dim));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let s = store
                .as_mut()
                .ok_or_else(|| parse_error(path, lineno, "features before #dim"))?;
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| parse_error(path, lineno, "expected `id<TAB>values`"))?;
            let v = parse_floats(values).map_err(|r| parse_error(path, lineno, r))?;
            s.insert(id, v)
                .map_err(|e| parse_error(path, lineno, e.to_string()))?;
        }
        store.ok_or_else(|| parse_error(path, 1, "missing #dim"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }

    /// Loads every feature file the manifest's payload references point to.
    pub fn resolve(manifest: &DatasetManifest, base_dir: &Path) -> Result<Self> {
        let mut files: BTreeMap<PathBuf, ()> = BTreeMap::new();
        for e in &manifest.entries {
            let (file, _) = split_payload_ref(&e.payload_ref)?;
            files.insert(base_dir.join(file), ());
        }
        let mut store = FeatureStore::default();
        for path in files.keys() {
            store.merge(FeatureStore::read(path)?)?;
        }
        for e in &manifest.entries {
            let (_, id) = split_payload_ref(&e.payload_ref)?;
            if id != e.sample_id {
                store
                    .features
                    .insert(e.sample_id.clone(), store.get(id)?.to_vec());
            }
        }
        Ok(store)
    }

    /// Samples with dense class indices in manifest identity order.
    pub fn samples(&self, manifest: &DatasetManifest) -> Result<Vec<Sample>> {
        let idx = manifest.class_indices();
        manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    sample_id: e.sample_id.clone(),
                    identity_id: e.identity_id.clone(),
                    feature: self.get(&e.sample_id)?.to_vec(),
                    label: idx[e.identity_id.as_str()],
                })
            })
            .collect()
    }
}

pub fn split_payload_ref(payload_ref: &str) -> Result<(&str, &str)> {
    payload_ref
        .rsplit_once('#')
        .filter(|(f, id)| !f.is_empty() && !id.is_empty())
        .ok_or_else(|| Error::InvalidManifest(format!("bad payload reference `{payload_ref}`")))
}
