use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{parse_error, read_to_string, write_atomic};
use crate::manifest::DatasetManifest;
use crate::sampling::{identity_soft_label, score_identity};

pub const PROTOCOL_MAGIC: &str = "#fairkd-protocol v1";
const COLUMNS: &str = "group\tsample_a\tsample_b\tsame";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolPair {
    pub sample_a: String,
    pub sample_b: String,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupProtocol {
    pub name: String,
    pub pairs: Vec<ProtocolPair>,
}

impl GroupProtocol {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    pub fn negatives(&self) -> usize {
        self.pairs.len() - self.positives()
    }
}

/// Per-group verification pairs. Group `g` draws only from identities whose
/// dominant soft label is `g`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairProtocol {
    pub groups: Vec<GroupProtocol>,
    pub meta: BTreeMap<String, String>,
}

impl PairProtocol {
    /// Balance and uniqueness checks that need no manifest.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "protocol group `{}` repeated",
                    g.name
                )));
            }
            if g.positives() != g.negatives() {
                return Err(Error::InvalidManifest(format!(
                    "group `{}` has {} positive and {} negative pairs",
                    g.name,
                    g.positives(),
                    g.negatives()
                )));
            }
            let mut seen = HashSet::new();
            for p in &g.pairs {
                if p.sample_a == p.sample_b {
                    return Err(Error::InvalidManifest(format!(
                        "group `{}` pairs `{}` with itself",
                        g.name, p.sample_a
                    )));
                }
                let key = if p.sample_a < p.sample_b {
                    (p.sample_a.as_str(), p.sample_b.as_str())
                } else {
                    (p.sample_b.as_str(), p.sample_a.as_str())
                };
                if !seen.insert(key) {
                    return Err(Error::InvalidManifest(format!(
                        "group `{}` repeats pair ({}, {})",
                        g.name, key.0, key.1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full invariant check: balance, uniqueness, group closure, and that
    /// `same` agrees with the identities in `manifest`.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<()> {
        self.validate()?;
        if self.groups.len() != manifest.groups {
            return Err(Error::ShapeMismatch(format!(
                "protocol has {} groups, manifest {}",
                self.groups.len(),
                manifest.groups
            )));
        }
        let mut identity_group = HashMap::new();
        for (id, entries) in manifest.by_identity() {
            let label = identity_soft_label(entries.iter().map(|e| e.soft_labels.as_slice()))?;
            identity_group.insert(id, score_identity(&label).0);
        }
        let mut sample = HashMap::new();
        for e in &manifest.entries {
            sample.insert(
                e.sample_id.as_str(),
                (
                    e.identity_id.as_str(),
                    identity_group[e.identity_id.as_str()],
                ),
            );
        }
        for (g, group) in self.groups.iter().enumerate() {
            for p in &group.pairs {
                let lookup = |id: &str| -> Result<(&str, usize)> {
                    sample
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::MissingSample(id.to_string()))
                };
                let (ia, ga) = lookup(&p.sample_a)?;
                let (ib, gb) = lookup(&p.sample_b)?;
                if ga != g || gb != g {
                    return Err(Error::InvalidManifest(format!(
                        "pair ({}, {}) leaves group `{}`",
                        p.sample_a, p.sample_b, group.name
                    )));
                }
                if (ia == ib) != p.same {
                    return Err(Error::InvalidManifest(format!(
                        "pair ({}, {}) is labelled same={} but identities are {ia} and {ib}",
                        p.sample_a, p.sample_b, p.same
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(PROTOCOL_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "#meta {k} {v}");
        }
        for g in &self.groups {
            let _ = writeln!(out, "#group {}", g.name);
        }
        out.push_str(COLUMNS);
        out.push('\n');
        for g in &self.groups {
            for p in &g.pairs {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    g.name,
                    p.sample_a,
                    p.sample_b,
                    u8::from(p.same)
                );
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(PROTOCOL_MAGIC) {
            return Err(parse_error(path, 1, format!("expected `{PROTOCOL_MAGIC}`")));
        }
        let mut protocol = PairProtocol::default();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut header_done = false;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if !header_done {
                if let Some(meta) = line.strip_prefix("#meta ") {
                    let (k, v) = meta.split_once(' ').unwrap_or((meta, ""));
                    protocol.meta.insert(k.into(), v.into());
                    continue;
                }
                if let Some(name) = line.strip_prefix("#group ") {
                    if index
                        .insert(name.to_string(), protocol.groups.len())
                        .is_some()
                    {
                        return Err(parse_error(
                            path,
                            lineno,
                            format!("group `{name}` declared twice"),
                        ));
                    }
                    protocol.groups.push(GroupProtocol {
                        name: name.to_string(),
                        pairs: Vec::new(),
                    });
                    continue;
                }
                if line == COLUMNS {
                    header_done = true;
                    continue;
                }
                return Err(parse_error(path, lineno, "unexpected header line"));
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [group, a, b, same] = f[..] else {
                return Err(parse_error(
                    path,
                    lineno,
                    format!("expected 4 fields, got {}", f.len()),
                ));
            };
            let g = *index
                .get(group)
                .ok_or_else(|| parse_error(path, lineno, format!("undeclared group `{group}`")))?;
            let same = match same {
                "1" => true,
                "0" => false,
                other => {
                    return Err(parse_error(
                        path,
                        lineno,
                        format!("same must be 0 or 1, got `{other}`"),
                    ))
                }
            };
            protocol.groups[g].pairs.push(ProtocolPair {
                sample_a: a.to_string(),
                sample_b: b.to_string(),
                same,
            });
        }
        if !header_done {
            return Err(parse_error(path, 1, "missing column header"));
        }
        Ok(protocol)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }
}
