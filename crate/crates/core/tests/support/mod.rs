#![allow(dead_code)]

pub mod finite_diff;
pub mod gradcheck;
pub mod props;

use fairkd::manifest::{DatasetManifest, ManifestEntry, Source};

/// One identity for a hand-built manifest.
#[derive(Debug, Clone)]
pub struct IdentitySpec {
    pub id: String,
    pub source: Source,
    pub labels: Vec<f64>,
    pub images: usize,
}

pub fn normalized(raw: &[f64]) -> Vec<f64> {
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|x| x / sum).collect()
}

pub fn build_manifest(name: &str, groups: usize, ids: &[IdentitySpec]) -> DatasetManifest {
    let mut m = DatasetManifest::new(name, groups);
    for spec in ids {
        for k in 0..spec.images {
            let sample_id = format!("{}-{k:03}", spec.id);
            m.entries.push(ManifestEntry {
                payload_ref: format!("{name}.features.tsv#{sample_id}"),
                sample_id,
                identity_id: spec.id.clone(),
                source: spec.source,
                soft_labels: spec.labels.clone(),
            });
        }
    }
    m
}
