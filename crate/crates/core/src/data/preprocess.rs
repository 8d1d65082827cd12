use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const CPM_SCALE: f64 = 1e6;
pub const PANEL_FILE: &str = "panel.json";

/// Counts per million: `1e6 · c_j / Σc`.
pub fn cpm(counts: &[u32]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return Err(Error::InvalidInput("spot has no counts".into()));
    }
    let total = total as f64;
    Ok(counts.iter().map(|&c| CPM_SCALE * c as f64 / total).collect())
}

/// `log(1 + cpm)`, the regression target before panel restriction.
pub fn cpm_log_normalize(counts: &[u32]) -> Result<Vec<f64>> {
    Ok(cpm(counts)?.into_iter().map(f64::ln_1p).collect())
}

/// The ordered gene set the model regresses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenePanel {
    pub genes: Vec<String>,
    pub seed: u64,
    pub n_top: usize,
    pub n_final: usize,
    pub union_size: usize,
    /// SHA-256 over the per-slide top lists.
    pub provenance: String,
}

impl GenePanel {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(PANEL_FILE);
        let mut json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(PANEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }
}

/// Population variance of every column of a spots × genes matrix.
pub fn column_variances(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Indices of the `n_top` highest-variance genes, ties broken by identifier.
pub fn top_variance(variances: &[f64], gene_ids: &[String], n_top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| {
        variances[b]
            .total_cmp(&variances[a])
            .then_with(|| gene_ids[a].cmp(&gene_ids[b]))
    });
    order.truncate(n_top);
    order
}

/// Per-slide top-variance union followed by a seeded uniform subsample.
///
/// `slides` pairs a slide id with its normalized spots × genes matrix over
/// the full gene universe. The panel keeps universe order.
pub fn select_genes_from(
    gene_ids: &[String],
    slides: &[(String, Vec<Vec<f64>>)],
    n_top: usize,
    n_final: usize,
    seed: u64,
) -> Result<GenePanel> {
    if n_final == 0 {
        return Err(Error::InvalidConfig("n_final must be positive".into()));
    }
    let mut in_union = vec![false; gene_ids.len()];
    let mut hasher = Sha256::new();
    for (id, rows) in slides {
        if rows.iter().any(|r| r.len() != gene_ids.len()) {
            return Err(Error::InvalidInput(format!("slide {id}: row width differs from gene count")));
        }
        let top = top_variance(&column_variances(rows), gene_ids, n_top);
        hasher.update(id.as_bytes());
        for &j in &top {
            in_union[j] = true;
            hasher.update(b"\t");
            hasher.update(gene_ids[j].as_bytes());
        }
        hasher.update(b"\n");
    }
    let union: Vec<usize> = (0..gene_ids.len()).filter(|&j| in_union[j]).collect();
    if union.len() < n_final {
        return Err(Error::InvalidConfig(format!(
            "union of top-variance genes has {} members, fewer than the {n_final} requested",
            union.len()
        )));
    }
    let mut rng = stream(seed, Stream::GeneSelect);
    let mut picked = sample(&mut rng, union.len(), n_final).into_vec();
    picked.sort_unstable();
    Ok(GenePanel {
        genes: picked.into_iter().map(|i| gene_ids[union[i]].clone()).collect(),
        seed,
        n_top,
        n_final,
        union_size: union.len(),
        provenance: hex::encode(hasher.finalize()),
    })
}

/// Gene selection over the training-split slides of a corpus.
pub fn select_genes(corpus: &Corpus, n_top: usize, n_final: usize, seed: u64) -> Result<GenePanel> {
    let gene_ids = corpus.gene_ids()?;
    let mut slides = Vec::new();
    for wsi in corpus.slides(Split::Train) {
        let table = corpus.load_counts(&wsi.id)?;
        let mut rows = Vec::with_capacity(table.counts.len());
        for (spot, counts) in table.spot_ids.iter().zip(&table.counts) {
            match cpm_log_normalize(counts) {
                Ok(r) => rows.push(r),
                Err(_) => log::warn!("spot {spot} has no counts; excluded"),
            }
        }
        slides.push((wsi.id.clone(), rows));
    }
    if slides.is_empty() {
        return Err(Error::InvalidInput("corpus has no training slides".into()));
    }
    select_genes_from(&gene_ids, &slides, n_top, n_final, seed)
}
