use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::heatmap::{emit_heatmap_grid, Series, StMapGrid};
use super::pca::fit_pca_1d;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::train::{read_matrix, PREDICTIONS_FILE, TARGETS_FILE};

/// Renders one ground-truth / prediction heatmap pair per slide from an
/// evaluation dump. PCA is fitted on the slide's ground truth and the
/// predictions are projected with the same loadings.
pub fn render_dump(dump: &Path, corpus: &Corpus, out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let pred = read_matrix(&dump.join(PREDICTIONS_FILE))?;
    let tgt = read_matrix(&dump.join(TARGETS_FILE))?;
    if pred.spot_ids != tgt.spot_ids || pred.genes != tgt.genes {
        return Err(Error::format(dump, "prediction and target matrices disagree on spots or genes"));
    }
    let row_of: BTreeMap<&str, usize> = tgt.spot_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let pitch = corpus.manifest().generator.pitch;
    let to64 = |r: &[f32]| r.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut written = Vec::new();
    for wsi in &corpus.manifest().wsis {
        let spots = corpus.load_spots(&wsi.id)?;
        let rows: Vec<usize> = spots.iter().filter_map(|s| row_of.get(s.id.as_str()).copied()).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            log::warn!("slide {} has a single evaluated spot; skipped", wsi.id);
            continue;
        }
        let gt_rows: Vec<Vec<f64>> = rows.iter().map(|&i| to64(&tgt.rows[i])).collect();
        let pca = fit_pca_1d(&gt_rows, seed)?;
        let mut gt = BTreeMap::new();
        let mut pr = BTreeMap::new();
        for &i in &rows {
            let id = tgt.spot_ids[i].clone();
            gt.insert(id.clone(), pca.project(&to64(&tgt.rows[i])));
            pr.insert(id, pca.project(&to64(&pred.rows[i])));
        }
        let grid = StMapGrid::new(&spots, pitch)?;
        let series = [
            Series {
                label: "gt",
                values: &gt,
            },
            Series {
                label: "pred",
                values: &pr,
            },
        ];
        written.extend(emit_heatmap_grid(out, &wsi.id, &grid, &series)?);
    }
    if written.is_empty() {
        return Err(Error::InvalidInput("no slide in the dump has spots to render".into()));
    }
    Ok(written)
}
