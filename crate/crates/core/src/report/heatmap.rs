use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Spot;
use crate::error::{Error, Result};

/// Spots placed on their acquisition lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct StMapGrid {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col)` of each spot, in spot-table order.
    pub cells: Vec<(usize, usize)>,
    pub spot_ids: Vec<String>,
}

impl StMapGrid {
    /// Cell indices are `round((pixel - min_pixel) / pitch)` per axis.
    pub fn new(spots: &[Spot], pitch: usize) -> Result<Self> {
        if spots.is_empty() {
            return Err(Error::InvalidInput("spot table is empty".into()));
        }
        if pitch == 0 {
            return Err(Error::InvalidInput("grid pitch must be positive".into()));
        }
        let min_x = spots.iter().map(|s| s.x).min().unwrap_or(0);
        let min_y = spots.iter().map(|s| s.y).min().unwrap_or(0);
        let index = |v: usize, min: usize| ((v - min) as f64 / pitch as f64).round() as usize;
        let cells: Vec<(usize, usize)> = spots.iter().map(|s| (index(s.y, min_y), index(s.x, min_x))).collect();
        let mut owner = BTreeMap::new();
        for (cell, s) in cells.iter().zip(spots) {
            if let Some(prev) = owner.insert(*cell, &s.id) {
                return Err(Error::InvalidInput(format!(
                    "spots {prev} and {} fall in the same grid cell {cell:?}",
                    s.id
                )));
            }
        }
        Ok(Self {
            rows: cells.iter().map(|c| c.0).max().unwrap_or(0) + 1,
            cols: cells.iter().map(|c| c.1).max().unwrap_or(0) + 1,
            cells,
            spot_ids: spots.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

/// A named per-spot value map; spots without an entry are missing.
pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a BTreeMap<String, f64>,
}

/// Binary 8-bit grayscale image.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Maps `v` from `[min, max]` onto `[0, 255]`; a flat range maps to 255.
pub fn gray(v: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return 255;
    }
    ((v - min) / (max - min) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `<prefix>.csv` listing every spot with its cell and values, plus
/// one `<prefix>_<label>.pgm` per series. Scaling is shared across series.
/// Returns the written paths.
pub fn emit_heatmap_grid(dir: &Path, prefix: &str, grid: &StMapGrid, series: &[Series<'_>]) -> Result<Vec<PathBuf>> {
    if series.is_empty() {
        return Err(Error::InvalidInput("no value series to render".into()));
    }
    let present = series.iter().flat_map(|s| grid.spot_ids.iter().filter_map(|id| s.values.get(id)));
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in present {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("heatmap values for {prefix}")));
        }
        min = min.min(v);
        max = max.max(v);
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok::<_, Error>(())
    };

    let mut csv = String::from("row,col,spot_id");
    if series.len() == 1 {
        csv.push_str(",value");
    } else {
        for s in series {
            write!(csv, ",{}", s.label).expect("string write");
        }
    }
    csv.push('\n');
    for ((r, c), id) in grid.cells.iter().zip(&grid.spot_ids) {
        write!(csv, "{r},{c},{id}").expect("string write");
        for s in series {
            match s.values.get(id) {
                Some(v) => write!(csv, ",{v}"),
                None => write!(csv, ","),
            }
            .expect("string write");
        }
        csv.push('\n');
    }
    write(format!("{prefix}.csv"), csv.into_bytes())?;

    for s in series {
        let mut pixels = vec![0u8; grid.rows * grid.cols];
        for ((r, c), id) in grid.cells.iter().zip(&grid.spot_ids) {
            if let Some(&v) = s.values.get(id) {
                pixels[r * grid.cols + c] = gray(v, min, max);
            }
        }
        write(format!("{prefix}_{}.pgm", s.label), pgm(grid.cols, grid.rows, &pixels))?;
    }
    Ok(written)
}

/// Parsed heatmap CSV row: cell, spot id and one optional value per series.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub row: usize,
    pub col: usize,
    pub spot_id: String,
    pub values: Vec<Option<f64>>,
}

pub fn read_heatmap_csv(path: &Path) -> Result<(Vec<String>, Vec<HeatmapRow>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.len() < 4 || header[..3] != ["row", "col", "spot_id"] {
        return Err(Error::format(path, "header must start with row,col,spot_id"));
    }
    let bad = |line: &str| Error::format(path, format!("bad row {line:?}"));
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad(line));
        }
        let values = f[3..]
            .iter()
            .map(|v| if v.is_empty() { Ok(None) } else { v.parse().map(Some).map_err(|_| bad(line)) })
            .collect::<Result<Vec<_>>>()?;
        rows.push(HeatmapRow {
            row: f[0].parse().map_err(|_| bad(line))?,
            col: f[1].parse().map_err(|_| bad(line))?,
            spot_id: f[2].to_string(),
            values,
        });
    }
    Ok((header[3..].to_vec(), rows))
}
