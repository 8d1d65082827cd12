use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::{cpm_log_normalize, GenePanel};
use super::synth::SynthSpec;
use super::tns::read_tns;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiScaleBatch, MAX_LEVEL};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split {s:?} (train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsiEntry {
    pub id: String,
    /// Level-0 width in pixels.
    pub width: usize,
    /// Level-0 height in pixels.
    pub height: usize,
    pub spots: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub generator: SynthSpec,
    pub gene_universe: usize,
    pub wsis: Vec<WsiEntry>,
    /// SHA-256 of every data file, keyed by path relative to the root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spot {
    pub id: String,
    /// Level-0 column of the spot center.
    pub x: usize,
    /// Level-0 row of the spot center.
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountsTable {
    pub gene_ids: Vec<String>,
    pub spot_ids: Vec<String>,
    pub counts: Vec<Vec<u32>>,
}

/// One slide at three magnifications, each `[3, h/2^i, w/2^i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: [Tensor<f32>; MAX_LEVEL + 1],
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Crops a `[3, h, w]` window whose center is `(cx, cy)`.
fn crop(image: &Tensor<f32>, cx: usize, cy: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (ih, iw) = (s[1], s[2]);
    let (top, left) = (cy.checked_sub(h / 2), cx.checked_sub(w / 2));
    let (Some(top), Some(left)) = (top, left) else {
        return Err(Error::InvalidInput(format!(
            "crop {h}x{w} at ({cx}, {cy}) leaves the image"
        )));
    };
    if top + h > ih || left + w > iw {
        return Err(Error::InvalidInput(format!(
            "crop {h}x{w} at ({cx}, {cy}) leaves the {ih}x{iw} image"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in top..top + h {
            let row = (c * ih + y) * iw;
            out.extend_from_slice(&src[row + left..row + left + w]);
        }
    }
    Tensor::new([3, h, w], out)
}

/// Concentric crops around a spot: level `i` is `(h/2^i) × (w/2^i)` centered
/// at the spot center divided by `2^i`, rounded to nearest.
pub fn extract_patches(
    pyramid: &Pyramid,
    spot_x: usize,
    spot_y: usize,
    height: usize,
    width: usize,
    levels: &[usize],
) -> Result<[Option<Tensor<f32>>; MAX_LEVEL + 1]> {
    let mut out = [None, None, None];
    for &level in levels {
        if level > MAX_LEVEL {
            return Err(Error::InvalidInput(format!("no level {level}")));
        }
        let half = (1usize << level) / 2;
        let (cx, cy) = ((spot_x + half) >> level, (spot_y + half) >> level);
        out[level] = Some(crop(
            &pyramid.levels[level],
            cx,
            cy,
            height >> level,
            width >> level,
        )?);
    }
    Ok(out)
}

/// An on-disk corpus whose files matched their recorded digests when opened.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let manifest: CorpusManifest =
            serde_json::from_str(&read_text(&path)?).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("corpus format version {}", manifest.format_version),
            ));
        }
        for (rel, digest) in &manifest.files {
            let file = root.join(rel);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            if &sha256_hex(&bytes) != digest {
                return Err(Error::format(file, "digest does not match the manifest"));
            }
        }
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn slides(&self, split: Split) -> impl Iterator<Item = &WsiEntry> {
        self.manifest.wsis.iter().filter(move |w| w.split == split)
    }

    pub fn wsi_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn gene_ids(&self) -> Result<Vec<String>> {
        let first = self
            .manifest
            .wsis
            .first()
            .ok_or_else(|| Error::InvalidInput("corpus has no slides".into()))?;
        Ok(self.load_counts(&first.id)?.gene_ids)
    }

    pub fn load_spots(&self, id: &str) -> Result<Vec<Spot>> {
        let path = self.wsi_dir(id).join("spots.tsv");
        let text = read_text(&path)?;
        let mut lines = text.lines();
        if lines.next() != Some("spot_id\tpixel_x\tpixel_y") {
            return Err(Error::format(&path, "unexpected header"));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split('\t').collect();
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::format(&path, format!("bad coordinate {s:?}")))
                };
                match f.as_slice() {
                    [id, x, y] => Ok(Spot {
                        id: id.to_string(),
                        x: parse(x)?,
                        y: parse(y)?,
                    }),
                    _ => Err(Error::format(&path, format!("bad row {line:?}"))),
                }
            })
            .collect()
    }

    pub fn load_counts(&self, id: &str) -> Result<CountsTable> {
        let path = self.wsi_dir(id).join("counts.tsv");
        let text = read_text(&path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(&path, "empty file"))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("spot_id") {
            return Err(Error::format(&path, "first column must be spot_id"));
        }
        let gene_ids: Vec<String> = cols.map(str::to_string).collect();
        let mut spot_ids = Vec::new();
        let mut counts = Vec::new();
        for line in lines {
            let mut f = line.split('\t');
            spot_ids.push(f.next().unwrap_or_default().to_string());
            let row = f
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|_| Error::format(&path, format!("bad count {s:?}")))
                })
                .collect::<Result<Vec<u32>>>()?;
            if row.len() != gene_ids.len() {
                return Err(Error::format(&path, format!("row {} has {} counts", spot_ids.len(), row.len())));
            }
            counts.push(row);
        }
        Ok(CountsTable {
            gene_ids,
            spot_ids,
            counts,
        })
    }

    pub fn load_pyramid(&self, id: &str) -> Result<Pyramid> {
        let dir = self.wsi_dir(id);
        Ok(Pyramid {
            levels: [
                read_tns(&dir, "level0")?,
                read_tns(&dir, "level1")?,
                read_tns(&dir, "level2")?,
            ],
        })
    }

    /// Generator fields `[4, h, w]`: dot density, texture, regional
    /// intensity and the nuisance field, at level-0 resolution.
    pub fn load_latents(&self, id: &str) -> Result<Tensor<f32>> {
        read_tns(&self.wsi_dir(id), "latents")
    }
}

/// All spots of one split with panel-restricted targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub genes: Vec<String>,
    pub spot_ids: Vec<String>,
    pub positions: Vec<(usize, usize)>,
    pub targets: Vec<Vec<f32>>,
    /// Slide index into `pyramids` for each spot.
    slide_of: Vec<usize>,
    pyramids: Vec<Pyramid>,
}

impl Dataset {
    pub fn load(corpus: &Corpus, split: Split, panel: &GenePanel) -> Result<Self> {
        let mut out = Self {
            split,
            genes: panel.genes.clone(),
            spot_ids: Vec::new(),
            positions: Vec::new(),
            targets: Vec::new(),
            slide_of: Vec::new(),
            pyramids: Vec::new(),
        };
        for wsi in corpus.slides(split) {
            let spots = corpus.load_spots(&wsi.id)?;
            let table = corpus.load_counts(&wsi.id)?;
            let columns = panel
                .genes
                .iter()
                .map(|g| {
                    table.gene_ids.iter().position(|x| x == g).ok_or_else(|| {
                        Error::InvalidInput(format!("panel gene {g} missing from slide {}", wsi.id))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            if spots.len() != table.counts.len() {
                return Err(Error::InvalidInput(format!(
                    "slide {}: {} spots but {} count rows",
                    wsi.id,
                    spots.len(),
                    table.counts.len()
                )));
            }
            let slide = out.pyramids.len();
            for ((spot, counts), count_id) in spots.iter().zip(&table.counts).zip(&table.spot_ids) {
                if &spot.id != count_id {
                    return Err(Error::InvalidInput(format!(
                        "slide {}: spot table and counts disagree at {}",
                        wsi.id, spot.id
                    )));
                }
                let expr = match cpm_log_normalize(counts) {
                    Ok(e) => e,
                    Err(_) => {
                        log::warn!("spot {} has no counts; excluded", spot.id);
                        continue;
                    }
                };
                out.spot_ids.push(spot.id.clone());
                out.positions.push((spot.x, spot.y));
                out.targets.push(columns.iter().map(|&j| expr[j] as f32).collect());
                out.slide_of.push(slide);
            }
            out.pyramids.push(corpus.load_pyramid(&wsi.id)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spot_ids.is_empty()
    }

    /// Keeps the first `n` spots.
    pub fn truncate(&mut self, n: usize) {
        self.spot_ids.truncate(n);
        self.positions.truncate(n);
        self.targets.truncate(n);
        self.slide_of.truncate(n);
    }

    pub fn pyramid_of(&self, index: usize) -> &Pyramid {
        &self.pyramids[self.slide_of[index]]
    }

    /// Crops for the model's active levels plus `[B, k]` targets.
    pub fn batch(
        &self,
        indices: &[usize],
        config: &ModelConfig,
    ) -> Result<(MultiScaleBatch<f32>, Tensor<f32>)> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut per_level: [Vec<f32>; MAX_LEVEL + 1] = Default::default();
        let mut targets = Vec::with_capacity(indices.len() * self.genes.len());
        for &i in indices {
            let (x, y) = self.positions[i];
            let crops = extract_patches(
                self.pyramid_of(i),
                x,
                y,
                config.height,
                config.width,
                &config.levels,
            )?;
            for (level, crop) in crops.into_iter().enumerate() {
                if let Some(t) = crop {
                    per_level[level].extend_from_slice(t.data());
                }
            }
            targets.extend_from_slice(&self.targets[i]);
        }
        let mut batch = MultiScaleBatch::new();
        for &level in &config.levels {
            let (h, w) = config.level_extent(level);
            let data = std::mem::take(&mut per_level[level]);
            batch = batch.with_level(level, Tensor::new([indices.len(), 3, h, w], data)?);
        }
        Ok((batch, Tensor::new([indices.len(), self.genes.len()], targets)?))
    }
}

/// Partitions `0..n` into batches, shuffled when an rng is given. The final
/// batch may be short.
pub fn batch_order(n: usize, batch_size: usize, rng: Option<&mut StreamRng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
