//! Synthetic slide corpus with a planted multi-scale signal.
//!
//! Each slide has four smooth latent fields at level-0 resolution:
//!
//! * `dots`: density of dark one-pixel "nuclei", visible only as fine detail
//!   at level 0 (and as mean darkness after pooling),
//! * `texture`: mid-frequency intensity of the green channel,
//! * `regional`: low-frequency intensity of the blue channel,
//! * `nuisance`: a second low-frequency field added to the blue channel, so
//!   level 0 alone cannot separate it from `regional`.
//!
//! Level 1 is the 2×2 mean of level 0 plus `level1_scale · texture` on red;
//! level 2 is the 4×4 mean of level 0 plus `level2_scale · regional` on blue.
//! The level-2 term is the only unconfounded view of `regional`.
//!
//! Gene `j` is driven mostly by latent `j mod 3`; its count at a spot is
//! Poisson with log rate `b_j + Σ_f w_jf · f(spot)`.
//!
//! Draw order: gene parameters come from the `Synth` stream; slide `i` uses
//! the `Synth` substream `i + 1` for its fields, stripe angle, spot jitter,
//! per-pixel dots and noise (row-major, dots then three noise draws per
//! pixel), then counts (spot-major).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::corpus::{sha256_hex, CorpusManifest, Split, WsiEntry, CORPUS_FORMAT_VERSION, MANIFEST_FILE};
use super::tns::encode_tns;
use crate::error::{Error, Result};
use crate::rng::{stream, substream, Stream, StreamRng};
use crate::tensor::Tensor;

pub const LATENTS: usize = 4;
pub const MIN_GENE_UNIVERSE: usize = 300;
const WAVES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalSpec {
    /// Weight of the texture field added to level-1 red.
    pub level1_scale: f64,
    /// Weight of the regional field added to level-2 blue.
    pub level2_scale: f64,
    /// Weight of the nuisance field in level-0 blue.
    pub nuisance_scale: f64,
    /// Standard deviation of per-pixel Gaussian noise at level 0.
    pub pixel_noise: f64,
    /// Mean log rate of the count model.
    pub baseline_log_rate: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            level1_scale: 0.1,
            level2_scale: 0.25,
            nuisance_scale: 1.0,
            pixel_noise: 0.02,
            baseline_log_rate: 3.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_wsis: usize,
    pub spots_per_wsi: usize,
    pub gene_universe: usize,
    /// Largest level-0 crop side the spot margins must accommodate.
    pub crop: usize,
    /// Spot grid spacing in level-0 pixels.
    pub pitch: usize,
    /// Train / val / test fractions over slides.
    pub split: [f64; 3],
    pub signal: SignalSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_wsis: 10,
            spots_per_wsi: 200,
            gene_universe: 300,
            crop: 224,
            pitch: 112,
            split: [0.6, 0.1, 0.3],
            signal: SignalSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_wsis == 0 || self.spots_per_wsi == 0 {
            return bad("n_wsis and spots_per_wsi must be positive".into());
        }
        if self.gene_universe < MIN_GENE_UNIVERSE {
            return bad(format!(
                "gene_universe {} is below the minimum of {MIN_GENE_UNIVERSE}",
                self.gene_universe
            ));
        }
        if self.crop < 8 || !self.crop.is_multiple_of(8) {
            return bad(format!("crop {} must be a positive multiple of 8", self.crop));
        }
        if self.pitch == 0 || !self.pitch.is_multiple_of(4) {
            return bad(format!("pitch {} must be a positive multiple of 4", self.pitch));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.split));
        }
        let s = &self.signal;
        if [s.level1_scale, s.level2_scale, s.nuisance_scale, s.pixel_noise, s.baseline_log_rate]
            .iter()
            .any(|v| !v.is_finite())
            || s.pixel_noise < 0.0
        {
            return bad("signal parameters must be finite, noise non-negative".into());
        }
        Ok(())
    }

    /// Slide counts per split: `round(f·n)` for train and val, rest test.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_wsis;
        let train = ((self.split[0] * n as f64).round() as usize).min(n);
        let val = ((self.split[1] * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }

    /// Largest multiple of 4 strictly below `pitch / 4`, so rounding
    /// `(x - min_x) / pitch` recovers each spot's grid column.
    fn jitter(&self) -> usize {
        (self.pitch / 4).saturating_sub(1) / 4 * 4
    }

    fn margin(&self) -> usize {
        self.crop / 2 + self.jitter()
    }

    fn grid(&self) -> (usize, usize) {
        let cols = (self.spots_per_wsi as f64).sqrt().ceil() as usize;
        (self.spots_per_wsi.div_ceil(cols), cols)
    }

    /// Level-0 slide extents `(height, width)`.
    pub fn slide_extent(&self) -> (usize, usize) {
        let (rows, cols) = self.grid();
        let m = 2 * self.margin();
        (m + (rows - 1) * self.pitch, m + (cols - 1) * self.pitch)
    }
}

pub fn wsi_id(index: usize, total: usize) -> String {
    let width = (total.max(1) - 1).to_string().len().max(2);
    format!("wsi{index:0width$}")
}

pub fn gene_id(index: usize) -> String {
    format!("G{index:04}")
}

/// Sum of random plane waves with wavelengths in `[lo, hi]` pixels,
/// normalized to unit variance.
struct Field {
    waves: Vec<(f64, f64, f64)>,
}

impl Field {
    fn random(rng: &mut StreamRng, lo: f64, hi: f64) -> Self {
        let waves = (0..WAVES)
            .map(|_| {
                let lambda = rng.random_range(lo..=hi);
                let angle = rng.random_range(0.0..2.0 * PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                (angle.cos() / lambda, angle.sin() / lambda, phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let norm = (2.0 / WAVES as f64).sqrt();
        norm * self
            .waves
            .iter()
            .map(|&(kx, ky, phase)| (2.0 * PI * (kx * x + ky * y) + phase).cos())
            .sum::<f64>()
    }

    /// Values on the full level-0 pixel grid, using the angle-sum identity
    /// so each pixel costs two multiplies per wave.
    fn grid(&self, h: usize, w: usize) -> Vec<f64> {
        let norm = (2.0 / WAVES as f64).sqrt();
        let mut out = vec![0.0; h * w];
        for &(kx, ky, phase) in &self.waves {
            let (sx, cx): (Vec<f64>, Vec<f64>) =
                (0..w).map(|x| (2.0 * PI * kx * x as f64).sin_cos()).unzip();
            for y in 0..h {
                let (sy, cy) = (2.0 * PI * ky * y as f64 + phase).sin_cos();
                let row = &mut out[y * w..(y + 1) * w];
                for x in 0..w {
                    row[x] += norm * (cx[x] * cy - sx[x] * sy);
                }
            }
        }
        out
    }
}

struct GeneParams {
    baseline: f64,
    weights: [f64; 3],
}

fn gene_params(spec: &SynthSpec) -> Vec<GeneParams> {
    let mut rng = stream(spec.seed, Stream::Synth);
    let minor = Normal::new(0.0, 0.2).expect("valid std");
    let b = spec.signal.baseline_log_rate;
    (0..spec.gene_universe)
        .map(|j| {
            let baseline = rng.random_range(b - 0.5..b + 0.5);
            let mut weights = [0.0; 3];
            for (f, w) in weights.iter_mut().enumerate() {
                *w = if f == j % 3 {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * rng.random_range(0.6..1.0)
                } else {
                    minor.sample(&mut rng)
                };
            }
            GeneParams { baseline, weights }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Average-pools `[3, h, w]` by `factor` in f64.
fn pool(image: &[f32], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ph, pw) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut out = vec![0.0; 3 * ph * pw];
    for c in 0..3 {
        for y in 0..ph {
            for x in 0..pw {
                let mut s = 0.0f64;
                for dy in 0..factor {
                    let row = (c * h + y * factor + dy) * w + x * factor;
                    s += image[row..row + factor].iter().map(|&v| v as f64).sum::<f64>();
                }
                out[(c * ph + y) * pw + x] = s / area;
            }
        }
    }
    out
}

struct Slide {
    levels: [Tensor<f32>; 3],
    latents: Tensor<f32>,
    spots: Vec<(String, usize, usize)>,
    counts: Vec<Vec<u32>>,
}

fn render_slide(spec: &SynthSpec, index: usize, id: &str, genes: &[GeneParams]) -> Result<Slide> {
    let mut rng = substream(spec.seed, Stream::Synth, index as u64 + 1);
    let p = spec.pitch as f64;
    let fields = [
        Field::random(&mut rng, 3.0 * p, 6.0 * p),
        Field::random(&mut rng, 1.5 * p, 3.0 * p),
        Field::random(&mut rng, 6.0 * p, 12.0 * p),
        Field::random(&mut rng, 6.0 * p, 12.0 * p),
    ];
    let stripe_angle: f64 = rng.random_range(0.0..PI);
    let (h, w) = spec.slide_extent();
    let (rows, cols) = spec.grid();
    let jitter = spec.jitter() as i64;
    let margin = spec.margin();
    let mut spots = Vec::with_capacity(spec.spots_per_wsi);
    'grid: for r in 0..rows {
        for c in 0..cols {
            if spots.len() == spec.spots_per_wsi {
                break 'grid;
            }
            let mut offset = || {
                if jitter == 0 {
                    0
                } else {
                    4 * rng.random_range(-jitter / 4..=jitter / 4)
                }
            };
            let x = (margin + c * spec.pitch) as i64 + offset();
            let y = (margin + r * spec.pitch) as i64 + offset();
            spots.push((format!("{id}_s{:04}", spots.len()), x as usize, y as usize));
        }
    }

    let grids: Vec<Vec<f64>> = fields.iter().map(|f| f.grid(h, w)).collect();
    let s = &spec.signal;
    let noise = Normal::new(0.0, s.pixel_noise.max(0.0)).expect("valid std");
    let (ks, kc) = (stripe_angle.sin() / 8.0, stripe_angle.cos() / 8.0);
    let mut level0 = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dots, texture, regional, nuisance) = (grids[0][i], grids[1][i], grids[2][i], grids[3][i]);
            let dot = if rng.random::<f64>() < 0.05 + 0.25 * sigmoid(2.0 * dots) {
                1.0
            } else {
                0.0
            };
            let stripe = (2.0 * PI * (kc * x as f64 + ks * y as f64)).sin();
            let rgb = [
                0.75 - 0.4 * dot,
                0.5 + 0.15 * texture + 0.05 * stripe - 0.2 * dot,
                0.5 + 0.12 * (regional + s.nuisance_scale * nuisance),
            ];
            for (c, v) in rgb.into_iter().enumerate() {
                let n = if s.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                level0[c * h * w + i] = (v + n).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut levels_out = Vec::with_capacity(3);
    levels_out.push(Tensor::new([3, h, w], level0.clone())?);
    for (level, channel, field, scale) in [(1usize, 0usize, 1usize, s.level1_scale), (2, 2, 2, s.level2_scale)] {
        let f = 1usize << level;
        let (lh, lw) = (h / f, w / f);
        let mut pooled = pool(&level0, h, w, f);
        if scale != 0.0 {
            let centre = (f as f64 - 1.0) / 2.0;
            for y in 0..lh {
                for x in 0..lw {
                    let v = fields[field].at((x * f) as f64 + centre, (y * f) as f64 + centre);
                    pooled[(channel * lh + y) * lw + x] += scale * v;
                }
            }
        }
        let data = pooled.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        levels_out.push(Tensor::new([3, lh, lw], data)?);
    }

    let mut latents = Vec::with_capacity(LATENTS * h * w);
    for g in &grids {
        latents.extend(g.iter().map(|&v| v as f32));
    }
    let latents = Tensor::new([LATENTS, h, w], latents)?;

    let counts = spots
        .iter()
        .map(|&(_, x, y)| {
            let f: Vec<f64> = (0..3)
                .map(|k| latents.data()[(k * h + y) * w + x] as f64)
                .collect();
            genes
                .iter()
                .map(|g| {
                    let log_rate = g.baseline + (0..3).map(|k| g.weights[k] * f[k]).sum::<f64>();
                    let poisson = Poisson::new(log_rate.exp()).expect("positive rate");
                    poisson.sample(&mut rng) as u32
                })
                .collect()
        })
        .collect();
    let levels: [Tensor<f32>; 3] = levels_out.try_into().expect("three levels");
    Ok(Slide {
        levels,
        latents,
        spots,
        counts,
    })
}

struct Writer<'a> {
    root: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn put(&mut self, rel: String, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(&rel);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        self.files.insert(rel, sha256_hex(bytes));
        Ok(())
    }

    fn put_tns(&mut self, dir: &str, stem: &str, t: &Tensor<f32>) -> Result<()> {
        let (bytes, json) = encode_tns(t);
        self.put(format!("{dir}/{stem}.tns"), &bytes)?;
        self.put(format!("{dir}/{stem}.json"), json.as_bytes())
    }
}

/// Writes a corpus under `root` and returns its manifest.
pub fn synth_corpus(root: &Path, spec: &SynthSpec) -> Result<CorpusManifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let genes = gene_params(spec);
    let mut writer = Writer {
        root,
        files: BTreeMap::new(),
    };

    let mut table = String::from("gene_id\tbaseline\tw_dots\tw_texture\tw_regional\n");
    for (j, g) in genes.iter().enumerate() {
        writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}",
            gene_id(j),
            g.baseline,
            g.weights[0],
            g.weights[1],
            g.weights[2]
        )
        .expect("string write");
    }
    writer.put("genes.tsv".into(), table.as_bytes())?;

    let mut order: Vec<usize> = (0..spec.n_wsis).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream(spec.seed, Stream::Split));
    }
    let [train, val, _] = spec.split_sizes();
    let mut splits = vec![Split::Test; spec.n_wsis];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let header = {
        let mut s = String::from("spot_id");
        for j in 0..spec.gene_universe {
            s.push('\t');
            s.push_str(&gene_id(j));
        }
        s.push('\n');
        s
    };
    let (h, w) = spec.slide_extent();
    let mut wsis = Vec::with_capacity(spec.n_wsis);
    for (index, &split) in splits.iter().enumerate() {
        let id = wsi_id(index, spec.n_wsis);
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let slide = render_slide(spec, index, &id, &genes)?;
        for (level, t) in slide.levels.iter().enumerate() {
            writer.put_tns(&id, &format!("level{level}"), t)?;
        }
        writer.put_tns(&id, "latents", &slide.latents)?;

        let mut spots = String::from("spot_id\tpixel_x\tpixel_y\n");
        let mut counts = header.clone();
        for ((sid, x, y), row) in slide.spots.iter().zip(&slide.counts) {
            writeln!(spots, "{sid}\t{x}\t{y}").expect("string write");
            counts.push_str(sid);
            for c in row {
                write!(counts, "\t{c}").expect("string write");
            }
            counts.push('\n');
        }
        writer.put(format!("{id}/spots.tsv"), spots.as_bytes())?;
        writer.put(format!("{id}/counts.tsv"), counts.as_bytes())?;
        log::info!("wrote slide {id} ({} spots, split {split})", slide.spots.len());
        wsis.push(WsiEntry {
            id,
            width: w,
            height: h,
            spots: slide.spots.len(),
            split,
        });
    }

    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        generator: spec.clone(),
        gene_universe: spec.gene_universe,
        wsis,
        files: writer.files,
    };
    let path = root.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}
