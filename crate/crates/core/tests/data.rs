use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use m2ort_core::data::{
    batch_order, cpm, cpm_log_normalize, extract_patches, select_genes, select_genes_from, synth_corpus,
    Corpus, Dataset, GenePanel, Pyramid, SignalSpec, Split, SynthSpec,
};
use m2ort_core::model::{EncoderMode, ModelConfig};
use m2ort_core::rng::{stream, Stream};
use m2ort_core::{Error, Tensor};
use proptest::prelude::*;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        n_wsis: 10,
        spots_per_wsi: 16,
        gene_universe: 300,
        crop: 32,
        pitch: 16,
        ..Default::default()
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn cpm_log_examples() {
    let got = cpm_log_normalize(&[10, 30, 60]).unwrap();
    let want = [1e5f64.ln_1p(), 3e5f64.ln_1p(), 6e5f64.ln_1p()];
    for (a, b) in got.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let one_hot = cpm_log_normalize(&[0, 0, 5, 0]).unwrap();
    assert_eq!(one_hot, vec![0.0, 0.0, 1e6f64.ln_1p(), 0.0]);

    let base = cpm_log_normalize(&[3, 1, 4, 1, 5, 9]).unwrap();
    let scaled = cpm_log_normalize(&[21, 7, 28, 7, 35, 63]).unwrap();
    for (a, b) in base.iter().zip(&scaled) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(cpm(&[0, 0, 0]), Err(Error::InvalidInput(_))));
}

proptest! {
    #[test]
    fn cpm_rows_sum_to_a_million(counts in prop::collection::vec(0u32..100_000, 1..400)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let total: f64 = cpm(&counts).unwrap().iter().sum();
        prop_assert!((total - 1e6).abs() / 1e6 < 1e-6);
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("g{i}")).collect()
}

/// Two slides over six genes. Slide A varies most in g1 and g2, slide B in
/// g4 and g5; g0 and g3 are nearly flat everywhere.
fn toy() -> Vec<(String, Vec<Vec<f64>>)> {
    let a = vec![
        vec![1.0, 0.0, 5.0, 2.0, 1.0, 1.0],
        vec![1.1, 4.0, 1.0, 2.0, 1.5, 1.2],
        vec![1.0, 8.0, 3.0, 2.1, 1.0, 1.4],
    ];
    let b = vec![
        vec![2.0, 1.0, 1.0, 0.0, 0.0, 9.0],
        vec![2.0, 1.2, 1.1, 0.1, 6.0, 3.0],
        vec![2.1, 1.0, 1.0, 0.0, 3.0, 0.0],
    ];
    vec![("A".into(), a), ("B".into(), b)]
}

/// Brute-force top-2 union: compute each column variance directly.
fn toy_union_oracle() -> BTreeSet<String> {
    let mut union = BTreeSet::new();
    for (_, rows) in toy() {
        let mut vars: Vec<(f64, usize)> = (0..6)
            .map(|j| {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let m = col.iter().sum::<f64>() / 3.0;
                (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0, j)
            })
            .collect();
        vars.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        union.extend(vars[..2].iter().map(|&(_, j)| format!("g{j}")));
    }
    union
}

#[test]
fn toy_gene_selection_matches_oracle() {
    let union = toy_union_oracle();
    assert_eq!(
        union,
        ["g1", "g2", "g4", "g5"].iter().map(|s| s.to_string()).collect()
    );
    let panel = select_genes_from(&ids(6), &toy(), 2, 3, 17).unwrap();
    assert_eq!(panel.union_size, 4);
    assert_eq!(panel.genes.len(), 3);
    assert!(panel.genes.iter().all(|g| union.contains(g)));
    let mut sorted = panel.genes.clone();
    sorted.sort();
    assert_eq!(sorted, panel.genes, "panel keeps universe order");
    assert_eq!(select_genes_from(&ids(6), &toy(), 2, 3, 17).unwrap(), panel);

    let seeds: BTreeSet<Vec<String>> = (0..20)
        .map(|s| select_genes_from(&ids(6), &toy(), 2, 3, s).unwrap().genes)
        .collect();
    assert!(seeds.len() > 1, "seed changes the sample");

    let all = select_genes_from(&ids(6), &toy(), 2, 4, 3).unwrap();
    assert_eq!(all.genes, vec!["g1", "g2", "g4", "g5"]);

    match select_genes_from(&ids(6), &toy(), 2, 5, 3) {
        Err(Error::InvalidConfig(msg)) => assert!(msg.contains("4 members"), "{msg}"),
        r => panic!("expected union-size error, got {r:?}"),
    }
}

#[test]
fn variance_ties_break_by_identifier() {
    let rows = vec![vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]];
    let panel = select_genes_from(&["d", "c", "b", "a"].map(String::from), &[("s".into(), rows)], 2, 2, 0)
        .unwrap();
    assert_eq!(panel.genes, vec!["b", "a"]);
}

#[test]
fn synth_split_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let spec = small_spec(3);
    let manifest = synth_corpus(&a, &spec).unwrap();
    synth_corpus(&b, &spec).unwrap();
    assert_eq!(tree(&a), tree(&b));

    let count = |s| manifest.wsis.iter().filter(|w| w.split == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 1, 3));

    let other = dir.path().join("c");
    synth_corpus(&other, &small_spec(4)).unwrap();
    assert_ne!(tree(&a), tree(&other));
}

#[test]
fn synth_rejects_small_universe() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        gene_universe: 100,
        ..small_spec(0)
    };
    assert!(matches!(synth_corpus(dir.path(), &spec), Err(Error::InvalidConfig(_))));
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn gene_zero_tracks_its_dominant_latent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_wsis: 3,
        spots_per_wsi: 100,
        ..small_spec(8)
    };
    synth_corpus(dir.path(), &spec).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();

    let genes = fs::read_to_string(dir.path().join("genes.tsv")).unwrap();
    let row: Vec<f64> = genes.lines().nth(1).unwrap().split('\t').skip(2).map(|s| s.parse().unwrap()).collect();
    let dominant = (0..3).max_by(|&i, &j| row[i].abs().total_cmp(&row[j].abs())).unwrap();

    let (mut counts, mut latent) = (Vec::new(), Vec::new());
    for wsi in &corpus.manifest().wsis {
        let table = corpus.load_counts(&wsi.id).unwrap();
        let spots = corpus.load_spots(&wsi.id).unwrap();
        let lat = corpus.load_latents(&wsi.id).unwrap();
        let (h, w) = (lat.shape()[1], lat.shape()[2]);
        for (spot, c) in spots.iter().zip(&table.counts) {
            counts.push(c[0] as f64);
            latent.push(lat.data()[(dominant * h + spot.y) * w + spot.x] as f64);
        }
    }
    let r = pearson(&counts, &latent) * row[dominant].signum();
    assert!(r > 0.5, "correlation {r}");
}

#[test]
fn spots_leave_room_for_full_crops() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(1);
    synth_corpus(dir.path(), &spec).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let half = spec.crop / 2;
    let mut seen = BTreeSet::new();
    for wsi in &corpus.manifest().wsis {
        for s in corpus.load_spots(&wsi.id).unwrap() {
            assert!(s.x >= half && s.x + half <= wsi.width && s.y >= half && s.y + half <= wsi.height);
            assert!(seen.insert(s.id.clone()), "duplicate spot id {}", s.id);
        }
    }
}

fn pool_oracle(t: &Tensor<f32>, f: usize) -> Vec<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::new();
    for c in 0..3 {
        for y in 0..h / f {
            for x in 0..w / f {
                let mut s = 0.0f64;
                for dy in 0..f {
                    for dx in 0..f {
                        s += t.data()[(c * h + y * f + dy) * w + x * f + dx] as f64;
                    }
                }
                out.push((s / (f * f) as f64) as f32);
            }
        }
    }
    out
}

#[test]
fn pyramid_levels_are_exact_pools_without_level_terms() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_wsis: 2,
        signal: SignalSpec {
            level1_scale: 0.0,
            level2_scale: 0.0,
            ..Default::default()
        },
        ..small_spec(2)
    };
    synth_corpus(dir.path(), &spec).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    for wsi in &corpus.manifest().wsis {
        let p = corpus.load_pyramid(&wsi.id).unwrap();
        assert_eq!(p.levels[1].data(), pool_oracle(&p.levels[0], 2).as_slice());
        assert_eq!(p.levels[2].data(), pool_oracle(&p.levels[0], 4).as_slice());

        // and per spot: pooling the level-0 crop gives the level-2 crop
        for s in corpus.load_spots(&wsi.id).unwrap() {
            let crops = extract_patches(&p, s.x, s.y, 32, 32, &[0, 2]).unwrap();
            let l0 = crops[0].as_ref().unwrap();
            assert_eq!(crops[2].as_ref().unwrap().data(), pool_oracle(l0, 4).as_slice());
        }
    }

    let planted = dir.path().join("planted");
    synth_corpus(&planted, &small_spec(2)).unwrap();
    let p = Corpus::open(&planted).unwrap().load_pyramid("wsi00").unwrap();
    assert_ne!(p.levels[2].data(), pool_oracle(&p.levels[0], 4).as_slice());
}

fn coordinate_pyramid(h: usize, w: usize) -> Pyramid {
    // channel c, row y, col x holds c * 1e7 + y * 1e4 + x (exact in f32 up to 2^24)
    let level = |f: usize| {
        let (lh, lw) = (h / f, w / f);
        let data = (0..3)
            .flat_map(|c| (0..lh).flat_map(move |y| (0..lw).map(move |x| (c * 4_000_000 + y * 2000 + x) as f32)))
            .collect();
        Tensor::new([3, lh, lw], data).unwrap()
    };
    Pyramid {
        levels: [level(1), level(2), level(4)],
    }
}

#[test]
fn crop_geometry() {
    let p = coordinate_pyramid(1200, 1200);
    let crops = extract_patches(&p, 1000, 800, 224, 224, &[0, 1, 2]).unwrap();
    let l0 = crops[0].as_ref().unwrap();
    assert_eq!(l0.shape(), &[3, 224, 224]);
    // pixel_x is the column: cols [888, 1112), rows [688, 912)
    assert_eq!(l0.data()[0], (688 * 2000 + 888) as f32);
    assert_eq!(l0.data()[224 * 224 - 1], (911 * 2000 + 1111) as f32);
    let l2 = crops[2].as_ref().unwrap();
    assert_eq!(l2.shape(), &[3, 56, 56]);
    // centered at (250, 200): cols [222, 278), rows [172, 228)
    assert_eq!(l2.data()[0], (172 * 2000 + 222) as f32);
    assert_eq!(l2.data()[56 * 56 - 1], (227 * 2000 + 277) as f32);
    assert_eq!(crops[1].as_ref().unwrap().shape(), &[3, 112, 112]);

    assert_eq!(extract_patches(&p, 1000, 800, 224, 224, &[0, 1, 2]).unwrap(), crops);
    assert!(extract_patches(&p, 100, 800, 224, 224, &[0]).is_err());
    assert!(extract_patches(&p, 1150, 800, 224, 224, &[0]).is_err());
}

#[test]
fn batch_partition() {
    let sizes: Vec<usize> = batch_order(196, 96, None).iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![96, 96, 4]);
    let a = batch_order(196, 96, Some(&mut stream(5, Stream::Shuffle)));
    let b = batch_order(196, 96, Some(&mut stream(5, Stream::Shuffle)));
    assert_eq!(a, b);
    assert_ne!(a, batch_order(196, 96, None));
    let mut all: Vec<usize> = a.into_iter().flatten().collect();
    all.sort();
    assert_eq!(all, (0..196).collect::<Vec<_>>());
}

#[test]
fn corpus_detects_tampering_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path(), &SynthSpec { n_wsis: 2, ..small_spec(0) }).unwrap();
    let counts = dir.path().join("wsi01/counts.tsv");
    let original = fs::read(&counts).unwrap();
    let mut bytes = original.clone();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    fs::write(&counts, &bytes).unwrap();
    assert!(matches!(Corpus::open(dir.path()), Err(Error::Format { .. })));
    fs::remove_file(&counts).unwrap();
    assert!(matches!(Corpus::open(dir.path()), Err(Error::Io { .. })));
    fs::write(&counts, original).unwrap();
    assert!(Corpus::open(dir.path()).is_ok());
}

#[test]
fn datasets_partition_spots_by_slide() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path(), &small_spec(6)).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let panel = select_genes(&corpus, 100, 20, 1).unwrap();
    assert_eq!(panel.len(), 20);
    panel.save(dir.path()).unwrap();
    assert_eq!(GenePanel::load(dir.path()).unwrap(), panel);
    assert_eq!(select_genes(&corpus, 100, 20, 1).unwrap(), panel);

    let mut seen = BTreeSet::new();
    let mut total = 0;
    for split in Split::ALL {
        let ds = Dataset::load(&corpus, split, &panel).unwrap();
        for id in &ds.spot_ids {
            let wsi = id.split('_').next().unwrap();
            let entry = corpus.manifest().wsis.iter().find(|w| w.id == wsi).unwrap();
            assert_eq!(entry.split, split);
            assert!(seen.insert(id.clone()));
        }
        total += ds.len();
    }
    assert_eq!(total, 160);

    let train = Dataset::load(&corpus, Split::Train, &panel).unwrap();
    let config = ModelConfig {
        depth: 1,
        heads: 2,
        channels: 16,
        patch: 8,
        mask_prob: 0.1,
        genes: 20,
        height: 32,
        width: 32,
        dropout: 0.0,
        levels: vec![0, 2],
        encoder_mode: EncoderMode::Decoupled,
        disable_itmm: false,
        disable_icmm: false,
    };
    let (batch, targets) = train.batch(&[3, 0, 7], &config).unwrap();
    assert_eq!(batch.images[0].as_ref().unwrap().shape(), &[3, 3, 32, 32]);
    assert!(batch.images[1].is_none());
    assert_eq!(batch.images[2].as_ref().unwrap().shape(), &[3, 3, 8, 8]);
    assert_eq!(targets.shape(), &[3, 20]);
    assert_eq!(&targets.data()[20..40], train.targets[0].as_slice());
}
