//! Synthetic corpus generation, preprocessing, gene selection and
//! spot-aligned multi-level crops.

mod corpus;
pub(crate) use corpus::sha256_hex;
mod preprocess;
mod synth;
pub mod tns;

pub use corpus::{
    batch_order, extract_patches, CorpusManifest, Corpus, CountsTable, Dataset, Pyramid, Split, Spot,
    WsiEntry, CORPUS_FORMAT_VERSION, MANIFEST_FILE,
};
pub use preprocess::{
    column_variances, cpm, cpm_log_normalize, select_genes, select_genes_from, top_variance, GenePanel,
    CPM_SCALE, PANEL_FILE,
};
pub use synth::{gene_id, synth_corpus, wsi_id, SignalSpec, SynthSpec, LATENTS, MIN_GENE_UNIVERSE};
