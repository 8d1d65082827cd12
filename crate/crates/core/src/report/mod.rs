//! One-dimensional PCA of expression maps and grayscale heatmap output.
mod heatmap;
mod pca;
mod render;

pub use heatmap::{emit_heatmap_grid, gray, pgm, read_heatmap_csv, HeatmapRow, Series, StMapGrid};
pub use pca::{covariance, fit_pca_1d, pca_1d, Pca1d, PCA_MAX_ITER, PCA_TOL};
pub use render::render_dump;
