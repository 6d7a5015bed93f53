//! Core data model: image batches, datasets, perturbations, quantization.

pub mod dataset;
pub mod fixture;
pub mod image;
pub mod perturb;
pub mod quant;

pub use dataset::{
    export_unlearnable, load_dataset, write_dataset, Dataset, DatasetManifest, ManifestEntry,
    Split, UnlearnableProvenance,
};
pub use fixture::{gaussian_clusters, synthesize_fixture, FixtureParams};
pub use image::ImageBatch;
pub use perturb::{apply_and_quantize, clip_perturbation, ApplyStats, Perturbation};
pub use quant::QuantizationPolicy;
