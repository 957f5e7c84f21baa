//! Procedural shapes corpus: a broad pretraining regime, a narrow shifted
//! downstream regime, few-shot splits, and the `LFDS` / PGM file formats.

mod dataset;
mod render;

pub use dataset::{
    export_grid, image_id, make_dataset, make_fewshot, make_split, make_test_split, ClassRanges, ImageDataset,
    LabeledImage, Range, Regime, RegimeConfig, Split, DATASET_MAGIC, TEST_SPLIT_SEED,
};
pub use render::{default_classes, render_shape, ShapeClass, ShapeKind, ShapeParams, SHAPE_KINDS};
