//! Small datasets and training setups shared by integration tests.

use std::path::Path;

use r3d_core::datapipe::{generate_synthetic_dataset, AugmentConfig, DatasetManifest, SyntheticConfig};
use r3d_core::trainer::{TrainConfig, Trainer};
use r3d_core::ArchitectureSpec;

pub fn dataset(dir: &Path, classes: usize, per_class: usize, frames: usize, size: [usize; 2]) -> DatasetManifest {
    generate_synthetic_dataset(dir, &SyntheticConfig::new(classes, per_class, frames, size, 0)).unwrap()
}

/// Augmentation matching the miniature clip shape.
pub fn miniature_augment() -> AugmentConfig {
    AugmentConfig { clip_len: 8, output_size: 32, ..AugmentConfig::default() }
}

pub fn miniature_trainer(manifest: DatasetManifest, train: TrainConfig) -> Trainer {
    let spec = ArchitectureSpec::preset("miniature", manifest.num_classes()).unwrap();
    Trainer::new(&spec, manifest, train, miniature_augment()).unwrap()
}

/// Every parameter and running statistic, as raw bits.
pub fn state_bits(t: &Trainer) -> Vec<Vec<u32>> {
    let g = t.net.graph();
    (0..g.params().len())
        .map(|i| g.param(i))
        .chain((0..g.buffers().len()).map(|i| g.buffer(i)))
        .map(|x| x.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}
