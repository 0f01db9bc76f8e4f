//! Experiment orchestration: configuration, checkpoints, the three
//! training loops, epoch scoring, checkpoint selection, evaluation, and the
//! command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use config::{Method, ModelConfig, OptConfig, Overrides, RunConfig};
pub use eval::{select_and_evaluate, Report};
pub use train::{run_all, train_classifier, train_embedder, train_generator, FrozenF};

use anyhow::bail;

/// Generate the dataset at the configured root if absent; if present, its
/// recorded spec must match the configuration exactly.
pub fn ensure_dataset(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = &cfg.dataset_root;
    if root.join("spec.json").exists() {
        let on_disk = crate::synthdata::read_spec(root)?;
        if on_disk != cfg.dataset {
            bail!(
                "dataset at {} was generated with a different spec; \
                 delete it or point dataset_root elsewhere",
                root.display()
            );
        }
        return Ok(());
    }
    crate::synthdata::generate(&cfg.dataset, root)?;
    Ok(())
}
