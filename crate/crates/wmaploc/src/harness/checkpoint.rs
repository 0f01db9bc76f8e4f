use std::path::Path;

use anyhow::{bail, Context};

use crate::diffcore::ParamStore;
use crate::models::Network;

/// Checkpoint metadata carried in the parameter-store header.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    /// Mean validation mass-in-box score, for generator checkpoints.
    pub mean_s: Option<f64>,
}

pub fn save_checkpoint(
    net: &impl Network,
    path: &Path,
    meta: &CheckpointMeta,
) -> anyhow::Result<()> {
    let mut store = net.to_store();
    store.set_meta("epoch", meta.epoch);
    store.set_meta("config_hash", &meta.config_hash);
    store.set_meta("seed", meta.seed);
    if let Some(s) = meta.mean_s {
        store.set_meta("mean_s", s);
    }
    store.save(path).with_context(|| format!("saving checkpoint {}", path.display()))?;
    Ok(())
}

/// Load a checkpoint into an existing network, verifying the recorded
/// configuration scope hash.
pub fn load_checkpoint(
    net: &impl Network,
    path: &Path,
    expected_hash: &str,
) -> anyhow::Result<CheckpointMeta> {
    let store = ParamStore::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let meta = read_meta(&store, path)?;
    if meta.config_hash != expected_hash {
        bail!(
            "checkpoint {} was trained under an incompatible configuration \
             (hash {}.. != expected {}..)",
            path.display(),
            &meta.config_hash[..12.min(meta.config_hash.len())],
            &expected_hash[..12.min(expected_hash.len())]
        );
    }
    net.load_store(&store)
        .with_context(|| format!("applying checkpoint {}", path.display()))?;
    Ok(meta)
}

fn read_meta(store: &ParamStore, path: &Path) -> anyhow::Result<CheckpointMeta> {
    let get = |key: &str| -> anyhow::Result<&str> {
        store
            .get_meta(key)
            .ok_or_else(|| anyhow::anyhow!("checkpoint {} lacks meta '{key}'", path.display()))
    };
    Ok(CheckpointMeta {
        epoch: get("epoch")?.parse().context("bad epoch meta")?,
        config_hash: get("config_hash")?.to_string(),
        seed: get("seed")?.parse().context("bad seed meta")?,
        mean_s: match store.get_meta("mean_s") {
            Some(v) => Some(v.parse().context("bad mean_s meta")?),
            None => None,
        },
    })
}
