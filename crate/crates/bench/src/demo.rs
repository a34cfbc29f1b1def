//! A ready-to-serve demo directory: synthetic catalog, trained models and a
//! service config pointing at them.

use std::path::{Path, PathBuf};

use closet_core::demo::write_demo_dataset;
use closet_core::synth::StyleClusterSpec;
use closet_service::ServiceConfig;

use crate::experiments::{combiner_task, outfit_task};

pub const CONFIG_FILE: &str = "service.toml";

/// Writes the demo into `dir` and returns the config path.
pub fn write_demo(dir: &Path, seed: u64, listen: &str) -> anyhow::Result<PathBuf> {
    let spec = StyleClusterSpec {
        seed,
        ..Default::default()
    };
    let (files, _) = write_demo_dataset(dir, &spec)?;
    tracing::info!(dir = %dir.display(), "dataset written; training models");
    // Same recipe as train-demo, so the saved transformer matches the task.
    let outfit = outfit_task(seed)?;
    outfit.params.save(&dir.join("transformer.kktf"))?;
    let comb = combiner_task(seed)?;
    comb.params.save(&dir.join("combiner.kkcm"))?;

    let name = |p: &Path| PathBuf::from(p.file_name().expect("demo files have names"));
    let cfg = ServiceConfig {
        listen: listen.to_owned(),
        catalog: Some(name(&files.catalog)),
        embeddings: Some(name(&files.embeddings)),
        text_embeddings: Some(name(&files.text_embeddings)),
        combiner: Some("combiner.kkcm".into()),
        transformer: Some("transformer.kktf".into()),
        index_cache: Some("index.kkix".into()),
        seed,
        ..Default::default()
    };
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, toml::to_string(&cfg)?)?;
    Ok(path)
}
