//! On-disk demo dataset built from the synthetic style-cluster task.

use std::path::{Path, PathBuf};

use crate::catalog::{encode_embeddings, write_catalog_files};
use crate::synth::{gaussian_vectors, style_cluster_task, StyleClusterSpec, StyleClusterTask};

/// Feedback phrases shipped as text-embedding fixtures.
pub const FEEDBACK_KEYS: [&str; 5] = ["colorful-top", "darker-shade", "longer-sleeves", "more-casual", "more-formal"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoFiles {
    pub catalog: PathBuf,
    pub embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    pub outfits: PathBuf,
}

impl DemoFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            catalog: dir.join("catalog.jsonl"),
            embeddings: dir.join("embeddings.kkem"),
            text_embeddings: dir.join("text.kkem"),
            outfits: dir.join("outfits.jsonl"),
        }
    }
}

/// Writes the catalog, its embeddings, the feedback fixtures and the
/// training outfits into `dir`. Returns the task for further use.
pub fn write_demo_dataset(dir: &Path, spec: &StyleClusterSpec) -> std::io::Result<(DemoFiles, StyleClusterTask)> {
    std::fs::create_dir_all(dir)?;
    let files = DemoFiles::in_dir(dir);
    let task = style_cluster_task(spec);
    let cat = &task.catalog;
    let items: Vec<_> = cat
        .items()
        .iter()
        .map(|it| (it.id.clone(), it.category, it.image_ref.clone()))
        .collect();
    let vectors: Vec<Vec<f32>> = cat.items().iter().map(|it| cat.embedding(it).to_vec()).collect();
    write_catalog_files(&items, cat.dim(), &vectors, &files.catalog, &files.embeddings)?;

    let texts = gaussian_vectors(FEEDBACK_KEYS.len(), cat.dim(), spec.seed ^ 0x7e47);
    let bytes = encode_embeddings(cat.dim(), FEEDBACK_KEYS.iter().copied().zip(texts.iter().map(Vec::as_slice)));
    std::fs::write(&files.text_embeddings, bytes)?;

    let mut lines = String::new();
    for o in &task.train_outfits {
        lines.push_str(&serde_json::to_string(o).map_err(std::io::Error::other)?);
        lines.push('\n');
    }
    std::fs::write(&files.outfits, lines)?;
    Ok((files, task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{decode_embeddings, load_catalog};
    use crate::transformer::load_outfits;

    #[test]
    fn demo_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = StyleClusterSpec {
            clusters: 3,
            outfits_per_cluster: 4,
            ..Default::default()
        };
        let (files, task) = write_demo_dataset(dir.path(), &spec).unwrap();
        let cat = load_catalog(&files.catalog, &files.embeddings).unwrap();
        assert_eq!(cat.items(), task.catalog.items());
        // Rows are re-normalized on load, which may move the last bit.
        let (a, b) = (cat.store().data(), task.catalog.store().data());
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
        let (dim, texts) = decode_embeddings(&std::fs::read(&files.text_embeddings).unwrap()).unwrap();
        assert_eq!(dim, 32);
        assert_eq!(texts.iter().map(|t| t.0.as_str()).collect::<Vec<_>>(), FEEDBACK_KEYS);
        assert_eq!(load_outfits(&files.outfits).unwrap(), task.train_outfits);
    }
}
