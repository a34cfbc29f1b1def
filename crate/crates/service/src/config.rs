//! Service configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::Parser;
use closet_core::{IndexConfig, IndexKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PAGE_SIZE: usize = 12;
pub const DEFAULT_ALTERNATES: usize = 8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("missing required setting `{0}` (set it in the config file or pass --{0})")]
    Missing(&'static str),
    #[error("page_size = {0} is too small; result augmentation needs at least 4")]
    PageSize(usize),
    #[error("invalid listen address {0:?}")]
    Listen(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonConfig {
    pub id: String,
    pub image: PathBuf,
}

/// Everything the service needs at startup. Relative paths in a config file
/// are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub catalog: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Feedback-phrase embeddings keyed by phrase id, in the embedding
    /// file format.
    pub text_embeddings: Option<PathBuf>,
    /// Directory that item `image_ref`s are relative to.
    pub image_root: Option<PathBuf>,
    pub combiner: Option<PathBuf>,
    pub transformer: Option<PathBuf>,
    /// Persisted index. Loaded when it matches the embeddings, otherwise
    /// rebuilt and written back.
    pub index_cache: Option<PathBuf>,
    pub index: IndexConfig,
    /// Results per page: default `n` for searches and the `/items` page size.
    pub page_size: usize,
    pub alternates: usize,
    pub seed: u64,
    pub persons: Vec<PersonConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            catalog: None,
            embeddings: None,
            text_embeddings: None,
            image_root: None,
            combiner: None,
            transformer: None,
            index_cache: None,
            index: IndexConfig::default(),
            page_size: DEFAULT_PAGE_SIZE,
            alternates: DEFAULT_ALTERNATES,
            seed: 0,
            persons: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Parser)]
#[command(name = "closet-service", version, about = "Serve the closet retrieval and recommendation API")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, env = "KK_CONFIG")]
    pub config: Option<PathBuf>,
    /// Address to bind, e.g. 127.0.0.1:8080.
    #[arg(long)]
    pub listen: Option<String>,
    /// Line-delimited catalog records.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Binary embedding file matching the catalog.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// FLAT, IVF, HNSW or FOREST.
    #[arg(long)]
    pub index_kind: Option<IndexKind>,
    /// Trained combiner parameters.
    #[arg(long)]
    pub combiner: Option<PathBuf>,
    /// Trained outfit transformer parameters.
    #[arg(long)]
    pub transformer: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ServiceConfig {
    pub fn from_toml(text: &str, base: Option<&Path>, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg: ServiceConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_owned(),
            source,
        })?;
        if let Some(base) = base {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, path.parent(), &path.display().to_string())
    }

    /// Config file (if any) with the command-line flags layered on top.
    pub fn from_cli(cli: &Cli) -> Result<Self, ConfigError> {
        let mut cfg = match &cli.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(v) = &cli.listen {
            cfg.listen = v.clone();
        }
        if let Some(v) = &cli.catalog {
            cfg.catalog = Some(v.clone());
        }
        if let Some(v) = &cli.embeddings {
            cfg.embeddings = Some(v.clone());
        }
        if let Some(v) = cli.index_kind {
            cfg.index.kind = v;
        }
        if let Some(v) = &cli.combiner {
            cfg.combiner = Some(v.clone());
        }
        if let Some(v) = &cli.transformer {
            cfg.transformer = Some(v.clone());
        }
        if let Some(v) = cli.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.page_size < 4 {
            return Err(ConfigError::PageSize(self.page_size));
        }
        if self.catalog.is_none() {
            return Err(ConfigError::Missing("catalog"));
        }
        if self.embeddings.is_none() {
            return Err(ConfigError::Missing("embeddings"));
        }
        self.listen
            .parse::<std::net::SocketAddr>()
            .map_err(|_| ConfigError::Listen(self.listen.clone()))?;
        Ok(())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.catalog);
        fix(&mut self.embeddings);
        fix(&mut self.text_embeddings);
        fix(&mut self.image_root);
        fix(&mut self.combiner);
        fix(&mut self.transformer);
        fix(&mut self.index_cache);
        for p in &mut self.persons {
            if p.image.is_relative() {
                p.image = base.join(&p.image);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        listen = "0.0.0.0:9000"
        catalog = "data/catalog.jsonl"
        embeddings = "/abs/emb.kkem"
        page_size = 16
        seed = 4

        [index]
        kind = "IVF"
        ivf_nlist = 32

        [[persons]]
        id = "model-1"
        image = "persons/m1.png"
    "#;

    #[test]
    fn toml_parses_and_resolves_paths() {
        let cfg = ServiceConfig::from_toml(SAMPLE, Some(Path::new("/etc/kk")), "sample").unwrap();
        assert_eq!(cfg.catalog.as_deref(), Some(Path::new("/etc/kk/data/catalog.jsonl")));
        assert_eq!(cfg.embeddings.as_deref(), Some(Path::new("/abs/emb.kkem")));
        assert_eq!(cfg.index.kind, IndexKind::Ivf);
        assert_eq!(cfg.index.ivf_nlist, 32);
        assert_eq!(cfg.index.hnsw_m, IndexConfig::default().hnsw_m);
        assert_eq!(cfg.persons[0].image, Path::new("/etc/kk/persons/m1.png"));
        assert_eq!(cfg.alternates, DEFAULT_ALTERNATES);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ServiceConfig::from_toml("pagesize = 3", None, "x"),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kk.toml");
        std::fs::write(&path, SAMPLE).unwrap();
        let cli = Cli::try_parse_from([
            "closet-service",
            "--config",
            path.to_str().unwrap(),
            "--index-kind",
            "forest",
            "--seed",
            "9",
            "--listen",
            "127.0.0.1:1234",
        ])
        .unwrap();
        let cfg = ServiceConfig::from_cli(&cli).unwrap();
        assert_eq!(cfg.index.kind, IndexKind::Forest);
        assert_eq!(cfg.index.ivf_nlist, 32, "file settings survive");
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.listen, "127.0.0.1:1234");
        assert_eq!(cfg.catalog, Some(dir.path().join("data/catalog.jsonl")));
    }

    #[test]
    fn validation() {
        let ok = ServiceConfig {
            catalog: Some("c".into()),
            embeddings: Some("e".into()),
            ..Default::default()
        };
        ok.validate().unwrap();
        assert!(matches!(
            ServiceConfig { page_size: 3, ..ok.clone() }.validate(),
            Err(ConfigError::PageSize(3))
        ));
        assert!(matches!(
            ServiceConfig { catalog: None, ..ok.clone() }.validate(),
            Err(ConfigError::Missing("catalog"))
        ));
        assert!(matches!(
            ServiceConfig { listen: "nowhere".into(), ..ok }.validate(),
            Err(ConfigError::Listen(_))
        ));
    }
}
