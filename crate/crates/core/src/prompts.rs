//! Prompt templates.
//!
//! The built-in set is compiled in. A directory can override any subset of
//! files by name (`with_overrides`) or supply the whole set (`from_dir`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::protocol::ToolKind;

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../assets/prompts/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin![
    "navigator",
    "navigator_repair",
    "catalog_search",
    "catalog_perceive",
    "catalog_code",
    "executor",
    "executor_no_tools",
    "tool_search",
    "tool_perceive",
    "tool_code",
    "usage_search",
    "usage_perceive",
    "usage_code",
    "example_search",
    "example_perceive",
    "example_code",
    "synthesizer",
    "refiner",
    "perceive",
    "code_revision",
    "code_print",
    "direct",
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing prompt asset '{name}' in {dir}")]
    MissingAsset { name: String, dir: PathBuf },
    #[error("unknown prompt asset '{0}'")]
    Unknown(String),
    #[error("cannot read prompt directory {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssets {
    files: BTreeMap<String, String>,
}

fn file_name(name: &str) -> String {
    format!("{name}.txt")
}

impl PromptAssets {
    pub fn builtin() -> Self {
        Self {
            files: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(k, _)| *k)
    }

    /// Builtins overlaid with whichever `<name>.txt` files exist in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        if !dir.is_dir() {
            return Err(PromptError::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            });
        }
        let mut assets = Self::builtin();
        for name in Self::names() {
            let path = dir.join(file_name(name));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path, source })?;
                assets.files.insert(name.to_string(), text);
            }
        }
        Ok(assets)
    }

    /// Every asset must be present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut files = BTreeMap::new();
        for name in Self::names() {
            let path = dir.join(file_name(name));
            if !path.is_file() {
                return Err(PromptError::MissingAsset {
                    name: name.to_string(),
                    dir: dir.to_path_buf(),
                });
            }
            let text =
                std::fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })?;
            files.insert(name.to_string(), text);
        }
        Ok(Self { files })
    }

    /// Write the current set to `dir`, one file per asset.
    pub fn export(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in &self.files {
            std::fs::write(dir.join(file_name(name)), text)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.files
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::Unknown(name.to_string()))
    }

    pub fn tool(&self, prefix: &str, kind: ToolKind) -> Result<&str, PromptError> {
        self.get(&format!("{prefix}_{}", kind.tag_name()))
    }

    /// Drop an asset, mostly for exercising the missing-asset path.
    pub fn remove(&mut self, name: &str) {
        self.files.remove(name);
    }
}

impl Default for PromptAssets {
    fn default() -> Self {
        Self::builtin()
    }
}
