use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcvq::train::TrainConfig;
use pcvq::vqvae::Level;

/// Training settings plus the paths and level a run was started with.
/// Precedence: command-line flags, then the config file, then defaults.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub subset: Option<String>,
    pub vqvae: Option<PathBuf>,
    pub level: Option<Level>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut data = None;
        let mut subset = None;
        let mut vqvae = None;
        let mut level = None;
        let train = TrainConfig::from_ini_str_with(&text, |section, key, value| {
            let value = value.trim();
            match (section, key) {
                ("paths", "data") => data = Some(PathBuf::from(value)),
                ("paths", "subset") => subset = Some(value.to_string()),
                ("paths", "vqvae") => vqvae = Some(PathBuf::from(value)),
                ("prior", "level") => level = Some(value.parse()?),
                _ => return Ok(false),
            }
            Ok(true)
        })
        .with_context(|| format!("in config {}", path.display()))?;
        Ok(Self {
            train,
            data,
            subset,
            vqvae,
            level,
        })
    }

    /// Resolved settings in the config file format.
    pub fn to_ini_string(&self) -> String {
        let mut s = self.train.to_ini_string();
        let mut paths = Vec::new();
        if let Some(d) = &self.data {
            paths.push(format!("data = {}", d.display()));
        }
        if let Some(sub) = &self.subset {
            paths.push(format!("subset = {sub}"));
        }
        if let Some(v) = &self.vqvae {
            paths.push(format!("vqvae = {}", v.display()));
        }
        if !paths.is_empty() {
            s.push_str("\n[paths]\n");
            for p in paths {
                s.push_str(&p);
                s.push('\n');
            }
        }
        if let Some(level) = self.level {
            s.push_str(&format!("\n[prior]\nlevel = {level}\n"));
        }
        s
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ini_string()).with_context(|| format!("writing {}", path.display()))
    }
}
