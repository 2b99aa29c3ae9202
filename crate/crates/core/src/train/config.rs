use std::fmt::Write as _;
use std::path::Path;

use ini::Ini;

use crate::augment::{AugMode, PhaseSchedule, DEFAULT_PHASE_LENGTHS};
use crate::error::{Error, Result};
use crate::pixelcnn::PriorConfig;
use crate::vqvae::VqConfig;

/// Every knob of a run. Sections and keys mirror the config file layout;
/// see [`TrainConfig::to_ini_string`] for the full list.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub aug_mode: AugMode,
    pub base_lr: f64,
    pub batch_size: usize,
    pub scale: f64,
    /// Unscaled iteration counts.
    pub vqvae_iterations: u64,
    pub prior_iterations: u64,
    pub lr_factors: [f64; 6],
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub vq: VqConfig,
    pub prior_channels: usize,
    pub top_blocks: usize,
    pub bottom_blocks: usize,
    pub dropout: f64,
    pub attention_every: Option<usize>,
    pub n_generated: usize,
    pub temperature: f64,
    pub features: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            aug_mode: AugMode::Phased,
            base_lr: 3e-4,
            batch_size: 32,
            scale: 1.0,
            vqvae_iterations: 4000,
            prior_iterations: DEFAULT_PHASE_LENGTHS.iter().sum(),
            lr_factors: [1.0, 10.0, 40.0, 100.0, 500.0, 1000.0],
            grad_clip: Some(10.0),
            vq: VqConfig::default(),
            prior_channels: 32,
            top_blocks: 4,
            bottom_blocks: 6,
            dropout: 0.2,
            attention_every: Some(2),
            n_generated: 500,
            temperature: 1.0,
            features: "fixed:0".into(),
        }
    }
}

fn scaled(n: u64, scale: f64) -> u64 {
    ((n as f64 * scale).floor() as u64).max(1)
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse '{value}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale {} must be positive", self.scale));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.lr_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return bad(format!("lr_factors {:?} must be positive", self.lr_factors));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.n_generated == 0 {
            return bad("n_generated must be positive".into());
        }
        self.vq.validate()?;
        if self.aug_mode == AugMode::Phased {
            let schedule_total: u64 = DEFAULT_PHASE_LENGTHS.iter().sum();
            if self.prior_iterations != schedule_total {
                return bad(format!(
                    "phased training needs prior_iterations = {schedule_total} (sum of phase lengths), got {}",
                    self.prior_iterations
                ));
            }
        }
        if self.prior_iteration_count()? < 6 {
            return bad(format!("scale {} leaves fewer prior iterations than phases", self.scale));
        }
        self.prior_config(crate::vqvae::Level::Top).validate()?;
        self.prior_config(crate::vqvae::Level::Bottom).validate()
    }

    pub fn schedule(&self) -> Result<PhaseSchedule> {
        PhaseSchedule::phased(self.scale)
    }

    pub fn vqvae_iteration_count(&self) -> u64 {
        scaled(self.vqvae_iterations, self.scale)
    }

    pub fn prior_iteration_count(&self) -> Result<u64> {
        match self.aug_mode {
            AugMode::Phased => Ok(self.schedule()?.total_iterations()),
            _ => Ok(scaled(self.prior_iterations, self.scale)),
        }
    }

    pub fn prior_config(&self, level: crate::vqvae::Level) -> PriorConfig {
        use crate::vqvae::Level;
        let (k, t) = (self.vq.codebook_size, self.vq.top_grid());
        let base = match level {
            Level::Top => PriorConfig::top(k, t),
            Level::Bottom => PriorConfig::bottom(k, self.vq.bottom_grid, k, t),
        };
        PriorConfig {
            channels: self.prior_channels,
            blocks: match level {
                Level::Top => self.top_blocks,
                Level::Bottom => self.bottom_blocks,
            },
            dropout: self.dropout,
            attention_every: match level {
                Level::Top => self.attention_every,
                Level::Bottom => None,
            },
            ..base
        }
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match (section, key) {
            ("run", "seed") => self.seed = parse(section, key, v)?,
            ("augment", "mode") => self.aug_mode = v.parse()?,
            ("data", "resolution") => self.vq.resolution = parse(section, key, v)?,
            ("train", "base_lr") => self.base_lr = parse(section, key, v)?,
            ("train", "batch_size") => self.batch_size = parse(section, key, v)?,
            ("train", "scale") => self.scale = parse(section, key, v)?,
            ("train", "vqvae_iterations") => self.vqvae_iterations = parse(section, key, v)?,
            ("train", "prior_iterations") => self.prior_iterations = parse(section, key, v)?,
            ("train", "lr_factors") => {
                let f = v
                    .split(',')
                    .map(|s| parse::<f64>(section, key, s))
                    .collect::<Result<Vec<_>>>()?;
                self.lr_factors = f
                    .try_into()
                    .map_err(|f: Vec<f64>| Error::Config(format!("lr_factors needs 6 entries, got {}", f.len())))?;
            }
            ("train", "grad_clip") => {
                let c: f64 = parse(section, key, v)?;
                self.grad_clip = (c != 0.0).then_some(c);
            }
            ("vqvae", "hidden") => self.vq.hidden = parse(section, key, v)?,
            ("vqvae", "res_blocks") => self.vq.res_blocks = parse(section, key, v)?,
            ("vqvae", "codebook_size") => self.vq.codebook_size = parse(section, key, v)?,
            ("vqvae", "code_dim") => self.vq.code_dim = parse(section, key, v)?,
            ("vqvae", "bottom_grid") => self.vq.bottom_grid = parse(section, key, v)?,
            ("vqvae", "beta") => self.vq.beta = parse(section, key, v)?,
            ("vqvae", "gamma") => self.vq.gamma = parse(section, key, v)?,
            ("vqvae", "epsilon") => self.vq.epsilon = parse(section, key, v)?,
            ("prior", "channels") => self.prior_channels = parse(section, key, v)?,
            ("prior", "top_blocks") => self.top_blocks = parse(section, key, v)?,
            ("prior", "bottom_blocks") => self.bottom_blocks = parse(section, key, v)?,
            ("prior", "dropout") => self.dropout = parse(section, key, v)?,
            ("prior", "attention_every") => {
                let n: usize = parse(section, key, v)?;
                self.attention_every = (n > 0).then_some(n);
            }
            ("eval", "n_generated") => self.n_generated = parse(section, key, v)?,
            ("eval", "temperature") => self.temperature = parse(section, key, v)?,
            ("eval", "features") => self.features = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key [{section}] {key}"))),
        }
        Ok(())
    }

    /// Defaults overridden by every entry of an INI-style document.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        Self::from_ini_str_with(text, |_, _, _| Ok(false))
    }

    /// Like [`TrainConfig::from_ini_str`], but offers every entry to `extra`
    /// first; entries it accepts (returns `true` for) are not applied here.
    pub fn from_ini_str_with(text: &str, mut extra: impl FnMut(&str, &str, &str) -> Result<bool>) -> Result<Self> {
        let doc = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut cfg = Self::default();
        for (section, props) in doc.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key '{k}' outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                if !extra(section, k, v)? {
                    cfg.set(section, k, v)?;
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini_str(&text)
    }

    /// Fully resolved config; parsing it back yields an equal value.
    pub fn to_ini_string(&self) -> String {
        let mut s = String::new();
        let f = &self.lr_factors;
        let _ = write!(
            s,
            "[run]\nseed = {}\n\n[augment]\nmode = {}\n\n[data]\nresolution = {}\n\n\
             [train]\nbase_lr = {}\nbatch_size = {}\nscale = {}\nvqvae_iterations = {}\n\
             prior_iterations = {}\nlr_factors = {},{},{},{},{},{}\ngrad_clip = {}\n\n\
             [vqvae]\nhidden = {}\nres_blocks = {}\ncodebook_size = {}\ncode_dim = {}\n\
             bottom_grid = {}\nbeta = {}\ngamma = {}\nepsilon = {}\n\n\
             [prior]\nchannels = {}\ntop_blocks = {}\nbottom_blocks = {}\ndropout = {}\n\
             attention_every = {}\n\n[eval]\nn_generated = {}\ntemperature = {}\nfeatures = {}\n",
            self.seed,
            self.aug_mode,
            self.vq.resolution,
            self.base_lr,
            self.batch_size,
            self.scale,
            self.vqvae_iterations,
            self.prior_iterations,
            f[0],
            f[1],
            f[2],
            f[3],
            f[4],
            f[5],
            self.grad_clip.unwrap_or(0.0),
            self.vq.hidden,
            self.vq.res_blocks,
            self.vq.codebook_size,
            self.vq.code_dim,
            self.vq.bottom_grid,
            self.vq.beta,
            self.vq.gamma,
            self.vq.epsilon,
            self.prior_channels,
            self.top_blocks,
            self.bottom_blocks,
            self.dropout,
            self.attention_every.unwrap_or(0),
            self.n_generated,
            self.temperature,
            self.features,
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.scale = 0.013;
        cfg.base_lr = 1.0 / 3.0;
        cfg.aug_mode = AugMode::Standard;
        cfg.grad_clip = None;
        let back = TrainConfig::from_ini_str(&cfg.to_ini_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = TrainConfig::from_ini_str("[train]\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(TrainConfig::from_ini_str("[bogus]\nseed = 1\n").is_err());
        assert!(TrainConfig::from_ini_str("seed = 1\n").is_err());
    }

    #[test]
    fn lr_factor_count_is_checked() {
        assert!(TrainConfig::from_ini_str("[train]\nlr_factors = 1,2,3\n").is_err());
    }

    #[test]
    fn phased_iteration_mismatch_is_rejected() {
        let cfg = TrainConfig {
            prior_iterations: 1000,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            aug_mode: AugMode::Standard,
            ..cfg
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn tiny_scale_keeps_one_iteration_per_phase() {
        let cfg = TrainConfig {
            scale: 1e-9,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.prior_iteration_count().unwrap(), 6);
        assert_eq!(cfg.vqvae_iteration_count(), 1);
    }
}
