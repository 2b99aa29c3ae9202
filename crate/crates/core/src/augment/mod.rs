//! Phased data augmentation: per-phase transform ranges, the iteration
//! schedule between phases, and the fixed baseline policies.

mod transforms;

use std::fmt;
use std::str::FromStr;

pub use transforms::{
    color_jitter, color_jitter_with, flip, flip_with, rotate, rotate_with, upscale_center_crop, zoom,
    zoom_with, zoomed_len, CONSTANT_UPSCALE, LUMA,
};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::SampleRng;

/// Transform ranges active during one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePolicy {
    pub flip_enabled: bool,
    pub rotation_max_deg: f64,
    pub zoom_enabled: bool,
    pub zoom_lo: f64,
    pub zoom_hi: f64,
    pub color_param: f64,
}

impl PhasePolicy {
    /// Full-strength policy that opens the phased schedule.
    pub const INITIAL: PhasePolicy = PhasePolicy {
        flip_enabled: true,
        rotation_max_deg: 180.0,
        zoom_enabled: true,
        zoom_lo: 1.05,
        zoom_hi: 1.30,
        color_param: 0.30,
    };

    /// Only the constant upscale-crop normalization remains.
    pub const IDENTITY: PhasePolicy = PhasePolicy {
        flip_enabled: false,
        rotation_max_deg: 0.0,
        zoom_enabled: false,
        zoom_lo: 1.05,
        zoom_hi: 1.30,
        color_param: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::Config(format!("rotation range {} outside [0, 180]", self.rotation_max_deg)));
        }
        if self.zoom_lo > self.zoom_hi {
            return Err(Error::Config(format!("zoom range [{}, {}] is inverted", self.zoom_lo, self.zoom_hi)));
        }
        if self.zoom_enabled && (self.zoom_lo < 1.0 || self.zoom_hi > 2.0) {
            return Err(Error::Config(format!(
                "zoom range [{}, {}] outside [1, 2]",
                self.zoom_lo, self.zoom_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.color_param) {
            return Err(Error::Config(format!("color parameter {} outside [0, 1]", self.color_param)));
        }
        Ok(())
    }
}

/// Base phase lengths in iterations before scaling.
pub const DEFAULT_PHASE_LENGTHS: [u64; 6] = [10_000, 10_000, 10_000, 10_000, 5_000, 5_000];

/// The six default policies, each restricting its predecessor.
pub fn default_phase_policies() -> [PhasePolicy; 6] {
    let p1 = PhasePolicy::INITIAL;
    let p2 = PhasePolicy {
        rotation_max_deg: 18.0,
        ..p1
    };
    let p3 = PhasePolicy {
        rotation_max_deg: 0.0,
        ..p2
    };
    let p4 = PhasePolicy {
        zoom_enabled: false,
        ..p3
    };
    let p5 = PhasePolicy {
        color_param: 0.15,
        ..p4
    };
    let p6 = PhasePolicy {
        color_param: 0.0,
        ..p5
    };
    [p1, p2, p3, p4, p5, p6]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    phases: Vec<(PhasePolicy, u64)>,
    scale: f64,
}

impl PhaseSchedule {
    /// Builds a schedule from base lengths; each is scaled and floored, with a
    /// minimum of one iteration.
    pub fn new(phases: Vec<(PhasePolicy, u64)>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("schedule scale {scale} must be positive")));
        }
        if phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        for (policy, len) in &phases {
            policy.validate()?;
            if *len == 0 {
                return Err(Error::Config("phase length must be positive".into()));
            }
        }
        Ok(Self { phases, scale })
    }

    pub fn phased(scale: f64) -> Result<Self> {
        let phases = default_phase_policies()
            .into_iter()
            .zip(DEFAULT_PHASE_LENGTHS)
            .collect();
        Self::new(phases, scale)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn policies(&self) -> impl Iterator<Item = &PhasePolicy> {
        self.phases.iter().map(|(p, _)| p)
    }

    pub fn scaled_lengths(&self) -> Vec<u64> {
        self.phases
            .iter()
            .map(|(_, len)| ((*len as f64 * self.scale).floor() as u64).max(1))
            .collect()
    }

    /// Cumulative end iteration of every phase.
    pub fn boundaries(&self) -> Vec<u64> {
        self.scaled_lengths()
            .into_iter()
            .scan(0, |acc, len| {
                *acc += len;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_iterations(&self) -> u64 {
        self.scaled_lengths().iter().sum()
    }

    /// 1-based phase index and policy for `iteration`, using half-open
    /// intervals `[start, end)`.
    pub fn policy_for_iteration(&self, iteration: u64) -> Result<(usize, PhasePolicy)> {
        let idx = self
            .boundaries()
            .iter()
            .position(|&end| iteration < end)
            .ok_or_else(|| {
                Error::Range(format!(
                    "iteration {iteration} is beyond the {}-iteration schedule",
                    self.total_iterations()
                ))
            })?;
        Ok((idx + 1, self.phases[idx].0))
    }
}

/// Free-function form of [`PhaseSchedule::policy_for_iteration`].
pub fn policy_for_iteration(schedule: &PhaseSchedule, iteration: u64) -> Result<(usize, PhasePolicy)> {
    schedule.policy_for_iteration(iteration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugMode {
    Phased,
    Standard,
    None,
}

impl AugMode {
    /// Constant policy of the baseline modes; `None` for the phased mode.
    pub fn fixed_policy(self) -> Option<PhasePolicy> {
        match self {
            AugMode::Phased => None,
            AugMode::Standard => Some(PhasePolicy {
                color_param: 0.15,
                ..PhasePolicy::INITIAL
            }),
            AugMode::None => Some(PhasePolicy::IDENTITY),
        }
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugMode::Phased => "phased",
            AugMode::Standard => "standard",
            AugMode::None => "none",
        })
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phased" => Ok(AugMode::Phased),
            "standard" => Ok(AugMode::Standard),
            "none" => Ok(AugMode::None),
            other => Err(Error::Config(format!(
                "unknown augmentation mode '{other}' (expected phased|standard|none)"
            ))),
        }
    }
}

/// Runs flip, upscale/rotate/crop, zoom and color jitter in that order,
/// skipping disabled stages. The upscale-crop normalization always runs.
pub fn apply(img: &ImageTensor, policy: &PhasePolicy, rng: &mut SampleRng) -> Result<ImageTensor> {
    let mut out = if policy.flip_enabled {
        flip(img, rng)
    } else {
        img.clone()
    };
    out = rotate(&out, policy.rotation_max_deg, rng)?;
    if policy.zoom_enabled {
        out = zoom(&out, policy.zoom_lo, policy.zoom_hi, rng)?;
    }
    color_jitter(&out, policy.color_param, rng)
}
