use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Latent export format version.
pub const LATENT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Top,
    Bottom,
}

impl Level {
    fn code(self) -> u32 {
        match self {
            Level::Top => 0,
            Level::Bottom => 1,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Top => "top",
            Level::Bottom => "bottom",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Level::Top),
            "bottom" => Ok(Level::Bottom),
            other => Err(Error::Config(format!("unknown level '{other}' (expected top|bottom)"))),
        }
    }
}

/// Square grid of codebook indices for one hierarchy level, raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMap {
    pub level: Level,
    pub side: usize,
    pub values: Vec<usize>,
}

impl LatentMap {
    pub fn new(level: Level, side: usize, values: Vec<usize>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::Shape(format!("{} values for a {side}x{side} latent map", values.len())));
        }
        Ok(Self { level, side, values })
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.values[y * self.side + x]
    }

    pub fn check_codes(&self, k: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v >= k) {
            Some(v) => Err(Error::Index(format!("latent index {v} outside codebook of {k}"))),
            None => Ok(()),
        }
    }

    /// Little-endian `u32` stream: header `(level, side, K, version)` then
    /// `side * side` indices.
    pub fn write_to(&self, k: usize, mut w: impl Write) -> Result<()> {
        for v in [self.level.code(), self.side as u32, k as u32, LATENT_FORMAT_VERSION] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a map written by [`LatentMap::write_to`], returning it with `K`.
    pub fn read_from(mut r: impl Read) -> Result<(Self, usize)> {
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("truncated latent map: {e}")))?;
            Ok(u32::from_le_bytes(b))
        };
        let level = match word()? {
            0 => Level::Top,
            1 => Level::Bottom,
            other => return Err(Error::Format(format!("bad latent level code {other}"))),
        };
        let side = word()? as usize;
        let k = word()? as usize;
        let version = word()?;
        if version != LATENT_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: LATENT_FORMAT_VERSION,
                found: version,
            });
        }
        let values = (0..side * side)
            .map(|_| word().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let map = Self::new(level, side, values)?;
        map.check_codes(k)?;
        Ok((map, k))
    }
}
