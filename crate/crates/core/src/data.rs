//! Image folders, subset manifests and a synthetic shapes corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

/// Ordered list of image files under `root`, plus the size images are
/// resized to on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub resolution: usize,
    /// Paths relative to `root`.
    pub files: Vec<String>,
}

/// Selection of positions in a lexicographic file listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subset {
    /// Inclusive range `a-b`.
    Range(usize, usize),
    /// Explicit comma-separated positions.
    List(Vec<usize>),
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad subset spec '{s}' (expected a-b or i,j,k)"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        if let Some((a, b)) = s.split_once('-') {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(bad());
            }
            Ok(Subset::Range(a, b))
        } else {
            s.split(',').map(num).collect::<Result<_>>().map(Subset::List)
        }
    }
}

impl Subset {
    pub fn indices(&self) -> Vec<usize> {
        match self {
            Subset::Range(a, b) => (*a..=*b).collect(),
            Subset::List(v) => v.clone(),
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Relative paths of every PNG below `root`, sorted byte-wise.
pub fn list_images(root: &Path) -> Result<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else if is_image(&path) {
                let rel = path.strip_prefix(root).expect("walked under root");
                let rel = rel
                    .to_str()
                    .ok_or_else(|| Error::Ingestion {
                        path: path.clone(),
                        reason: "file name is not valid UTF-8".into(),
                    })?
                    .replace(std::path::MAIN_SEPARATOR, "/");
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort_unstable_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
    Ok(out)
}

impl DatasetManifest {
    /// Every image under `root`, optionally narrowed to `subset` positions.
    pub fn from_dir(root: &Path, resolution: usize, subset: Option<&Subset>) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        let all = list_images(root)?;
        let files = match subset {
            None => all,
            Some(s) => s
                .indices()
                .into_iter()
                .map(|i| {
                    all.get(i).cloned().ok_or_else(|| {
                        Error::Range(format!("subset index {i} outside listing of {} files", all.len()))
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            root: root.to_path_buf(),
            resolution,
            files,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Header `root<TAB>resolution<TAB>count`, then one path per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\t{}\t{}\n", self.root.display(), self.resolution, self.files.len());
        for f in &self.files {
            let _ = writeln!(s, "{f}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let parts: Vec<&str> = header.split('\t').collect();
        let [root, res, count] = parts[..] else {
            return Err(Error::Format(format!("bad manifest header '{header}'")));
        };
        let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad manifest header '{header}'")));
        let (resolution, count) = (parse(res)?, parse(count)?);
        let files: Vec<String> = lines.map(str::to_string).collect();
        if files.len() != count {
            return Err(Error::Format(format!("manifest lists {} files, header says {count}", files.len())));
        }
        Ok(Self {
            root: PathBuf::from(root),
            resolution,
            files,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// `n` files chosen uniformly without replacement, kept in listing order.
pub fn random_subset(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<DatasetManifest> {
    let len = manifest.files.len();
    if n > len {
        return Err(Error::Range(format!("cannot choose {n} of {len} files")));
    }
    let mut r = rng::stream(seed, "data.subset", &[]);
    let mut picked = index::sample(&mut r, len, n).into_vec();
    picked.sort_unstable();
    Ok(DatasetManifest {
        files: picked.into_iter().map(|i| manifest.files[i].clone()).collect(),
        ..manifest.clone()
    })
}

/// Decodes every manifest entry as RGB in `[0, 1]` at the target resolution.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<ImageTensor>> {
    if manifest.files.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", manifest.root.display())));
    }
    let r = manifest.resolution;
    manifest
        .files
        .iter()
        .map(|f| {
            let path = manifest.root.join(f);
            let img = ImageTensor::load_png(&path)?;
            let img = match img.channels() {
                3 => img,
                _ => ImageTensor::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0)),
            };
            let mut img = if img.height() == r && img.width() == r {
                img
            } else {
                img.resize_bilinear(r, r)?
            };
            img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Ok(img)
        })
        .collect()
}

/// One image of colored shapes on a two-color gradient.
pub fn synth_image(seed: u64, index: u64, resolution: usize) -> ImageTensor {
    let mut r = rng::stream(seed, "data.synth", &[index]);
    let color = |r: &mut rand_chacha::ChaCha8Rng| [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
    let (c0, c1) = (color(&mut r), color(&mut r));
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let res = resolution as f64;
    let mut img = ImageTensor::from_fn(resolution, resolution, 3, |y, x, c| {
        let t = (((y as f64 / res - 0.5) * dy + (x as f64 / res - 0.5) * dx) + 0.75) / 1.5;
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let shapes = r.random_range(1..=3);
    for _ in 0..shapes {
        let kind = r.random_range(0..3);
        let rgb = color(&mut r);
        let cy = r.random_range(0.2..0.8) * res;
        let cx = r.random_range(0.2..0.8) * res;
        let size = r.random_range(0.1..0.3) * res;
        for y in 0..resolution {
            for x in 0..resolution {
                let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match kind {
                    0 => py * py + px * px <= size * size,
                    1 => py.abs() <= size * 0.8 && px.abs() <= size,
                    _ => py <= size * 0.7 && py >= -size && px.abs() <= (py + size) * 0.6,
                };
                if inside {
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(y, x, c, *v);
                    }
                }
            }
        }
    }
    img
}

/// Writes `count` synthetic images named `img_00000.png`, ... into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, resolution: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:05}.png"));
            synth_image(seed, i as u64, resolution).save_png(&path, &[])?;
            Ok(path)
        })
        .collect()
}
