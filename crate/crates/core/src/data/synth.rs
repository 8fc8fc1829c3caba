//! Deterministic synthetic image tasks.
//!
//! Base pixels are quantized to multiples of 1/256, which keeps
//! `p -> 1 - p` exact so inverting twice returns the original bits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{ImageShape, TaskDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Generator {
    /// Per-class random prototypes `0.5 ± separation·σ/2` plus Gaussian noise `σ`.
    GaussianBlobs {
        separation: f64,
    },
    /// Bars whose period and orientation depend on the class, random phase.
    Stripes,
    /// Checkerboards whose cell size depends on the class, random offset.
    Checkers,
    Invert(Box<Generator>),
    PermutePixels(Box<Generator>, u64),
    /// Quarter turn clockwise (swaps height and width).
    Rotate90(Box<Generator>),
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::GaussianBlobs { separation } => write!(f, "gaussian-blobs({separation})"),
            Generator::Stripes => write!(f, "stripes"),
            Generator::Checkers => write!(f, "checkers"),
            Generator::Invert(g) => write!(f, "invert({g})"),
            Generator::PermutePixels(g, s) => write!(f, "permute-pixels({g}, {s})"),
            Generator::Rotate90(g) => write!(f, "rotate90({g})"),
        }
    }
}

/// Splits `a(b), c` at the top-level comma.
fn split_args(s: &str) -> Vec<&str> {
    let mut depth = 0;
    let mut start = 0;
    let mut out = Vec::new();
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], split_args(&s[i + 1..s.len() - 1])),
            Some(_) => return Err(Error::config(format!("unbalanced generator `{s}`"))),
            None => (s, Vec::new()),
        };
        let bad = || Error::config(format!("bad arguments in generator `{s}`"));
        match (head.trim(), args.as_slice()) {
            ("gaussian-blobs", []) => Ok(Generator::GaussianBlobs { separation: 6.0 }),
            ("gaussian-blobs", [sep]) => Ok(Generator::GaussianBlobs {
                separation: sep.parse().map_err(|_| bad())?,
            }),
            ("stripes", []) => Ok(Generator::Stripes),
            ("checkers", []) => Ok(Generator::Checkers),
            ("invert", [inner]) => Ok(Generator::Invert(Box::new(inner.parse()?))),
            ("rotate90", [inner]) => Ok(Generator::Rotate90(Box::new(inner.parse()?))),
            ("permute-pixels", [inner, seed]) => Ok(Generator::PermutePixels(
                Box::new(inner.parse()?),
                seed.parse().map_err(|_| bad())?,
            )),
            (h, _)
                if [
                    "gaussian-blobs",
                    "stripes",
                    "checkers",
                    "invert",
                    "rotate90",
                    "permute-pixels",
                ]
                .contains(&h) =>
            {
                Err(bad())
            }
            (h, _) => Err(Error::config(format!("unknown generator `{h}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub generator: Generator,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub height: u16,
    pub width: u16,
    pub classes: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(generator: Generator, seed: u64, train: usize, test: usize) -> Self {
        Self {
            generator,
            seed,
            train,
            test,
            height: 8,
            width: 8,
            classes: 4,
            noise: 0.1,
        }
    }
}

fn quantize(p: f64) -> f64 {
    (p.clamp(0.0, 1.0) * 256.0).round() / 256.0
}

pub fn synthesize(spec: &SynthSpec) -> Result<TaskDataset> {
    if spec.classes < 1 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config(
            "synthetic task needs at least one class and a non-empty image",
        ));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("noise must be non-negative"));
    }
    build(&spec.generator, spec)
}

/// A per-sample image transform applied to a whole dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// `p -> 1 - p`.
    Invert,
    /// A fixed pixel shuffle drawn from the seed.
    PermutePixels(u64),
    /// Quarter turn clockwise (swaps height and width).
    Rotate90,
    /// Left-right mirror.
    FlipHorizontal,
    /// Cuts the image into `size`-square tiles and shuffles their positions.
    ShuffleBlocks(u16, u64),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Invert => write!(f, "invert"),
            Transform::PermutePixels(s) => write!(f, "permute-pixels({s})"),
            Transform::Rotate90 => write!(f, "rotate90"),
            Transform::FlipHorizontal => write!(f, "flip-horizontal"),
            Transform::ShuffleBlocks(size, seed) => write!(f, "shuffle-blocks({size},{seed})"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "invert" => Ok(Transform::Invert),
            "rotate90" => Ok(Transform::Rotate90),
            "flip-horizontal" => Ok(Transform::FlipHorizontal),
            _ if s.starts_with("shuffle-blocks(") => s
                .strip_prefix("shuffle-blocks(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|args| args.split_once(','))
                .and_then(|(a, b)| {
                    Some(Transform::ShuffleBlocks(
                        a.trim().parse().ok()?,
                        b.trim().parse().ok()?,
                    ))
                })
                .ok_or_else(|| {
                    Error::config(format!(
                        "bad transform `{s}`; expected shuffle-blocks(size,seed)"
                    ))
                }),
            _ => s
                .strip_prefix("permute-pixels(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|seed| seed.trim().parse().ok())
                .map(Transform::PermutePixels)
                .ok_or_else(|| Error::config(format!("unknown transform `{s}`"))),
        }
    }
}

/// Applies `t` to every sample of both splits; labels are kept.
pub fn apply_transform(
    base: &TaskDataset,
    t: &Transform,
    name: impl Into<String>,
) -> Result<TaskDataset> {
    match t {
        Transform::Invert => {
            base.map_samples(name, base.shape(), |x| x.iter().map(|p| 1.0 - p).collect())
        }
        Transform::PermutePixels(seed) => {
            let mut perm: Vec<usize> = (0..base.dim()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            base.map_samples(name, base.shape(), |x| perm.iter().map(|&i| x[i]).collect())
        }
        Transform::Rotate90 => {
            let s = base.shape();
            let (h, w, c) = (s.height as usize, s.width as usize, s.channels as usize);
            let rotated = ImageShape::new(s.width, s.height, s.channels);
            base.map_samples(name, rotated, |x| {
                // new[r][col] = old[h - 1 - col][r]; new is w x h.
                let mut out = vec![0.0; x.len()];
                for r in 0..w {
                    for col in 0..h {
                        for ch in 0..c {
                            out[(r * h + col) * c + ch] = x[((h - 1 - col) * w + r) * c + ch];
                        }
                    }
                }
                out
            })
        }
        Transform::FlipHorizontal => {
            let s = base.shape();
            let (w, c) = (s.width as usize, s.channels as usize);
            base.map_samples(name, s, |x| {
                let mut out = vec![0.0; x.len()];
                for (i, px) in out.chunks_mut(c).enumerate() {
                    let (r, col) = (i / w, i % w);
                    let src = (r * w + (w - 1 - col)) * c;
                    px.copy_from_slice(&x[src..src + c]);
                }
                out
            })
        }
        Transform::ShuffleBlocks(size, seed) => {
            let s = base.shape();
            let b = *size as usize;
            if b == 0
                || !(s.height as usize).is_multiple_of(b)
                || !(s.width as usize).is_multiple_of(b)
            {
                return Err(Error::config(format!(
                    "block size {size} does not tile a {}x{} image",
                    s.height, s.width
                )));
            }
            let (w, c) = (s.width as usize, s.channels as usize);
            let (rows, cols) = (s.height as usize / b, w / b);
            let mut order: Vec<usize> = (0..rows * cols).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            base.map_samples(name, s, |x| {
                let mut out = vec![0.0; x.len()];
                for (dst, &src) in order.iter().enumerate() {
                    let (dr, dc) = (dst / cols * b, dst % cols * b);
                    let (sr, sc) = (src / cols * b, src % cols * b);
                    for r in 0..b {
                        let d = ((dr + r) * w + dc) * c;
                        let o = ((sr + r) * w + sc) * c;
                        out[d..d + b * c].copy_from_slice(&x[o..o + b * c]);
                    }
                }
                out
            })
        }
    }
}

fn build(g: &Generator, spec: &SynthSpec) -> Result<TaskDataset> {
    let name = g.to_string();
    match g {
        Generator::Invert(inner) => apply_transform(&build(inner, spec)?, &Transform::Invert, name),
        Generator::PermutePixels(inner, seed) => {
            apply_transform(&build(inner, spec)?, &Transform::PermutePixels(*seed), name)
        }
        Generator::Rotate90(inner) => {
            apply_transform(&build(inner, spec)?, &Transform::Rotate90, name)
        }
        base => {
            let shape = ImageShape::gray(spec.height, spec.width);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let prototypes: Vec<Vec<f64>> = match base {
                Generator::GaussianBlobs { separation } => {
                    let half = separation * spec.noise / 2.0;
                    (0..spec.classes)
                        .map(|_| {
                            (0..shape.dim())
                                .map(|_| {
                                    if rng.random::<bool>() {
                                        0.5 + half
                                    } else {
                                        0.5 - half
                                    }
                                })
                                .collect()
                        })
                        .collect()
                }
                _ => Vec::new(),
            };
            let mut draw = |n: usize| -> Result<(Tensor, Vec<usize>)> {
                let mut data = Vec::with_capacity(n * shape.dim());
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let y = rng.random_range(0..spec.classes);
                    let clean = pattern(base, y, shape, &prototypes, &mut rng);
                    for p in clean {
                        let e: f64 = rng.sample(StandardNormal);
                        data.push(quantize(p + spec.noise * e));
                    }
                    labels.push(y);
                }
                Ok((Tensor::matrix(n, shape.dim(), data)?, labels))
            };
            let (train, train_labels) = draw(spec.train)?;
            let (test, test_labels) = draw(spec.test)?;
            TaskDataset::new(
                name,
                shape,
                spec.classes,
                train,
                test,
                Some(train_labels),
                Some(test_labels),
            )
        }
    }
}

fn pattern<R: Rng>(
    g: &Generator,
    y: usize,
    shape: ImageShape,
    prototypes: &[Vec<f64>],
    rng: &mut R,
) -> Vec<f64> {
    let (h, w) = (shape.height as usize, shape.width as usize);
    match g {
        Generator::GaussianBlobs { .. } => prototypes[y].clone(),
        Generator::Stripes => {
            let period = 2 + y / 2;
            let vertical = y % 2 == 1;
            let phase = rng.random_range(0..period);
            (0..h * w)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    let t = if vertical { c } else { r };
                    if (t + phase) % period < period.div_ceil(2) {
                        0.9
                    } else {
                        0.1
                    }
                })
                .collect()
        }
        Generator::Checkers => {
            let cell = 1 + y;
            let (dr, dc) = (rng.random_range(0..cell), rng.random_range(0..cell));
            (0..h * w)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    if ((r + dr) / cell + (c + dc) / cell).is_multiple_of(2) {
                        0.85
                    } else {
                        0.15
                    }
                })
                .collect()
        }
        _ => unreachable!("transforms are handled by build"),
    }
}
