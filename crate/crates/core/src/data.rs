//! Desk-scale labelled datasets.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::acgan::ClassId;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

/// Radius of the circle(s) carrying the mixture centroids, before rescaling.
pub const MIXTURE_RADIUS: f64 = 2.0;
pub const MIXTURE_STD: f64 = 0.35;
/// Raw coordinates are divided by this before clipping to `[-1, 1]`.
pub const MIXTURE_SCALE: f64 = MIXTURE_RADIUS + 4.0 * MIXTURE_STD;

pub const DIGIT_NOISE_STD: f64 = 0.15;
pub const DIGIT_SAMPLES_PER_CLASS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    samples: Tensor,
    labels: Vec<ClassId>,
    num_classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, samples: Tensor, labels: Vec<ClassId>, num_classes: usize) -> Result<Self> {
        if samples.rank() != 2 || samples.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} samples for {} labels",
                samples.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Range(format!("label {l} >= {num_classes}")));
            }
            by_class[l].push(i);
        }
        Ok(Self {
            name: name.into(),
            samples,
            labels,
            num_classes,
            by_class,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_indices(&self, class: ClassId) -> &[usize] {
        &self.by_class[class]
    }

    /// Samples and labels at `idx`.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<ClassId>)> {
        let x = self.samples.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Unscaled centroid of `class` at angle `a = 2πk/C`, always at distance
/// [`MIXTURE_RADIUS`] from the origin. Below four dimensions the classes sit
/// on a circle in the first plane; from four dimensions on they follow the
/// curve `(cos a, sin a, cos 2a, sin 2a) · R/√2`, which keeps neighbours
/// further apart. Remaining coordinates are zero.
pub fn mixture_centroid(class: usize, num_classes: usize, data_dim: usize) -> Vec<f64> {
    let a = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
    let mut c = vec![0.0; data_dim];
    if data_dim < 4 {
        c[0] = MIXTURE_RADIUS * a.cos();
        c[1] = MIXTURE_RADIUS * a.sin();
        return c;
    }
    let r = MIXTURE_RADIUS / std::f64::consts::SQRT_2;
    c[0] = r * a.cos();
    c[1] = r * a.sin();
    c[2] = r * (2.0 * a).cos();
    c[3] = r * (2.0 * a).sin();
    c
}

/// Class-conditional Gaussian blobs (σ = 0.35) around [`mixture_centroid`]s,
/// rescaled by [`MIXTURE_SCALE`] and clipped into `[-1, 1]`.
pub fn make_synthetic_mixture(
    num_classes: usize,
    samples_per_class: usize,
    data_dim: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || data_dim < 2 || samples_per_class == 0 {
        return Err(Error::Config(
            "mixture needs ≥2 classes, ≥2 dimensions and ≥1 sample per class".into(),
        ));
    }
    let mut rng = rng_for(seed, &[tag::DATASET, 1]);
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * data_dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let c = mixture_centroid(k, num_classes, data_dim);
        for _ in 0..samples_per_class {
            for &ci in &c {
                let v = ci + MIXTURE_STD * rng.sample::<f64, _>(StandardNormal);
                data.push((v / MIXTURE_SCALE).clamp(-1.0, 1.0));
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(
        format!("mixture-{num_classes}x{samples_per_class}-d{data_dim}"),
        Tensor::new(vec![n, data_dim], data)?,
        labels,
        num_classes,
    )
}

const GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####..",
    ],
    [
        "...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######.",
    ],
    [
        "..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######.",
    ],
    [
        "..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####..",
    ],
    [
        "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#..",
    ],
    [
        ".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..",
    ],
    [
        "...###..", "..#.....", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####..",
    ],
    [
        ".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#....",
    ],
    [
        "..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####..",
    ],
    [
        "..####..", ".#....#.", ".#....#.", ".#....#.", "..#####.", "......#.", ".....#..", "..###...",
    ],
];

/// Noise-free 8×8 glyph of `digit`, row-major, `+1` ink and `−1` background.
pub fn tiny_digit_template(digit: usize) -> Result<[f64; 64]> {
    let glyph = GLYPHS
        .get(digit)
        .ok_or_else(|| Error::Range(format!("digit {digit} > 9")))?;
    let mut out = [0.0; 64];
    for (r, row) in glyph.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r * 8 + c] = if ch == b'#' { 1.0 } else { -1.0 };
        }
    }
    Ok(out)
}

/// 10-class, 64-dimensional digit surrogate: glyph templates plus
/// Gaussian pixel noise, clipped into `[-1, 1]`.
pub fn make_tiny_digits_with(samples_per_class: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    let mut rng = rng_for(seed, &[tag::DATASET, 2]);
    let mut data = Vec::with_capacity(10 * samples_per_class * 64);
    let mut labels = Vec::with_capacity(10 * samples_per_class);
    for digit in 0..10 {
        let t = tiny_digit_template(digit)?;
        for _ in 0..samples_per_class {
            for &v in &t {
                let noisy = v + noise_std * rng.sample::<f64, _>(StandardNormal);
                data.push(noisy.clamp(-1.0, 1.0));
            }
            labels.push(digit);
        }
    }
    LabeledDataset::new(
        "tiny-digits",
        Tensor::new(vec![labels.len(), 64], data)?,
        labels,
        10,
    )
}

pub fn make_tiny_digits(seed: u64) -> Result<LabeledDataset> {
    make_tiny_digits_with(DIGIT_SAMPLES_PER_CLASS, DIGIT_NOISE_STD, seed)
}
