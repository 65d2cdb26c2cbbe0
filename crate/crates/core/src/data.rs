//! Image datasets as `S × N` matrices of intensities in `[0, 1]`.
//!
//! Pixels are flattened in row-major `(H, W, C)` order, so pixel `(x, y)`
//! channel `c` lives at `(y·W + x)·C + c`.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{LowRankGaussian, ObservationNoise};
use crate::random::{seeded, standard_normal_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
        }
    }

    pub fn grayscale(width: usize, height: usize) -> Self {
        Self::new(width, height, 1)
    }

    /// `S = W·H·C`.
    pub fn size(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn index(&self, x: usize, y: usize, c: usize) -> Option<usize> {
        (x < self.width && y < self.height && c < self.channels).then(|| (y * self.width + x) * self.channels + c)
    }
}

/// Dataset held in memory, one image per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub pixels: DMatrix<f64>,
    /// Source files, empty for synthetic data.
    pub files: Vec<String>,
}

impl Dataset {
    pub fn new(shape: ImageShape, pixels: DMatrix<f64>) -> Result<Self> {
        if pixels.nrows() != shape.size() {
            return Err(Error::dim("pixels per image", shape.size(), pixels.nrows()));
        }
        Ok(Self {
            shape,
            pixels,
            files: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> DVector<f64> {
        self.pixels.column(i).into_owned()
    }

    /// Columns in the given order.
    pub fn batch(&self, indices: &[usize]) -> DMatrix<f64> {
        let s = self.shape.size();
        DMatrix::from_fn(s, indices.len(), |r, c| self.pixels[(r, indices[c])])
    }

    pub fn mean(&self) -> DVector<f64> {
        self.pixels.column_mean()
    }

    pub fn manifest(&self, normalization: &str) -> DatasetManifest {
        DatasetManifest {
            files: self.files.clone(),
            shape: self.shape,
            count: self.len(),
            normalization: normalization.to_string(),
        }
    }
}

/// Provenance record written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<String>,
    pub shape: ImageShape,
    pub count: usize,
    pub normalization: String,
}

pub const UNIT_NORMALIZATION: &str = "value / 255, range [0, 1]";

/// 8-bit value to `[0, 1]`.
pub fn normalize(value: u8) -> f64 {
    f64::from(value) / 255.0
}

/// Flatten an image after converting it to `channels` (1 = luma, 3 = RGB).
pub fn flatten(img: &DynamicImage, channels: usize) -> Result<Vec<f64>> {
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    };
    Ok(raw.into_iter().map(normalize).collect())
}

/// Decode every PNG in `dir`, resize to `target` (bilinear) when given, and
/// convert to luma or RGB. Unreadable files are skipped with a warning.
pub fn load_directory(dir: &Path, target: Option<(usize, usize)>, grayscale: bool) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();

    let channels = if grayscale { 1 } else { 3 };
    let mut shape: Option<ImageShape> = target.map(|(w, h)| ImageShape::new(w, h, channels));
    let mut columns = Vec::new();
    let mut files = Vec::new();
    for path in paths {
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(err) => {
                tracing::warn!(path = %path.display(), %err, "skipping unreadable image");
                continue;
            }
        };
        let expected = *shape.get_or_insert(ImageShape::new(img.width() as usize, img.height() as usize, channels));
        let img = if (img.width() as usize, img.height() as usize) != (expected.width, expected.height) {
            img.resize_exact(expected.width as u32, expected.height as u32, FilterType::Triangle)
        } else {
            img
        };
        columns.push(DVector::from_vec(flatten(&img, channels)?));
        files.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    let Some(shape) = shape.filter(|_| !columns.is_empty()) else {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    };
    let mut dataset = Dataset::new(shape, DMatrix::from_columns(&columns))?;
    dataset.files = files;
    Ok(dataset)
}

/// Random ground-truth distribution over `dim` pixels and `n` samples from
/// it, clamped to `[0, 1]`. Means sit in `[0.3, 0.7]` and marginal standard
/// deviations stay near 0.1 so clamping is rare.
pub fn synthetic_lowrank(dim: usize, rank: usize, seed: u64, n: usize) -> Result<(Dataset, LowRankGaussian)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = seeded(seed);
    let mu = DVector::from_fn(dim, |_, _| rng.random_range(0.3..0.7));
    let factor = standard_normal_matrix(&mut rng, dim, rank).map(|v| (0.06 * v).clamp(-0.15, 0.15));
    let diag = DVector::from_fn(dim, |_, _| rng.random_range(0.001..0.003));
    let truth = LowRankGaussian::new(mu, factor, diag)?;
    let dataset = sample_dataset(&truth, n, &mut rng)?;
    Ok((dataset, truth))
}

/// `n` clamped samples of `dist` as a single-row-per-pixel dataset.
pub fn sample_dataset<R: Rng + ?Sized>(dist: &LowRankGaussian, n: usize, rng: &mut R) -> Result<Dataset> {
    let mut pixels = DMatrix::zeros(dist.dim(), n);
    for j in 0..n {
        let noise = ObservationNoise::standard(rng, dist.dim(), dist.rank());
        let y = dist.sample(&noise)?;
        pixels.set_column(j, &y.map(|v| v.clamp(0.0, 1.0)));
    }
    Dataset::new(ImageShape::new(dist.dim(), 1, 1), pixels)
}

/// Parameters of the blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Standard deviation of i.i.d. pixel noise added before clamping.
    pub pixel_noise: f64,
}

/// Grayscale images holding one Gaussian blob each, with random centre,
/// radius and brightness.
pub fn synthetic_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    let shape = ImageShape::grayscale(spec.width, spec.height);
    if spec.count == 0 || shape.size() == 0 {
        return Err(Error::InvalidArgument("blob dataset must be non-empty".into()));
    }
    let mut rng = seeded(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut pixels = DMatrix::zeros(shape.size(), spec.count);
    for j in 0..spec.count {
        let cx = rng.random_range(0.2 * w..0.8 * w);
        let cy = rng.random_range(0.2 * h..0.8 * h);
        let radius = rng.random_range(0.1..0.2) * w.min(h);
        let brightness = rng.random_range(0.6..1.0);
        let background = rng.random_range(0.0..0.2);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let blob = brightness * (-0.5 * d2 / (radius * radius)).exp();
                let noise = spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
                let v = (background + (1.0 - background) * blob + noise).clamp(0.0, 1.0);
                pixels[(y * spec.width + x, j)] = v;
            }
        }
    }
    Dataset::new(shape, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn black_and_white_pngs() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_pixel(3, 2, Luma([0])).save(dir.path().join("a_black.png")).unwrap();
        GrayImage::from_pixel(3, 2, Luma([255])).save(dir.path().join("b_white.png")).unwrap();
        let ds = load_directory(dir.path(), None, true).unwrap();
        assert_eq!(ds.shape, ImageShape::grayscale(3, 2));
        assert!(ds.image(0).iter().all(|&v| v == 0.0));
        assert!(ds.image(1).iter().all(|&v| v == 1.0));
        assert_eq!(ds.files, ["a_black.png", "b_white.png"]);
    }

    #[test]
    fn known_bytes_flatten_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(0, 0, Rgb([10, 20, 30]));
        img.put_pixel(1, 0, Rgb([40, 50, 60]));
        img.put_pixel(0, 1, Rgb([70, 80, 90]));
        img.put_pixel(1, 1, Rgb([100, 110, 255]));
        img.save(dir.path().join("x.png")).unwrap();
        let ds = load_directory(dir.path(), None, false).unwrap();
        let expected: Vec<f64> = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 255]
            .iter()
            .map(|&v| v as f64 / 255.0)
            .collect();
        assert_eq!(ds.image(0).as_slice(), expected.as_slice());
        assert_eq!(ds.shape.index(1, 1, 2), Some(11));
    }

    #[test]
    fn resize_and_skip_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_pixel(8, 8, Luma([128])).save(dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let ds = load_directory(dir.path(), Some((4, 4)), true).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.shape.size(), 16);
        assert!(ds.image(0).iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn empty_directory_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_directory(dir.path(), None, true), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn synthetic_lowrank_is_reproducible() {
        let (a, ta) = synthetic_lowrank(6, 2, 3, 10).unwrap();
        let (b, tb) = synthetic_lowrank(6, 2, 3, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn vanishing_noise_collapses_to_mean() {
        let mu = DVector::from_fn(5, |i, _| 0.2 + 0.1 * i as f64);
        let dist = LowRankGaussian::diagonal(mu.clone(), DVector::from_element(5, 1e-16)).unwrap();
        let ds = sample_dataset(&dist, 20, &mut seeded(1)).unwrap();
        for j in 0..ds.len() {
            assert!((ds.image(j) - &mu).amax() < 1e-6);
        }
    }

    #[test]
    fn synthetic_sample_mean_within_three_standard_errors() {
        let n = 100_000;
        let (ds, truth) = synthetic_lowrank(4, 1, 21, n).unwrap();
        let mean = ds.mean();
        let var = truth.marginal_variance();
        for i in 0..4 {
            let se = (var[i] / n as f64).sqrt();
            assert!((mean[i] - truth.mu()[i]).abs() < 3.0 * se, "pixel {i}");
        }
    }

    #[test]
    fn blobs_in_unit_range() {
        let spec = BlobSpec {
            width: 8,
            height: 8,
            count: 5,
            pixel_noise: 0.05,
        };
        let ds = synthetic_blobs(&spec, 2).unwrap();
        assert_eq!(ds.pixels.nrows(), 64);
        assert!(ds.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds, synthetic_blobs(&spec, 2).unwrap());
    }

    proptest! {
        #[test]
        fn normalization_monotone(a in 0u8..=255, b in 0u8..=255) {
            if a < b {
                prop_assert!(normalize(a) < normalize(b));
            }
            prop_assert_eq!(normalize(0), 0.0);
            prop_assert_eq!(normalize(255), 1.0);
        }

        #[test]
        fn flatten_unflatten_roundtrip(w in 1usize..6, h in 1usize..6, rgb in any::<bool>(), seed in any::<u64>()) {
            let channels = if rgb { 3 } else { 1 };
            let shape = ImageShape::new(w, h, channels);
            let mut rng = seeded(seed);
            let bytes: Vec<u8> = (0..shape.size()).map(|_| rng.random()).collect();
            let img = crate::render::image_from_bytes(&bytes, shape).unwrap();
            let flat = flatten(&img, channels).unwrap();
            let back = crate::render::to_image(&flat, shape).unwrap();
            prop_assert_eq!(back.as_bytes(), img.as_bytes());
        }
    }
}
