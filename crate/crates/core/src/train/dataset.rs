//! Datasets: procedurally generated shapes and on-disk manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io;
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::augment::Sample;

/// Random-access collection of raw (unnormalized) samples.
pub trait Dataset<T: Scalar>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn num_classes(&self) -> usize;

    fn get(&self, index: usize) -> Result<Sample<T>>;
}

/// Stream for item `index` of a dataset seeded with `seed`. Each item draws
/// from its own stream, so results do not depend on visiting order.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub const SHAPE_CLASSES: [&str; 4] = ["background", "rectangle", "disk", "triangle"];

/// Images of one rectangle, one disk and one triangle on a noisy
/// background. Each shape class has its own color family.
#[derive(Debug, Clone)]
pub struct SyntheticShapes {
    pub seed: u64,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Multiplier on shape extents (1.0 at 64×128).
    pub shape_scale: f64,
}

/// Fewest visible pixels a shape must keep after occlusion.
const MIN_VISIBLE: usize = 24;

impl SyntheticShapes {
    pub fn new(seed: u64, num_samples: usize) -> Self {
        SyntheticShapes { seed, num_samples, height: 64, width: 128, shape_scale: 1.0 }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    fn render(&self, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<u8>) {
        let (h, w) = (self.height, self.width);
        let scale = (h.min(w / 2) as f64 / 64.0).max(0.25) * self.shape_scale;
        loop {
            let mut label = vec![0u8; h * w];
            let mut order = [1u8, 2, 3];
            for i in (1..3).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for &class in &order {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let inside: Box<dyn Fn(f64, f64) -> bool> = match class {
                    1 => {
                        let hh = rng.random_range(3.6..9.0) * scale;
                        let hw = rng.random_range(4.8..12.0) * scale;
                        Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
                    }
                    2 => {
                        let r = rng.random_range(4.2..8.4) * scale;
                        Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
                    }
                    _ => {
                        let half = rng.random_range(5.4..10.8) * scale;
                        let height = rng.random_range(8.4..16.8) * scale;
                        let top = cy - height / 2.0;
                        Box::new(move |y, x| {
                            let t = (y - top) / height;
                            (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * half
                        })
                    }
                };
                for y in 0..h {
                    for x in 0..w {
                        if inside(y as f64 + 0.5, x as f64 + 0.5) {
                            label[y * w + x] = class;
                        }
                    }
                }
            }
            let mut counts = [0usize; 4];
            for &l in &label {
                counts[l as usize] += 1;
            }
            if counts.iter().all(|&c| c >= MIN_VISIBLE) {
                let bg = [rng.random_range(0.1..0.5); 3].map(|v: f64| v + rng.random_range(-0.05..0.05));
                let fills = [
                    bg,
                    [rng.random_range(0.6..0.95), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)],
                    [rng.random_range(0.1..0.4), rng.random_range(0.6..0.95), rng.random_range(0.1..0.4)],
                    [rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.6..0.95)],
                ];
                let pixels = label
                    .iter()
                    .map(|&l| fills[l as usize].map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)))
                    .collect();
                return (pixels, label);
            }
        }
    }
}

impl<T: Scalar> Dataset<T> for SyntheticShapes {
    fn len(&self) -> usize {
        self.num_samples
    }

    fn num_classes(&self) -> usize {
        SHAPE_CLASSES.len()
    }

    fn get(&self, index: usize) -> Result<Sample<T>> {
        if index >= self.num_samples {
            return Err(Error::invalid(
                "dataset",
                format!("index {index} out of range for {} samples", self.num_samples),
            ));
        }
        let (pixels, label) = self.render(&mut item_rng(self.seed, index as u64));
        let hw = self.height * self.width;
        let image = Tensor::from_fn(vec![3, self.height, self.width], |i| T::from_f64_lossy(pixels[i % hw][i / hw]));
        Sample::new(image, LabelMap::new(self.height, self.width, label)?)
    }
}

/// One manifest line: image, label, and optionally a stored prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub prediction: Option<PathBuf>,
}

/// Parses `image<TAB>label[<TAB>prediction]` lines. Relative paths resolve
/// against `base`; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let resolve = |p: &str| {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(Error::invalid(
                "manifest",
                format!("line {}: expected image<TAB>label[<TAB>prediction], got {} columns", no + 1, cols.len()),
            ));
        }
        out.push(ManifestEntry {
            image: resolve(cols[0]),
            label: resolve(cols[1]),
            prediction: cols.get(2).map(|p| resolve(p)),
        });
    }
    Ok(out)
}

/// Image/label pairs listed in a manifest file.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
}

impl ManifestDataset {
    pub fn open(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(ManifestDataset { entries: parse_manifest(&text, base)?, num_classes })
    }

    pub fn label(&self, index: usize) -> Result<LabelMap> {
        let label = image_io::read_label(&self.entries[index].label)?;
        if let Some(&bad) = label.data.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= self.num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: self.num_classes });
        }
        Ok(label)
    }
}

impl<T: Scalar> Dataset<T> for ManifestDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn get(&self, index: usize) -> Result<Sample<T>> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::invalid("dataset", format!("index {index} out of range for {} entries", self.entries.len()))
        })?;
        let image = image_io::read_image(&entry.image)?.to_tensor();
        Sample::new(image, self.label(index)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_complete() {
        let ds = SyntheticShapes::new(7, 20);
        for i in 0..20 {
            let a: Sample<f32> = ds.get(i).unwrap();
            let b: Sample<f32> = ds.get(i).unwrap();
            assert!(a.image.bit_eq(&b.image));
            assert_eq!(a.label, b.label);
            for class in 0..4u8 {
                assert!(a.label.data.contains(&class));
            }
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let other: Sample<f32> = SyntheticShapes::new(8, 1).get(0).unwrap();
        let first: Sample<f32> = ds.get(0).unwrap();
        assert_ne!(other.label, first.label);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# header\na.png\tb.png\n\n/abs/c.png\td.png\te.png\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].image, PathBuf::from("/data/a.png"));
        assert_eq!(m[1].image, PathBuf::from("/abs/c.png"));
        assert_eq!(m[1].prediction, Some(PathBuf::from("/data/e.png")));
        assert!(parse_manifest("only-one-column\n", Path::new(".")).is_err());
    }
}
