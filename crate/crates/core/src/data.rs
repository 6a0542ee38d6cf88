//! Datasets: in-memory batches, deterministic synthetic generators with a
//! controllable class margin, and the ADVB file format.
//!
//! File layout (bit-exact): magic `ADVB` (4 bytes) | u32 LE version = 1 |
//! u32 LE N, C, H, W | N*C*H*W f32 LE images | N u8 labels. Trivially
//! parseable from any language.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADVB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::invalid(
                "dataset",
                format!("images must be non-empty [N, C, H, W], got {shape:?}"),
            ));
        }
        if labels.len() != shape[0] {
            return Err(Error::invalid(
                "dataset",
                format!("{} labels for {} images", labels.len(), shape[0]),
            ));
        }
        for (i, v) in images.data().iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(
                    "dataset",
                    format!("pixel {i} = {v} outside [0, 1]"),
                ));
            }
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Per-example shape `[C, H, W]`.
    pub fn example_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.example_tensor(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Gathers the given examples into one batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.images.example_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.example(i));
            labels.push(self.label(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::new(shape, data).expect("batch shape consistent"), labels)
    }

    /// Deterministic random sample of `n` examples (without replacement);
    /// the whole set in stored order if `n` covers it.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = substream(seed, &[tag::DATASET_SYNTH, 0x5a]);
        let mut indices: Vec<usize> = (0..self.len()).collect();
        // Partial Fisher-Yates: the first n entries are the sample.
        for i in 0..n {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(n);
        let (images, labels) = self.batch(&indices);
        Dataset {
            images,
            labels: labels.into_iter().map(|l| l as u8).collect(),
            split: self.split,
        }
    }

    // ── ADVB serialization ──────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let shape = self.images.shape();
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        for &d in shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.images.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&self.labels)?;
        Ok(())
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let name = path.display().to_string();
        let bytes = fs::read(path)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Truncated {
                    path: name.clone(),
                    expected: *off + n,
                    actual: bytes.len(),
                });
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };

        let magic = take(&mut off, 4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                path: name,
                detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let mut u32_at = |off: &mut usize| -> Result<u32> {
            let b = take(off, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let version = u32_at(&mut off)?;
        if version != VERSION {
            return Err(Error::Format {
                path: name,
                detail: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let n = u32_at(&mut off)? as usize;
        let c = u32_at(&mut off)? as usize;
        let h = u32_at(&mut off)? as usize;
        let w = u32_at(&mut off)? as usize;
        let pixel_count = n * c * h * w;
        let expected = off + pixel_count * 4 + n;
        if bytes.len() != expected {
            return Err(Error::Truncated { path: name, expected, actual: bytes.len() });
        }
        let mut data = Vec::with_capacity(pixel_count);
        for chunk in bytes[off..off + pixel_count * 4].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        off += pixel_count * 4;
        let labels = bytes[off..off + n].to_vec();
        let images = Tensor::new(vec![n, c, h, w], data)?;
        Ok(Dataset { images, labels, split })
    }
}

// ── synthetic generators ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Per-class bright vertical band over a flat background.
    Blobs,
    /// Per-class stripe orientation and period.
    Stripes,
    /// Tiny digit glyphs.
    DigitsLite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Guaranteed separation: any two examples of different classes differ
    /// by at least `margin` in L-infinity, so a robust separator exists for
    /// every attack radius below `margin / 2`.
    pub margin: f32,
    pub seed: u64,
}

/// Builds a labeled dataset of `[1, h, w]` images by jittering per-class
/// prototypes with uniform noise. Prototype pairs differ by a fixed
/// contrast `A` somewhere, and the noise half-width is `(A - margin) / 2`,
/// which yields the margin guarantee.
pub fn dataset_synth(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    let SynthSpec { kind, n, classes, height: h, width: w, margin, seed } = *spec;
    if n == 0 || classes == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("dataset_synth", "n, classes, h, w must all be positive"));
    }
    if margin < 0.0 {
        return Err(Error::invalid("dataset_synth", format!("margin must be >= 0, got {margin}")));
    }
    let contrast = match kind {
        SynthKind::Blobs | SynthKind::Stripes => 0.4f32,
        SynthKind::DigitsLite => 0.6,
    };
    if margin >= contrast {
        return Err(Error::invalid(
            "dataset_synth",
            format!("margin {margin} must be below the class contrast {contrast}"),
        ));
    }
    let max_classes = match kind {
        SynthKind::Blobs => w,
        SynthKind::Stripes => 8,
        SynthKind::DigitsLite => 10.min(GLYPHS.len()),
    };
    if classes > max_classes {
        return Err(Error::invalid(
            "dataset_synth",
            format!("{kind:?} supports at most {max_classes} classes, got {classes}"),
        ));
    }

    let prototypes: Vec<Vec<f32>> =
        (0..classes).map(|k| prototype(kind, k, classes, h, w, contrast)).collect();
    let noise = (contrast - margin) / 2.0;
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Test => 1,
    };
    let mut rng = substream(seed, &[tag::DATASET_SYNTH, split_tag]);
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k as u8);
        for &p in &prototypes[k] {
            let jitter: f32 = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
            data.push((p + jitter).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, split)
}

fn prototype(kind: SynthKind, class: usize, classes: usize, h: usize, w: usize, contrast: f32) -> Vec<f32> {
    let base = 0.3f32;
    match kind {
        SynthKind::Blobs => {
            // Bright vertical band; bands of different classes are disjoint.
            let mut img = vec![base; h * w];
            let band_w = (w / classes).max(1);
            let start = class * band_w;
            let end = (start + band_w).min(w);
            for y in 0..h {
                for x in start..end {
                    img[y * w + x] = base + contrast;
                }
            }
            img
        }
        SynthKind::Stripes => {
            // Orientation alternates with class, period grows every two.
            let period = 2 + 2 * (class / 2);
            let horizontal = class % 2 == 0;
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    let phase = if horizontal { y } else { x };
                    if (phase / (period / 2)) % 2 == 0 {
                        base + contrast
                    } else {
                        base
                    }
                })
                .collect()
        }
        SynthKind::DigitsLite => {
            // 5x3 glyph scaled into the frame.
            let glyph = GLYPHS[class];
            let mut img = vec![base; h * w];
            let sy = (h / 5).max(1);
            let sx = (w / 3).max(1);
            for (gy, row) in glyph.iter().enumerate() {
                for (gx, &on) in row.iter().enumerate() {
                    if on == 0 {
                        continue;
                    }
                    for dy in 0..sy {
                        for dx in 0..sx {
                            let y = gy * sy + dy;
                            let x = gx * sx + dx;
                            if y < h && x < w {
                                img[y * w + x] = base + contrast;
                            }
                        }
                    }
                }
            }
            img
        }
    }
}

/// 5x3 digit glyphs for digits-lite.
const GLYPHS: [[[u8; 3]; 5]; 10] = [
    [[1, 1, 1], [1, 0, 1], [1, 0, 1], [1, 0, 1], [1, 1, 1]], // 0
    [[0, 1, 0], [1, 1, 0], [0, 1, 0], [0, 1, 0], [1, 1, 1]], // 1
    [[1, 1, 1], [0, 0, 1], [1, 1, 1], [1, 0, 0], [1, 1, 1]], // 2
    [[1, 1, 1], [0, 0, 1], [0, 1, 1], [0, 0, 1], [1, 1, 1]], // 3
    [[1, 0, 1], [1, 0, 1], [1, 1, 1], [0, 0, 1], [0, 0, 1]], // 4
    [[1, 1, 1], [1, 0, 0], [1, 1, 1], [0, 0, 1], [1, 1, 1]], // 5
    [[1, 1, 1], [1, 0, 0], [1, 1, 1], [1, 0, 1], [1, 1, 1]], // 6
    [[1, 1, 1], [0, 0, 1], [0, 1, 0], [0, 1, 0], [0, 1, 0]], // 7
    [[1, 1, 1], [1, 0, 1], [1, 1, 1], [1, 0, 1], [1, 1, 1]], // 8
    [[1, 1, 1], [1, 0, 1], [1, 1, 1], [0, 0, 1], [1, 1, 1]], // 9
];

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SynthKind) -> SynthSpec {
        SynthSpec { kind, n: 40, classes: 4, height: 12, width: 12, margin: 0.25, seed: 3 }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = dataset_synth(&spec(SynthKind::Blobs), Split::Train).unwrap();
        let b = dataset_synth(&spec(SynthKind::Blobs), Split::Train).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn splits_differ() {
        let a = dataset_synth(&spec(SynthKind::Blobs), Split::Train).unwrap();
        let b = dataset_synth(&spec(SynthKind::Blobs), Split::Test).unwrap();
        assert_ne!(a.images().data(), b.images().data());
    }

    #[test]
    fn zero_examples_rejected() {
        let mut s = spec(SynthKind::Blobs);
        s.n = 0;
        assert!(dataset_synth(&s, Split::Train).is_err());
    }

    #[test]
    fn margin_guarantee_holds_between_classes() {
        // Any two examples of different classes differ by >= margin in
        // L-infinity; verified exhaustively on a small draw.
        for kind in [SynthKind::Blobs, SynthKind::Stripes, SynthKind::DigitsLite] {
            let ds = dataset_synth(&spec(kind), Split::Train).unwrap();
            for i in 0..ds.len() {
                for j in 0..ds.len() {
                    if ds.label(i) == ds.label(j) {
                        continue;
                    }
                    let d = ds.image(i).max_abs_diff(&ds.image(j));
                    assert!(d >= 0.25 - 1e-5, "{kind:?}: {i} vs {j} differ by {d}");
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.advb");
        let ds = dataset_synth(&spec(SynthKind::Stripes), Split::Test).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path, Split::Test).unwrap();
        assert_eq!(ds.images().data(), back.images().data());
        assert_eq!(ds.labels(), back.labels());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.advb");
        let ds = dataset_synth(&spec(SynthKind::Blobs), Split::Test).unwrap();
        ds.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Dataset::load(&path, Split::Test), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.advb");
        let ds = dataset_synth(&spec(SynthKind::Blobs), Split::Test).unwrap();
        ds.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match Dataset::load(&path, Split::Test) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 10);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn sample_is_deterministic_subset() {
        let ds = dataset_synth(&spec(SynthKind::Blobs), Split::Test).unwrap();
        let a = ds.sample(10, 9);
        let b = ds.sample(10, 9);
        assert_eq!(a.images().data(), b.images().data());
        assert_eq!(a.len(), 10);
    }
}
