//! Hyperspectral cubes on disk, preprocessing, patch extraction and
//! train/test splitting.
//!
//! A cube `<name>` is three files: `<name>.hsij` (JSON header),
//! `<name>.hsib` (little-endian `f32` values in row, column, band order) and
//! `<name>.lbl` (little-endian `u16` labels in row, column order, 0 meaning
//! unlabeled).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub band_order: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discard_bands: Vec<usize>,
}

/// Spectral cube, values in (row, column, band) order.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return input("cube dimensions must be positive");
        }
        if values.len() != height * width * bands {
            return input(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return input(format!("non-finite cube value at index {i}"));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.bands;
        &self.values[o..o + self.bands]
    }

    /// Drops the listed band indices.
    pub fn discard_bands(&self, discard: &[usize]) -> Result<Self> {
        if let Some(&b) = discard.iter().find(|&&b| b >= self.bands) {
            return input(format!("discarded band {b} out of range for {} bands", self.bands));
        }
        let keep: Vec<usize> = (0..self.bands).filter(|b| !discard.contains(b)).collect();
        if keep.is_empty() {
            return input("band discard list removes every band");
        }
        let mut values = Vec::with_capacity(self.height * self.width * keep.len());
        for px in self.values.chunks(self.bands) {
            values.extend(keep.iter().map(|&b| px[b]));
        }
        Self::new(self.height, self.width, keep.len(), values)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Strips a known cube extension, so either the stem or any of the three
/// files can name the cube.
pub fn cube_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hsij" | "hsib" | "lbl") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub fn save_cube(stem: &Path, cube: &HsiCube, labels: &LabelGrid) -> Result<()> {
    if labels.height != cube.height || labels.width != cube.width {
        return input("label grid dimensions differ from the cube");
    }
    let header = CubeHeader {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        dtype: "f32le".into(),
        band_order: "bip".into(),
        discard_bands: Vec::new(),
    };
    fs::write(with_ext(stem, "hsij"), serde_json::to_string_pretty(&header)?)?;
    let bytes: Vec<u8> = cube.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(with_ext(stem, "hsib"), bytes)?;
    let lbl: Vec<u8> = labels.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(with_ext(stem, "lbl"), lbl)?;
    Ok(())
}

/// Reads and validates a cube and its labels, applying any band discards
/// declared in the header.
pub fn load_cube(path: &Path) -> Result<(HsiCube, LabelGrid)> {
    let stem = cube_stem(path);
    let header_path = with_ext(&stem, "hsij");
    let text = fs::read_to_string(&header_path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", header_path.display())))?;
    let h: CubeHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("invalid cube header {}: {e}", header_path.display())))?;
    if h.dtype != "f32le" {
        return input(format!("unknown dtype {:?} (expected \"f32le\")", h.dtype));
    }
    if h.band_order != "bip" {
        return input(format!("unknown band order {:?} (expected \"bip\")", h.band_order));
    }
    if h.height == 0 || h.width == 0 || h.bands == 0 {
        return input("cube header dimensions must be positive");
    }
    let raw = fs::read(with_ext(&stem, "hsib"))?;
    let expected = h.height * h.width * h.bands * 4;
    if raw.len() != expected {
        return input(format!("cube payload has {} bytes, expected {expected}", raw.len()));
    }
    let mut values = Vec::with_capacity(expected / 4);
    for (i, c) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return input(format!("non-finite value at byte offset {}", i * 4));
        }
        values.push(v as f64);
    }
    let mut cube = HsiCube::new(h.height, h.width, h.bands, values)?;
    if !h.discard_bands.is_empty() {
        cube = cube.discard_bands(&h.discard_bands)?;
    }
    let raw = fs::read(with_ext(&stem, "lbl"))?;
    let expected = h.height * h.width * 2;
    if raw.len() != expected {
        return input(format!("label payload has {} bytes, expected {expected}", raw.len()));
    }
    let labels = LabelGrid {
        height: h.height,
        width: h.width,
        labels: raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
    };
    if labels.num_classes() < 2 {
        return input("label grid must contain at least 2 classes");
    }
    Ok((cube, labels))
}

/// Per-band standardization to zero mean and unit population variance;
/// constant bands become zero.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let n = (cube.height * cube.width) as f64;
    let b = cube.bands;
    let mut mean = vec![0.0; b];
    for px in cube.values.chunks(b) {
        mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; b];
    for px in cube.values.chunks(b) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    let mut values = Vec::with_capacity(cube.values.len());
    for px in cube.values.chunks(b) {
        values.extend(px.iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s));
    }
    HsiCube {
        values,
        ..cube.clone()
    }
}

/// Labeled patches; `labels` are 0-based class indices (file label − 1).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub positions: Vec<(usize, usize)>,
    pub num_classes: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            patches: idx.iter().map(|&i| self.patches[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn bands(&self) -> Option<usize> {
        self.patches.first().map(|p| p.shape()[1])
    }

    pub fn patch_size(&self) -> Option<usize> {
        self.patches.first().map(|p| p.shape()[2])
    }
}

/// One `[1, bands, p, p]` patch per labeled pixel, centered on it and
/// zero-padded outside the image.
pub fn extract_patches(cube: &HsiCube, labels: &LabelGrid, p: usize) -> Result<PatchSet> {
    if p.is_multiple_of(2) {
        return config(format!("patch size must be odd, got {p}"));
    }
    if labels.height != cube.height || labels.width != cube.width {
        return input("label grid dimensions differ from the cube");
    }
    let r = (p / 2) as isize;
    let b = cube.bands;
    let mut set = PatchSet {
        num_classes: labels.num_classes(),
        ..PatchSet::default()
    };
    for row in 0..cube.height {
        for col in 0..cube.width {
            let l = labels.get(row, col);
            if l == 0 {
                continue;
            }
            let mut data = vec![0.0; b * p * p];
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (row as isize + dy, col as isize + dx);
                    if y < 0 || x < 0 || y >= cube.height as isize || x >= cube.width as isize {
                        continue;
                    }
                    let s = cube.spectrum(y as usize, x as usize);
                    let (py, px) = ((dy + r) as usize, (dx + r) as usize);
                    for (band, &v) in s.iter().enumerate() {
                        data[(band * p + py) * p + px] = v;
                    }
                }
            }
            set.patches.push(Tensor::new(vec![1, b, p, p], data)?);
            set.labels.push(l as usize - 1);
            set.positions.push((row, col));
        }
    }
    Ok(set)
}

/// Seeded stratified split: per class, `floor(fraction · n)` samples go to
/// training and the rest to test. Classes with fewer than two samples go
/// entirely to training.
pub fn split(set: &PatchSet, train_fraction: f64, seed: u64) -> Result<(PatchSet, PatchSet)> {
    if set.is_empty() {
        return input("cannot split an empty dataset");
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return config(format!("train fraction must lie in [0, 1], got {train_fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..set.num_classes {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            log::warn!("class {} has {} sample(s); assigned to training", c + 1, idx.len());
            train.extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).floor() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((set.subset(&train), set.subset(&test)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub classes: usize,
    pub bands: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            classes: 3,
            bands: 16,
            samples_per_class: 100,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Synthetic scene: each class owns a block of image rows and a Gaussian
/// bump signature centered at a class-specific band, plus i.i.d. noise.
/// Unused pixels in the last row of a block are background (label 0).
pub fn generate_synthetic(p: &SynthParams) -> Result<(HsiCube, LabelGrid)> {
    if p.classes < 2 || p.bands == 0 || p.samples_per_class == 0 {
        return config("synthetic data needs at least 2 classes, 1 band and 1 sample per class");
    }
    if !(p.noise_sigma >= 0.0) {
        return config("noise sigma must be nonnegative");
    }
    let width = (p.samples_per_class as f64).sqrt().ceil() as usize;
    let rows_per_class = p.samples_per_class.div_ceil(width);
    let height = rows_per_class * p.classes;
    let b = p.bands as f64;
    let sigma = (b / (2.0 * p.classes as f64)).max(0.5);
    let signatures: Vec<Vec<f64>> = (0..p.classes)
        .map(|c| {
            let mu = (c as f64 + 0.5) * b / p.classes as f64;
            (0..p.bands)
                .map(|k| (-(k as f64 + 0.5 - mu).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = Vec::with_capacity(height * width * p.bands);
    let mut labels = Vec::with_capacity(height * width);
    for row in 0..height {
        let c = row / rows_per_class;
        for col in 0..width {
            let k = (row % rows_per_class) * width + col;
            let labeled = k < p.samples_per_class;
            labels.push(if labeled { c as u16 + 1 } else { 0 });
            for band in 0..p.bands {
                let base = if labeled { signatures[c][band] } else { 0.0 };
                let n = if p.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values.push(base + n);
            }
        }
    }
    Ok((
        HsiCube::new(height, width, p.bands, values)?,
        LabelGrid { height, width, labels },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (HsiCube, LabelGrid) {
        let values = (0..12).map(f64::from).collect();
        (
            HsiCube::new(2, 2, 3, values).unwrap(),
            LabelGrid {
                height: 2,
                width: 2,
                labels: vec![1, 0, 2, 1],
            },
        )
    }

    #[test]
    fn cube_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("toy");
        let (c, l) = small();
        save_cube(&stem, &c, &l).unwrap();
        let (c2, l2) = load_cube(&stem.with_extension("hsij")).unwrap();
        assert_eq!(c, c2);
        assert_eq!(l, l2);
    }

    #[test]
    fn payload_size_mismatch_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        let (c, l) = small();
        save_cube(&stem, &c, &l).unwrap();
        let mut h: CubeHeader = serde_json::from_str(&fs::read_to_string(with_ext(&stem, "hsij")).unwrap()).unwrap();
        h.bands = 4;
        fs::write(with_ext(&stem, "hsij"), serde_json::to_string(&h).unwrap()).unwrap();
        let err = load_cube(&stem).unwrap_err();
        assert_eq!(err.kind(), "input");
        let msg = err.to_string();
        assert!(msg.contains("48") && msg.contains("64"), "{msg}");
    }

    #[test]
    fn nan_and_dtype_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nan");
        let (c, l) = small();
        save_cube(&stem, &c, &l).unwrap();
        let mut raw = fs::read(with_ext(&stem, "hsib")).unwrap();
        raw[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(with_ext(&stem, "hsib"), &raw).unwrap();
        let msg = load_cube(&stem).unwrap_err().to_string();
        assert!(msg.contains("byte offset 8"), "{msg}");

        let text = fs::read_to_string(with_ext(&stem, "hsij")).unwrap().replace("f32le", "f64le");
        fs::write(with_ext(&stem, "hsij"), text).unwrap();
        assert!(load_cube(&stem).unwrap_err().to_string().contains("dtype"));
    }

    #[test]
    fn header_discards_listed_bands() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("disc");
        let (c, l) = small();
        save_cube(&stem, &c, &l).unwrap();
        let mut h: CubeHeader = serde_json::from_str(&fs::read_to_string(with_ext(&stem, "hsij")).unwrap()).unwrap();
        h.discard_bands = vec![0, 2];
        fs::write(with_ext(&stem, "hsij"), serde_json::to_string(&h).unwrap()).unwrap();
        let (c2, _) = load_cube(&stem).unwrap();
        assert_eq!(c2.bands, 1);
        assert_eq!(c2.values, vec![1.0, 4.0, 7.0, 10.0]);
    }

    #[test]
    fn normalize_hand_case() {
        let c = HsiCube::new(1, 2, 2, vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let n = normalize(&c);
        assert_eq!(n.values, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalized_bands_have_zero_mean() {
        let (c, _) = generate_synthetic(&SynthParams::default()).unwrap();
        let n = normalize(&c);
        for band in 0..n.bands {
            let m: f64 = n.values.iter().skip(band).step_by(n.bands).sum::<f64>() / (n.height * n.width) as f64;
            assert!(m.abs() <= 1e-9);
        }
    }

    #[test]
    fn patches_are_centered_and_padded() {
        let (c, l) = small();
        let set = extract_patches(&c, &l, 5).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.labels, vec![0, 1, 0]);
        for (p, &(row, col)) in set.patches.iter().zip(&set.positions) {
            for band in 0..3 {
                assert_eq!(p.get(&[0, band, 2, 2]), c.spectrum(row, col)[band]);
            }
        }
        // pixel (0,0): everything above and left of center is padding
        assert_eq!(set.patches[0].get(&[0, 1, 0, 0]), 0.0);
        assert_eq!(set.patches[0].get(&[0, 1, 3, 3]), c.spectrum(1, 1)[1]);
        assert_eq!(extract_patches(&c, &l, 4).unwrap_err().kind(), "config");
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let (c, l) = generate_synthetic(&SynthParams {
            classes: 2,
            samples_per_class: 50,
            ..SynthParams::default()
        })
        .unwrap();
        let set = extract_patches(&normalize(&c), &l, 3).unwrap();
        let (tr, te) = split(&set, 0.4, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 60));
        let mut all: Vec<_> = tr.positions.iter().chain(&te.positions).copied().collect();
        all.sort_unstable();
        let mut orig = set.positions.clone();
        orig.sort_unstable();
        assert_eq!(all, orig);
        let (tr2, _) = split(&set, 0.4, 3).unwrap();
        assert_eq!(tr.positions, tr2.positions);
        assert_eq!(tr.labels.iter().filter(|&&c| c == 0).count(), 20);
    }

    #[test]
    fn synthetic_noise_free_patches_within_class_are_identical() {
        let p = SynthParams {
            noise_sigma: 0.0,
            samples_per_class: 9,
            ..SynthParams::default()
        };
        let (c, l) = generate_synthetic(&p).unwrap();
        let set = extract_patches(&c, &l, 1).unwrap();
        assert_eq!(set.len(), 27);
        for i in 1..9 {
            assert_eq!(set.patches[0], set.patches[i]);
        }
        assert_ne!(set.patches[0], set.patches[9]);
        assert_eq!(generate_synthetic(&p).unwrap(), (c, l));
    }
}
