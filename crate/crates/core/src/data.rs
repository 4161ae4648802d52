//! Datasets: IDX and frame-file loaders, frame splicing, minibatching, and a
//! synthetic sequential frame-classification task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{BnnError, Result};

pub const FRAMES_MAGIC: &[u8; 4] = b"FRM1";
pub const LABELS_MAGIC: &[u8; 4] = b"LBL1";
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature rows with class labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(BnnError::Data(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(BnnError::Data(format!(
                "sample {i}: label {} >= num_classes {num_classes}",
                labels[i]
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(BnnError::Data(format!(
                "non-finite feature in sample {}",
                pos / dim.max(1)
            )));
        }
        Ok(Dataset {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features: self.features[start * self.dim..end * self.dim].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Splits off the last `fraction` of samples (by index) as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> (Dataset, Dataset) {
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held.min(self.len());
        (self.slice(0, cut), self.slice(cut, self.len()))
    }

    /// Concatenates each frame with its `(context - 1) / 2` neighbours on
    /// either side, replicating the first and last frames at the edges.
    pub fn splice(&self, context: usize) -> Result<Dataset> {
        if context == 0 || context.is_multiple_of(2) {
            return Err(BnnError::Config(format!(
                "splice context must be odd and >= 1, got {context}"
            )));
        }
        let half = (context - 1) / 2;
        let n = self.len();
        let mut features = Vec::with_capacity(n * self.dim * context);
        for t in 0..n {
            for offset in 0..context {
                let src = (t + offset).saturating_sub(half).min(n - 1);
                features.extend_from_slice(self.row(src));
            }
        }
        Ok(Dataset {
            dim: self.dim * context,
            num_classes: self.num_classes,
            features,
            labels: self.labels.clone(),
        })
    }
}

/// A block of samples drawn for one SGD step.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Sample order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled minibatches covering every sample exactly once; the last batch may be short.
pub fn shuffle_batches(
    d: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Minibatch> + '_> {
    if batch_size == 0 {
        return Err(BnnError::Config("batch size must be >= 1".into()));
    }
    let order = epoch_permutation(d.len(), seed, epoch);
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(batches.into_iter().map(move |indices| {
        let mut features = Vec::with_capacity(indices.len() * d.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            features.extend_from_slice(d.row(i));
            labels.push(d.labels[i]);
        }
        Minibatch {
            indices,
            dim: d.dim(),
            features,
            labels,
        }
    }))
}

fn read_u32_be(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| BnnError::format(field, offset, "unexpected end of file"))
}

fn read_u32_le(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| BnnError::format(field, offset, "unexpected end of file"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| BnnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Decodes an IDX image/label pair. Pixels are scaled to `[0, 1]`.
///
/// The class count is at least 10 (digit data) and grows to cover the largest label.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(BnnError::format(
            "images.magic",
            0,
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = read_u32_be(images, 4, "images.count")? as usize;
    let rows = read_u32_be(images, 8, "images.rows")? as usize;
    let cols = read_u32_be(images, 12, "images.cols")? as usize;
    let magic = read_u32_be(labels, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(BnnError::format(
            "labels.magic",
            0,
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n_labels = read_u32_be(labels, 4, "labels.count")? as usize;
    if n != n_labels {
        return Err(BnnError::Data(format!(
            "IDX count mismatch: {n} images, {n_labels} labels"
        )));
    }
    let dim = rows * cols;
    let pixels = images
        .get(16..16 + n * dim)
        .ok_or_else(|| BnnError::format("images.pixels", images.len(), "truncated pixel data"))?;
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| BnnError::format("labels.values", labels.len(), "truncated label data"))?;
    let features = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let labels: Vec<u32> = label_bytes.iter().map(|&l| u32::from(l)).collect();
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    Dataset::new(dim, num_classes, features, labels)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    decode_idx(&read_file(images.as_ref())?, &read_file(labels.as_ref())?)
}

/// Decodes a `FRM1` feature file alone, returning `(dim, row-major values)`.
pub fn decode_features(features: &[u8]) -> Result<(usize, Vec<f32>)> {
    if features.get(0..4) != Some(FRAMES_MAGIC.as_slice()) {
        return Err(BnnError::format("features.magic", 0, "expected \"FRM1\""));
    }
    let n = read_u32_le(features, 4, "features.count")? as usize;
    let dim = read_u32_le(features, 8, "features.dim")? as usize;
    let body = 12;
    let expected = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(body))
        .ok_or_else(|| BnnError::format("features.count", 4, "size overflows"))?;
    if features.len() != expected {
        return Err(BnnError::format(
            "features.values",
            features.len().min(expected),
            format!("expected {expected} bytes in total, found {}", features.len()),
        ));
    }
    let values: Vec<f32> = features[body..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(BnnError::format("features.values", body + pos * 4, "non-finite value"));
    }
    Ok((dim, values))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<(usize, Vec<f32>)> {
    decode_features(&read_file(path.as_ref())?)
}

/// Encodes `values` as a `FRM1` file of `dim`-wide rows.
pub fn encode_features(dim: usize, values: &[f32]) -> Vec<u8> {
    assert!(
        dim > 0 && values.len().is_multiple_of(dim),
        "values do not form {dim}-wide rows"
    );
    let mut f = Vec::with_capacity(12 + values.len() * 4);
    f.extend_from_slice(FRAMES_MAGIC);
    f.extend_from_slice(&((values.len() / dim) as u32).to_le_bytes());
    f.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in values {
        f.extend_from_slice(&v.to_le_bytes());
    }
    f
}

/// Decodes a `FRM1` feature file and `LBL1` label file pair.
pub fn decode_frames(features: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (dim, values) = decode_features(features)?;
    let n = read_u32_le(features, 4, "features.count")? as usize;

    if labels.get(0..4) != Some(LABELS_MAGIC.as_slice()) {
        return Err(BnnError::format("labels.magic", 0, "expected \"LBL1\""));
    }
    let n_labels = read_u32_le(labels, 4, "labels.count")? as usize;
    let num_classes = read_u32_le(labels, 8, "labels.num_classes")? as usize;
    if n_labels != n {
        return Err(BnnError::format(
            "labels.count",
            4,
            format!("{n_labels} labels for {n} feature rows"),
        ));
    }
    let expected = 12 + n * 4;
    if labels.len() != expected {
        return Err(BnnError::format(
            "labels.values",
            labels.len().min(expected),
            format!("expected {expected} bytes in total, found {}", labels.len()),
        ));
    }
    let mut label_values = Vec::with_capacity(n);
    for i in 0..n {
        let offset = 12 + i * 4;
        let l = read_u32_le(labels, offset, "labels.values")?;
        if l as usize >= num_classes {
            return Err(BnnError::format(
                "labels.values",
                offset,
                format!("label {l} >= num_classes {num_classes}"),
            ));
        }
        label_values.push(l);
    }
    Dataset::new(dim, num_classes, values, label_values)
}

pub fn load_frames(features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    decode_frames(&read_file(features.as_ref())?, &read_file(labels.as_ref())?)
}

/// Encodes a dataset as `(FRM1 bytes, LBL1 bytes)`.
pub fn encode_frames(d: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let f = encode_features(d.dim, &d.features);
    let mut l = Vec::with_capacity(12 + d.len() * 4);
    l.extend_from_slice(LABELS_MAGIC);
    l.extend_from_slice(&(d.len() as u32).to_le_bytes());
    l.extend_from_slice(&(d.num_classes as u32).to_le_bytes());
    for v in &d.labels {
        l.extend_from_slice(&v.to_le_bytes());
    }
    (f, l)
}

pub fn write_frames(d: &Dataset, features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (f, l) = encode_frames(d);
    fs::write(features, f)?;
    fs::write(labels, l)?;
    Ok(())
}

/// Parameters of the synthetic sequential frame task.
///
/// Each class has a fixed Gaussian prototype. A sequence is a chain of
/// segments; every segment picks a new class and emits noisy copies of its
/// prototype for a random number of consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFrames {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise: f32,
    pub min_run: usize,
    pub max_run: usize,
    pub seed: u64,
}

impl Default for SyntheticFrames {
    fn default() -> Self {
        SyntheticFrames {
            frames: 20_000,
            dim: 24,
            classes: 10,
            noise: 2.0,
            min_run: 6,
            max_run: 14,
            seed: 1,
        }
    }
}

impl SyntheticFrames {
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.dim == 0 || self.min_run == 0 || self.min_run > self.max_run {
            return Err(BnnError::Config(format!("invalid synthetic task {self:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prototypes: Vec<f32> = (0..self.classes * self.dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let mut features = Vec::with_capacity(self.frames * self.dim);
        let mut labels = Vec::with_capacity(self.frames);
        let mut class = rng.random_range(0..self.classes);
        while labels.len() < self.frames {
            let run = rng.random_range(self.min_run..=self.max_run);
            for _ in 0..run.min(self.frames - labels.len()) {
                let proto = &prototypes[class * self.dim..(class + 1) * self.dim];
                for &p in proto {
                    features.push(p + self.noise * rng.sample::<f32, _>(StandardNormal));
                }
                labels.push(class as u32);
            }
            class = (class + rng.random_range(1..self.classes)) % self.classes;
        }
        Dataset::new(self.dim, self.classes, features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize, dim: usize) -> Dataset {
        let features = (0..n * dim).map(|v| v as f32).collect();
        let labels = (0..n as u32).map(|i| i % 3).collect();
        Dataset::new(dim, 3, features, labels).unwrap()
    }

    fn idx_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8], labels: &[u8], label_count: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, label_count] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_decoding() {
        let n = 10_000usize;
        let pixels = vec![255u8; n * 784];
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (img, lab) = idx_bytes(n as u32, 28, 28, &pixels, &labels, n as u32);
        let d = decode_idx(&img, &lab).unwrap();
        assert_eq!((d.len(), d.dim(), d.num_classes()), (10_000, 784, 10));
        assert!(d.row(3).iter().all(|&v| v == 1.0));

        let (img, lab) = idx_bytes(1, 2, 2, &[0, 0, 0, 0], &[7], 1);
        let d = decode_idx(&img, &lab).unwrap();
        assert_eq!(d.row(0), &[0.0; 4]);
        assert_eq!(d.label(0), 7);

        let (img, lab) = idx_bytes(2, 1, 1, &[1, 2], &[0, 1, 2], 3);
        assert!(matches!(decode_idx(&img, &lab), Err(BnnError::Data(_))));

        let (mut img, lab) = idx_bytes(1, 1, 1, &[1], &[0], 1);
        img[3] = 0x01;
        assert!(matches!(decode_idx(&img, &lab), Err(BnnError::Format { .. })));
        assert!(decode_idx(&img[..6], &lab).is_err());
    }

    #[test]
    fn frames_round_trip_and_errors() {
        let d = toy(5, 4);
        let (f, l) = encode_frames(&d);
        assert_eq!(decode_frames(&f, &l).unwrap(), d);

        let empty = Dataset::new(3, 2, vec![], vec![]).unwrap();
        let (f, l) = encode_frames(&empty);
        let back = decode_frames(&f, &l).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 3);

        let (f, mut l) = encode_frames(&d);
        let last = l.len() - 4;
        l[last..].copy_from_slice(&3u32.to_le_bytes());
        match decode_frames(&f, &l) {
            Err(BnnError::Format { field, offset, .. }) => {
                assert_eq!(field, "labels.values");
                assert_eq!(offset, last);
            }
            other => panic!("{other:?}"),
        }
        let (mut f, l) = encode_frames(&d);
        f[0] = b'X';
        assert!(decode_frames(&f, &l).is_err());
        let (f, l) = encode_frames(&d);
        assert!(decode_frames(&f[..f.len() - 1], &l).is_err());
    }

    #[test]
    fn frames_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = toy(4, 2);
        let (fp, lp) = (dir.path().join("x.frm"), dir.path().join("x.lbl"));
        write_frames(&d, &fp, &lp).unwrap();
        assert_eq!(load_frames(&fp, &lp).unwrap(), d);
    }

    #[test]
    fn splice_cases() {
        let d = toy(4, 2);
        assert_eq!(d.splice(1).unwrap(), d);
        assert!(matches!(d.splice(2), Err(BnnError::Config(_))));
        assert!(d.splice(0).is_err());
        let s = d.splice(3).unwrap();
        assert_eq!(s.dim(), 6);
        assert_eq!(s.row(0), &[0.0, 1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.row(3), &[4.0, 5.0, 6.0, 7.0, 6.0, 7.0]);
        assert_eq!(s.labels(), d.labels());
        let wide = Dataset::new(80, 3, vec![0.5; 80 * 20], vec![0; 20]).unwrap();
        assert_eq!(wide.splice(11).unwrap().dim(), 880);
    }

    #[test]
    fn batch_sizes_and_reproducibility() {
        let d = toy(10, 1);
        let sizes: Vec<usize> = shuffle_batches(&d, 4, 1, 0).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let order = |epoch| -> Vec<usize> {
            shuffle_batches(&d, 4, 1, epoch)
                .unwrap()
                .flat_map(|b| b.indices)
                .collect()
        };
        assert_eq!(order(0), order(0));
        assert_eq!(order(1), order(1));
        assert_ne!(order(0), order(1));
        assert!(shuffle_batches(&d, 0, 1, 0).is_err());
        let b = shuffle_batches(&d, 3, 5, 2).unwrap().next().unwrap();
        for (k, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.row(k), d.row(i));
            assert_eq!(b.labels[k] as usize, d.label(i));
        }
    }

    #[test]
    fn holdout_split_takes_tail() {
        let d = toy(20, 1);
        let (train, held) = d.split_holdout(0.1);
        assert_eq!(train.len(), 18);
        assert_eq!(held.row(0), d.row(18));
    }

    #[test]
    fn synthetic_task_is_deterministic_and_segmented() {
        let spec = SyntheticFrames {
            frames: 500,
            ..SyntheticFrames::default()
        };
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_eq!(a.len(), 500);
        let changes = a.labels().windows(2).filter(|w| w[0] != w[1]).count();
        assert!((500 / 14 - 1..=500 / 6 + 1).contains(&changes), "{changes}");
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 0usize..200, batch in 1usize..50, seed in any::<u64>()) {
            let d = Dataset::new(1, 1, vec![0.0; n], vec![0; n]).unwrap();
            let mut seen: Vec<usize> = shuffle_batches(&d, batch, seed, 3)
                .unwrap()
                .inspect(|b| assert!(b.len() <= batch && !b.is_empty()))
                .flat_map(|b| b.indices)
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn splice_keeps_centre_frame(n in 1usize..30, half in 0usize..4) {
            let d = toy(n, 2);
            let context = 2 * half + 1;
            let s = d.splice(context).unwrap();
            prop_assert_eq!(s.len(), n);
            for t in 0..n {
                prop_assert_eq!(&s.row(t)[half * 2..half * 2 + 2], d.row(t));
            }
        }
    }
}
