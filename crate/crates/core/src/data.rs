//! Datasets, batching, the pruning-set sampler and image-directory loading.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AmpError, Result};
use crate::tensor::Tensor;

/// An in-memory image set, `S × H × W × ch` with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub source_tag: String,
    /// Indices into the source this set was drawn from, in stored order.
    pub ordering: Vec<usize>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(AmpError::Data(format!(
                "images must be S×H×W×ch, got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(AmpError::Data(format!("{} labels for {n} images", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(AmpError::Data(format!("label {bad} outside {num_classes} classes")));
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AmpError::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            source_tag: source_tag.into(),
            ordering: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Gathers the given samples into a `B × H × W × ch` batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("gathered length matches shape")
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect())
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize], tag: impl Into<String>) -> Dataset {
        Dataset {
            images: self.gather(indices),
            labels: self.gather_labels(indices),
            num_classes: self.num_classes,
            source_tag: tag.into(),
            ordering: indices.iter().map(|&i| self.ordering[i]).collect(),
        }
    }

    pub fn batches(&self, batch_size: usize) -> BatchIterator<'_> {
        BatchIterator::new(self, batch_size, None)
    }

    /// SHA-256 over labels and little-endian pixel bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for &y in l {
                h.update((y as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self, paths: &[PathBuf]) -> DatasetManifest {
        DatasetManifest {
            source_tag: self.source_tag.clone(),
            num_samples: self.len(),
            image_size: self.image_size(),
            channels: self.channels(),
            num_classes: self.num_classes,
            paths: paths.iter().map(|p| p.display().to_string()).collect(),
            labels: self.labels.clone(),
            ordering: self.ordering.clone(),
            checksum: self.checksum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_tag: String,
    pub num_samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub paths: Vec<String>,
    pub labels: Option<Vec<usize>>,
    pub ordering: Vec<usize>,
    pub checksum: String,
}

/// One batch of images with their dataset indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Yields every sample once per pass, in stored order unless shuffled.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    drop_last: bool,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        BatchIterator {
            dataset,
            batch_size,
            order,
            pos: 0,
            drop_last: false,
        }
    }

    /// Skip a trailing batch smaller than the batch size.
    pub fn drop_last(mut self) -> Self {
        self.drop_last = true;
        self
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let indices = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        Some(Batch {
            images: self.dataset.gather(&indices),
            labels: self.dataset.gather_labels(&indices),
            indices,
        })
    }
}

/// Procedural class-conditional textures.
///
/// A class is identified by the orientation and frequency of a plane wave
/// and the frequency of a radial ring pattern, mixed into the colour
/// channels with class-specific gains. Each sample draws its own base
/// colour, phase, contrast, orientation jitter and pixel noise. Samples are
/// interleaved by class (`label = i mod num_classes`).
pub fn synth_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(num_classes, per_class, image_size, seed, &SynthStyle::default())
}

/// Knobs for [`synth_dataset_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStyle {
    pub amplitude: f64,
    pub noise: f64,
    pub colour_spread: f64,
    pub angle_jitter: f64,
    pub phase_jitter: f64,
    /// Probability of inverting a sample's pattern.
    pub flip_prob: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            amplitude: 0.4,
            noise: 0.05,
            colour_spread: 0.15,
            angle_jitter: 0.05,
            phase_jitter: 0.2,
            flip_prob: 0.25,
        }
    }
}

pub fn synth_dataset_with(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    style: &SynthStyle,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || image_size == 0 {
        return Err(AmpError::Parameter("synthetic dataset sizes must be positive".into()));
    }
    const CH: usize = 3;
    let signatures: Vec<ClassSignature> = (0..num_classes).map(|c| ClassSignature::new(c, num_classes)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, style.noise).map_err(|e| AmpError::Parameter(e.to_string()))?;
    let total = num_classes * per_class;
    let px = image_size * image_size * CH;
    let mut data = Vec::with_capacity(total * px);
    let mut labels = Vec::with_capacity(total);
    let tau = std::f64::consts::TAU;
    for i in 0..total {
        let class = i % num_classes;
        let sig = &signatures[class];
        let phase = sig.phase + rng.gen_range(-style.phase_jitter..=style.phase_jitter);
        let ring_phase = sig.phase + rng.gen_range(-style.phase_jitter..=style.phase_jitter);
        let contrast = rng.gen_range(0.6..1.0) * if rng.gen_bool(style.flip_prob) { -1.0 } else { 1.0 };
        let base: [f64; 3] = [0, 1, 2].map(|_| 0.5 + rng.gen_range(-style.colour_spread..style.colour_spread));
        let angle = sig.angle + rng.gen_range(-style.angle_jitter..=style.angle_jitter);
        let (fx, fy) = (sig.freq * angle.cos(), sig.freq * angle.sin());
        let (cx, cy) = (0.5 + rng.gen_range(-0.1..0.1), 0.5 + rng.gen_range(-0.1..0.1));
        for y in 0..image_size {
            for x in 0..image_size {
                let u = x as f64 / image_size as f64;
                let v = y as f64 / image_size as f64;
                let wave = (tau * (fx * u + fy * v) + phase).sin();
                let ring = (tau * sig.ring * (u - cx).hypot(v - cy) + ring_phase).cos();
                let pattern = 0.65 * wave + 0.35 * ring;
                for c in 0..CH {
                    let val = base[c] + style.amplitude * contrast * sig.gain[c] * pattern + noise.sample(&mut rng);
                    data.push(val.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![total, image_size, image_size, CH], data)?;
    Dataset::new(
        images,
        Some(labels),
        num_classes,
        format!("synth-c{num_classes}-n{per_class}-s{image_size}-seed{seed}"),
    )
}

struct ClassSignature {
    gain: [f64; 3],
    angle: f64,
    freq: f64,
    ring: f64,
    phase: f64,
}

impl ClassSignature {
    /// Fixed per class, independent of the sampling seed, so train and test
    /// sets drawn with different seeds share class identities.
    fn new(class: usize, num_classes: usize) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(0x5EED_0000 + class as u64);
        ClassSignature {
            gain: [0, 1, 2].map(|_| r.gen_range(0.5..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }),
            angle: std::f64::consts::PI * (class as f64 + 0.5) / num_classes as f64,
            freq: 1.5 + 2.0 * (class % 3) as f64 / 2.0 + r.gen_range(0.0..0.3),
            ring: r.gen_range(1.0..4.0),
            phase: r.gen_range(0.0..std::f64::consts::TAU),
        }
    }
}

/// Uniform sample of `n` indices without replacement, stored in ascending
/// index order so evaluation batches are fixed for the lifetime of the set.
pub fn sample_prune_set(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let indices = sample_indices(dataset.len(), n, seed)?;
    Ok(dataset.subset(&indices, format!("{}/prune-n{n}-seed{seed}", dataset.source_tag)))
}

pub fn sample_indices(size: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > size {
        return Err(AmpError::Parameter(format!("cannot sample {n} from {size} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, size, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Result of [`load_image_dir`].
#[derive(Debug)]
pub struct ImageDirLoad {
    pub dataset: Dataset,
    pub paths: Vec<PathBuf>,
    pub class_names: Vec<String>,
    pub skipped: usize,
}

/// Loads `root/<class>/<image>` with classes and files in lexicographic
/// order, resizing bilinearly to `image_size` square RGB.
pub fn load_image_dir(root: impl AsRef<Path>, image_size: usize) -> Result<ImageDirLoad> {
    let root = root.as_ref();
    let mut class_dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    class_dirs.sort();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut paths = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0;
    for dir in &class_dirs {
        let label = class_names.len();
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in read_dir_sorted(dir)?.into_iter().filter(|p| p.is_file()) {
            match decode(&file, image_size) {
                Ok(pixels) => {
                    data.extend(pixels);
                    labels.push(label);
                    paths.push(file);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped += 1;
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(AmpError::Data(format!("no readable images under {}", root.display())));
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable files skipped under {}", root.display());
    }
    let images = Tensor::new(vec![labels.len(), image_size, image_size, 3], data)?;
    let dataset = Dataset::new(images, Some(labels), class_names.len(), root.display().to_string())?;
    Ok(ImageDirLoad {
        dataset,
        paths,
        class_names,
        skipped,
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AmpError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn decode(path: &Path, image_size: usize) -> std::result::Result<Vec<f64>, image::ImageError> {
    let img = image::open(path)?.to_rgb32f();
    let side = image_size as u32;
    let img = if img.width() == side && img.height() == side {
        img
    } else {
        image::imageops::resize(&img, side, side, FilterType::Triangle)
    };
    Ok(img.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect())
}
