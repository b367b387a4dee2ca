//! Built-in tasks and their splits.

use std::marker::PhantomData;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ChildError;
use crate::numeric::Tensor;

/// Which validation metric a task reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Higher is better, in `[0, 1]`.
    Accuracy,
    /// Lower is better, at least 1.
    Perplexity,
}

impl Metric {
    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Perplexity => a < b,
        }
    }

    pub fn worst(self) -> f64 {
        match self {
            Metric::Accuracy => 0.0,
            Metric::Perplexity => super::PERPLEXITY_CAP,
        }
    }
}

/// Images stored as flat NHWC values with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub shape: [usize; 3],
    pub classes: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stacks the given examples into `image` and `labels` tensors.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let [h, w, c] = self.shape;
        (
            Tensor::new(vec![indices.len(), h, w, c], pixels).expect("sizes agree"),
            Tensor::new(vec![indices.len()], indices.iter().map(|&i| self.labels[i] as f64).collect())
                .expect("sizes agree"),
        )
    }
}

/// Fixed-length token sequences with next-token targets; only positions in
/// `scored` contribute to loss and perplexity.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSet {
    pub vocab: usize,
    pub length: usize,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub scored: Vec<usize>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// One-hot inputs per step (`[batch, vocab]`) and targets per step.
    pub fn batch(&self, indices: &[usize]) -> (Vec<Tensor>, Vec<Tensor>) {
        let b = indices.len();
        let mut xs = Vec::with_capacity(self.length);
        let mut ys = Vec::with_capacity(self.length);
        for t in 0..self.length {
            let mut onehot = vec![0.0; b * self.vocab];
            for (row, &i) in indices.iter().enumerate() {
                onehot[row * self.vocab + self.inputs[i][t]] = 1.0;
            }
            xs.push(Tensor::new(vec![b, self.vocab], onehot).expect("sizes agree"));
            ys.push(
                Tensor::new(vec![b], indices.iter().map(|&i| self.targets[i][t] as f64).collect())
                    .expect("sizes agree"),
            );
        }
        (xs, ys)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Images(ImageSet),
    Sequences(SequenceSet),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(s) => s.len(),
            Dataset::Sequences(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Markers that keep splits apart at the type level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Train {}
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Valid {}
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Test {}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<K> {
    data: Dataset,
    _kind: PhantomData<K>,
}

impl<K> Split<K> {
    fn new(data: Dataset) -> Self {
        Split {
            data,
            _kind: PhantomData,
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Shapes a child must accept for a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    ImageClassify { shape: [usize; 3], classes: usize },
    SequenceModel { vocab: usize, length: usize },
}

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    /// Pad-and-crop plus horizontal flips on training batches.
    pub augment: bool,
    train: Split<Train>,
    valid: Split<Valid>,
    test: Split<Test>,
}

/// The part of a task searches may see: training and validation data.
#[derive(Clone, Copy, Debug)]
pub struct SearchView<'a> {
    pub name: &'a str,
    pub kind: &'a TaskKind,
    pub metric: Metric,
    pub augment: bool,
    pub train: &'a Split<Train>,
    pub valid: &'a Split<Valid>,
}

impl Task {
    pub fn new(
        name: &str,
        metric: Metric,
        train: Dataset,
        valid: Dataset,
        test: Dataset,
    ) -> Result<Self, ChildError> {
        let kind = match (&train, &valid, &test) {
            (Dataset::Images(a), Dataset::Images(b), Dataset::Images(c))
                if a.shape == b.shape && b.shape == c.shape && a.classes == b.classes && b.classes == c.classes =>
            {
                TaskKind::ImageClassify {
                    shape: a.shape,
                    classes: a.classes,
                }
            }
            (Dataset::Sequences(a), Dataset::Sequences(b), Dataset::Sequences(c))
                if a.vocab == b.vocab && b.vocab == c.vocab && a.length == b.length && b.length == c.length =>
            {
                TaskKind::SequenceModel {
                    vocab: a.vocab,
                    length: a.length,
                }
            }
            _ => return Err(ChildError::Task(format!("{name}: splits disagree on shape"))),
        };
        if valid.is_empty() || train.is_empty() {
            return Err(ChildError::Task(format!("{name}: training and validation splits must be non-empty")));
        }
        Ok(Task {
            name: name.to_string(),
            kind,
            metric,
            augment: false,
            train: Split::new(train),
            valid: Split::new(valid),
            test: Split::new(test),
        })
    }

    pub fn view(&self) -> SearchView<'_> {
        SearchView {
            name: &self.name,
            kind: &self.kind,
            metric: self.metric,
            augment: self.augment,
            train: &self.train,
            valid: &self.valid,
        }
    }

    pub fn test(&self) -> &Split<Test> {
        &self.test
    }

    /// Replaces the held-out test data, keeping everything else.
    pub fn with_test(mut self, test: Dataset) -> Self {
        self.test = Split::new(test);
        self
    }
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shape_image(class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    const S: usize = 8;
    let mut img: Vec<f64> = (0..S * S * 3).map(|_| noise.sample(rng)).collect();
    let color: [f64; 3] = [rng.random_range(0.6..1.2), rng.random_range(0.6..1.2), rng.random_range(0.6..1.2)];
    let mut paint = |y: usize, x: usize| {
        for (c, v) in color.iter().enumerate() {
            img[(y * S + x) * 3 + c] += v;
        }
    };
    match class {
        0 => {
            let y = rng.random_range(1..S - 1);
            let x0 = rng.random_range(0..3);
            (x0..x0 + 5).for_each(|x| paint(y, x));
        }
        1 => {
            let x = rng.random_range(1..S - 1);
            let y0 = rng.random_range(0..3);
            (y0..y0 + 5).for_each(|y| paint(y, x));
        }
        2 => {
            let o = rng.random_range(0..3);
            (0..5).for_each(|k| paint(o + k, o + k));
        }
        _ => {
            let (y0, x0) = (rng.random_range(0..4), rng.random_range(0..4));
            for k in 0..4 {
                paint(y0, x0 + k);
                paint(y0 + 3, x0 + k);
                paint(y0 + k, x0);
                paint(y0 + k, x0 + 3);
            }
        }
    }
    img
}

/// 8x8x3 images, classes assigned round-robin then shuffled.
fn image_split(
    n: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
    make: impl Fn(usize, &mut ChaCha8Rng) -> Vec<f64>,
) -> ImageSet {
    let mut pixels = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        pixels.extend(make(class, rng));
        labels.push(class);
    }
    // Shuffle so class order carries no signal.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let len = pixels.len() / n.max(1);
    let mut shuffled = ImageSet {
        shape: [8, 8, 3],
        classes,
        pixels: Vec::with_capacity(pixels.len()),
        labels: Vec::with_capacity(n),
    };
    for i in order {
        shuffled.pixels.extend_from_slice(&pixels[i * len..(i + 1) * len]);
        shuffled.labels.push(labels[i]);
    }
    shuffled
}

/// 8x8x3 images of bars, diagonals and hollow squares over Gaussian noise.
pub fn synthetic_shapes(seed: u64, sizes: [usize; 3]) -> Result<Task, ChildError> {
    let noise = Normal::new(0.0, 0.35).expect("valid");
    let split = |n: usize, stream: u64| {
        let mut rng = derived_rng(seed, stream);
        Dataset::Images(image_split(n, 4, &mut rng, |c, r| shape_image(c, r, &noise)))
    };
    Task::new("synthetic-shapes", Metric::Accuracy, split(sizes[0], 1), split(sizes[1], 2), split(sizes[2], 3))
}

/// Two classes that differ by a constant offset of every pixel.
pub fn separable_images(seed: u64, sizes: [usize; 3]) -> Result<Task, ChildError> {
    let noise = Normal::new(0.0, 0.3).expect("valid");
    let split = |n: usize, stream: u64| {
        let mut rng = derived_rng(seed, stream);
        Dataset::Images(image_split(n, 2, &mut rng, |c, r| {
            let offset = if c == 0 { 0.5 } else { -0.5 };
            (0..8 * 8 * 3).map(|_| offset + noise.sample(r)).collect()
        }))
    };
    Task::new("separable", Metric::Accuracy, split(sizes[0], 1), split(sizes[1], 2), split(sizes[2], 3))
}

/// Noise images whose label is always 0 out of 4 classes.
pub fn constant_label(seed: u64, sizes: [usize; 3]) -> Result<Task, ChildError> {
    let split = |n: usize, stream: u64| {
        let mut rng = derived_rng(seed, stream);
        Dataset::Images(ImageSet {
            shape: [8, 8, 3],
            classes: 4,
            pixels: (0..n * 192).map(|_| rng.random_range(-1.0..1.0)).collect(),
            labels: vec![0; n],
        })
    };
    Task::new("constant-label", Metric::Accuracy, split(sizes[0], 1), split(sizes[1], 2), split(sizes[2], 3))
}

/// Copy-memory symbols: 0 blank, 1..=6 data, 7 delimiter.
pub const COPY_VOCAB: usize = 8;
pub const COPY_LENGTH: usize = 30;
/// Longest run of blanks between the data and the delimiter.
pub const COPY_MAX_GAP: usize = 8;
const COPY_DELIMITER: usize = 7;

/// Sequences of blanks holding `prefix` data symbols, followed after a
/// random delay of 0 to `COPY_MAX_GAP` blanks by a delimiter; the model
/// must then reproduce the data in the last `prefix` positions, which are
/// the only scored ones. The varying delay means the answer cannot be read
/// off fixed positions.
pub fn copy_memory(seed: u64, sizes: [usize; 3], prefix: usize) -> Result<Task, ChildError> {
    if prefix == 0 || 2 * prefix + 1 + COPY_MAX_GAP > COPY_LENGTH {
        return Err(ChildError::Task(format!("copy-memory prefix {prefix} does not fit length {COPY_LENGTH}")));
    }
    let answer = COPY_LENGTH - prefix;
    let split = |n: usize, stream: u64| {
        let mut rng = derived_rng(seed, stream);
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let gap = rng.random_range(0..=COPY_MAX_GAP);
            let start = answer - 1 - gap - prefix;
            let data: Vec<usize> = (0..prefix).map(|_| rng.random_range(1..=6)).collect();
            let mut x = vec![0; COPY_LENGTH];
            x[start..start + prefix].copy_from_slice(&data);
            x[answer - 1] = COPY_DELIMITER;
            let mut y = vec![0; COPY_LENGTH];
            y[answer..].copy_from_slice(&data);
            inputs.push(x);
            targets.push(y);
        }
        Dataset::Sequences(SequenceSet {
            vocab: COPY_VOCAB,
            length: COPY_LENGTH,
            inputs,
            targets,
            scored: (answer..COPY_LENGTH).collect(),
        })
    };
    Task::new("copy-memory", Metric::Perplexity, split(sizes[0], 1), split(sizes[1], 2), split(sizes[2], 3))
}

/// The bundled public-domain text.
pub const CHAR_TOY_TEXT: &str = include_str!("../../data/alice_ch1-8.txt");

/// Sorted distinct characters of the bundled text.
pub fn char_toy_vocab() -> Vec<char> {
    let mut v: Vec<char> = CHAR_TOY_TEXT.chars().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    v.sort_unstable();
    v
}

/// Character-level modelling of the bundled text, split 90/5/5 in order
/// and cut into windows of `length` next-character predictions.
pub fn char_toy(length: usize) -> Result<Task, ChildError> {
    if length == 0 {
        return Err(ChildError::Task("char-toy window must be positive".into()));
    }
    let vocab = char_toy_vocab();
    let ids: Vec<usize> = CHAR_TOY_TEXT
        .chars()
        .map(|c| vocab.binary_search(&c).expect("char is in vocab"))
        .collect();
    let n = ids.len();
    let (a, b) = (n * 90 / 100, n * 95 / 100);
    let windows = |s: &[usize]| {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut at = 0;
        while at + length < s.len() {
            inputs.push(s[at..at + length].to_vec());
            targets.push(s[at + 1..at + length + 1].to_vec());
            at += length;
        }
        Dataset::Sequences(SequenceSet {
            vocab: vocab.len(),
            length,
            inputs,
            targets,
            scored: (0..length).collect(),
        })
    };
    Task::new("char-toy", Metric::Perplexity, windows(&ids[..a]), windows(&ids[a..b]), windows(&ids[b..]))
}

const CIFAR_RECORD: usize = 1 + 3072;

/// Reads records in the CIFAR-10 binary layout: a label byte, then the red,
/// green and blue 32x32 planes.
pub fn read_cifar_records(bytes: &[u8]) -> Result<ImageSet, ChildError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(ChildError::Task(format!(
            "cifar batch has {} bytes, not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(ChildError::Task(format!("cifar label {label} out of range")));
        }
        labels.push(label);
        let planes = &rec[1..];
        let mut img = vec![0.0; 3072];
        for c in 0..3 {
            for p in 0..1024 {
                img[p * 3 + c] = planes[c * 1024 + p] as f64 / 255.0;
            }
        }
        // Per-image whitening.
        let mean = img.iter().sum::<f64>() / 3072.0;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3072.0;
        let std = var.sqrt().max(1.0 / (3072f64).sqrt());
        pixels.extend(img.iter().map(|v| (v - mean) / std));
    }
    Ok(ImageSet {
        shape: [32, 32, 3],
        classes: 10,
        pixels,
        labels,
    })
}

/// CIFAR-10 from `<dir>/cifar-10-batches-bin`; the last 5,000 training
/// images are held out for validation. `Ok(None)` when files are absent.
pub fn cifar10(dir: &Path) -> Result<Option<Task>, ChildError> {
    let root = dir.join("cifar-10-batches-bin");
    let train_files: Vec<_> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
    let test_file = root.join("test_batch.bin");
    if !train_files.iter().chain([&test_file]).all(|p| p.is_file()) {
        return Ok(None);
    }
    let read = |p: &Path| std::fs::read(p).map_err(|e| ChildError::Task(format!("{}: {e}", p.display())));
    let mut all = Vec::new();
    for f in &train_files {
        all.extend(read(f)?);
    }
    let mut train = read_cifar_records(&all)?;
    let test = read_cifar_records(&read(&test_file)?)?;
    let keep = train.len().saturating_sub(5000);
    let valid = ImageSet {
        shape: train.shape,
        classes: 10,
        pixels: train.pixels.split_off(keep * 3072),
        labels: train.labels.split_off(keep),
    };
    let mut task = Task::new(
        "cifar10",
        Metric::Accuracy,
        Dataset::Images(train),
        Dataset::Images(valid),
        Dataset::Images(test),
    )?;
    task.augment = true;
    Ok(Some(task))
}

/// Pads by `pad` pixels, crops back at a random offset and flips
/// horizontally with probability one half, in place.
pub fn augment_batch<R: Rng + ?Sized>(images: &mut Tensor, pad: usize, rng: &mut R) {
    let s = images.shape().to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let data = images.data_mut();
    let mut out = vec![0.0; h * w * c];
    for i in 0..n {
        let img = &mut data[i * h * w * c..(i + 1) * h * w * c];
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random::<bool>();
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize + dy;
                let sx0 = x as isize + dx;
                let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        img[(sy as usize * w + sx as usize) * c + ch]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&out);
    }
}

/// A named entry of the task catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub available: bool,
}

pub const TASK_NAMES: [&str; 5] = ["synthetic-shapes", "copy-memory", "char-toy", "cifar10", "rigged"];

/// Built-in tasks; cifar10 is available only when `NASFORGE_DATA` points
/// at the binary batches.
pub fn builtin_tasks() -> Vec<CatalogEntry> {
    let cifar = std::env::var_os("NASFORGE_DATA")
        .map(|d| Path::new(&d).join("cifar-10-batches-bin").join("test_batch.bin").is_file())
        .unwrap_or(false);
    vec![
        CatalogEntry {
            name: "synthetic-shapes",
            summary: "8x8x3 images, 4 pattern classes, 4000/800/800, accuracy",
            available: true,
        },
        CatalogEntry {
            name: "copy-memory",
            summary: "reproduce 3 data symbols after a variable delay, vocab 8, length 30, 2048/256/256, perplexity on the answer",
            available: true,
        },
        CatalogEntry {
            name: "char-toy",
            summary: "character modelling of a bundled public-domain text, 90/5/5, perplexity",
            available: true,
        },
        CatalogEntry {
            name: "cifar10",
            summary: "CIFAR-10 binary batches under $NASFORGE_DATA, accuracy",
            available: cifar,
        },
        CatalogEntry {
            name: "rigged",
            summary: "analytic reward with a planted optimum over the base-2 cell space, no training",
            available: true,
        },
    ]
}
