//! Datasets: a seeded synthetic generator and the CIFAR-10 binary reader.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored NCHW in one flat buffer, plus labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    /// `(C, H, W)` of one image.
    pub image_shape: [usize; 3],
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

/// A gathered mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        num_classes: usize,
        image_shape: [usize; 3],
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} values for {} labels of shape {image_shape:?}",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {y} out of range for {num_classes} classes"),
            ));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            num_classes,
            image_shape,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Batch {
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("sized by construction"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.gather(indices);
        Dataset {
            name: self.name.clone(),
            split: self.split,
            num_classes: self.num_classes,
            image_shape: self.image_shape,
            images: b.images.into_data(),
            labels: b.labels,
        }
    }

    /// Per-channel `(mean, std)` over every pixel of every image.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        (0..c)
            .map(|ch| {
                let vals = || (0..self.len()).flat_map(move |i| &self.image(i)[ch * plane..(ch + 1) * plane]);
                let count = (self.len() * plane) as f64;
                let mean = vals().sum::<f64>() / count;
                let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Applies `(x − mean) / std` per channel.
    pub fn standardize(&mut self, stats: &[(f64, f64)]) {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        for img in self.images.chunks_mut(c * plane) {
            for (ch, &(mean, std)) in stats.iter().enumerate() {
                let std = if std > 0.0 { std } else { 1.0 };
                img[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) / std);
            }
        }
    }
}

/// Standardizes both splits with statistics of the training split.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) {
    let stats = train.channel_stats();
    train.standardize(&stats);
    test.standardize(&stats);
}

/// Shuffled mini-batches of indices for one epoch; the short tail is
/// dropped. The order depends only on `(seed, epoch)`.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::DatasetTooSmall {
            msg: format!("batch size {batch_size} with {len} samples"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Synthetic classification task: every class owns a Gaussian blob
/// position and an oriented stripe texture.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Replaces every image by noise alone.
    pub pure_noise: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            train_per_class: 256,
            test_per_class: 64,
            image_size: 16,
            channels: 3,
            noise: 0.5,
            pure_noise: false,
            seed: 0,
        }
    }
}

struct ClassSignature {
    center: (f64, f64),
    freq: f64,
    angle: f64,
    tint: Vec<f64>,
}

impl SynthSpec {
    fn signatures(&self) -> Vec<ClassSignature> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.image_size as f64;
        (0..self.num_classes)
            .map(|k| {
                let frac = k as f64 / self.num_classes as f64;
                ClassSignature {
                    center: (
                        s * (0.3 + 0.4 * rng.random::<f64>()),
                        s * (0.3 + 0.4 * rng.random::<f64>()),
                    ),
                    freq: 2.0 * PI / (2.5 + 2.5 * ((k * 7) % self.num_classes) as f64 / self.num_classes as f64),
                    angle: PI * frac,
                    tint: (0..self.channels).map(|_| 0.5 + rng.random::<f64>()).collect(),
                }
            })
            .collect()
    }

    fn render(&self, sig: &ClassSignature, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let s = self.image_size;
        let sigma = s as f64 / 4.0;
        let (jx, jy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let phase = rng.random_range(0.0..2.0 * PI);
        let (cos, sin) = (sig.angle.cos(), sig.angle.sin());
        for &tint in &sig.tint {
            for y in 0..s {
                for x in 0..s {
                    let noise: f64 = StandardNormal.sample(rng);
                    let signal = if self.pure_noise {
                        0.0
                    } else {
                        let (dx, dy) = (x as f64 - sig.center.0 - jx, y as f64 - sig.center.1 - jy);
                        let blob = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let stripe = (sig.freq * (x as f64 * cos + y as f64 * sin) + phase).cos();
                        tint * blob * (0.5 + stripe)
                    };
                    out.push(signal + self.noise * noise);
                }
            }
        }
    }

    fn draw(&self, split: Split, per_class: usize, sigs: &[ClassSignature]) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 1,
            Split::Test => 2,
        });
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * self.num_classes {
            let k = i % self.num_classes;
            self.render(&sigs[k], &mut rng, &mut images);
            labels.push(k);
        }
        Dataset::new(
            "synth",
            split,
            self.num_classes,
            [self.channels, self.image_size, self.image_size],
            images,
            labels,
        )
    }
}

/// Balanced train/test splits drawn from separate RNG streams, both
/// standardized with train statistics.
pub fn generate_synth(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.image_size == 0 || spec.channels == 0 || spec.train_per_class == 0 {
        return Err(Error::config("synth", format!("degenerate synthetic spec {spec:?}")));
    }
    let sigs = spec.signatures();
    let mut train = spec.draw(Split::Train, spec.train_per_class, &sigs)?;
    let mut test = spec.draw(Split::Test, spec.test_per_class.max(1), &sigs)?;
    standardize_pair(&mut train, &mut test);
    Ok((train, test))
}

/// Test accuracy of a multinomial logistic regression on raw pixels,
/// trained by full-batch gradient descent.
pub fn logistic_probe(train: &Dataset, test: &Dataset, steps: usize, lr: f64) -> f64 {
    let (d, k) = (train.image_len(), train.num_classes);
    let mut w = vec![0.0; k * (d + 1)];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| {
                let row = &w[j * (d + 1)..(j + 1) * (d + 1)];
                row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for _ in 0..steps {
        let mut grad = vec![0.0; w.len()];
        for i in 0..train.len() {
            let x = train.image(i);
            let mut p = logits(&w, x);
            softmax_in_place(&mut p);
            p[train.labels[i]] -= 1.0;
            for (j, &pj) in p.iter().enumerate() {
                let row = &mut grad[j * (d + 1)..(j + 1) * (d + 1)];
                row[..d].iter_mut().zip(x).for_each(|(g, &xv)| *g += pj * xv);
                row[d] += pj;
            }
        }
        let scale = lr / train.len() as f64;
        w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= scale * g);
    }
    let hits = (0..test.len())
        .filter(|&i| crate::nn::argmax(&logits(&w, test.image(i))) == test.labels[i])
        .count();
    hits as f64 / test.len() as f64
}

pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: u64 = (CIFAR_RECORD * CIFAR_RECORDS_PER_FILE) as u64;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read_cifar_file(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.len() as u64 != CIFAR_FILE_BYTES {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected: CIFAR_FILE_BYTES,
            actual: bytes.len() as u64,
        });
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::BadLabel {
                path: path.to_path_buf(),
                record: r,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Reads the five training batches and the test batch from `dir`.
pub fn load_cifar10_bin(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |files: &[&str], split| -> Result<Dataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            read_cifar_file(&dir.join(f), &mut images, &mut labels)?;
        }
        Dataset::new("cifar10", split, 10, [3, 32, 32], images, labels)
    };
    let mut train = load(&CIFAR_TRAIN_FILES, Split::Train)?;
    let mut test = load(&[CIFAR_TEST_FILE], Split::Test)?;
    standardize_pair(&mut train, &mut test);
    Ok((train, test))
}
