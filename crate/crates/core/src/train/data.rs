//! In-memory datasets: seeded synthetic class blobs and the CIFAR-10 binary
//! format (records of one label byte followed by 3072 channel-major pixels).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// (c, h, w) of one sample.
    pub sample_shape: (usize, usize, usize),
    pub classes: usize,
    /// Sample-major, each sample channel-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        let (c, h, w) = self.sample_shape;
        c * h * w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into an `(n, c, h, w)` tensor.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = self.sample_shape;
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64(v)));
        }
        let x = Tensor::from_vec(Shape::new(idx.len(), c, h, w), data).expect("batch length");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Subtracts the per-pixel mean over all samples.
    pub fn subtract_mean_image(&mut self) {
        let n = self.sample_len();
        if self.is_empty() {
            return;
        }
        let mut mean = vec![0.0; n];
        for s in self.images.chunks(n) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        let k = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        for s in self.images.chunks_mut(n) {
            for (v, m) in s.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
}

/// One Gaussian template per class with per-pixel standard deviation
/// `margin / 2`, plus unit Gaussian noise per sample. Labels are drawn
/// uniformly.
pub fn synthetic(sample_shape: (usize, usize, usize), classes: usize, samples: usize, margin: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = sample_shape;
    let n = c * h * w;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..n).map(|_| 0.5 * margin * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut images = Vec::with_capacity(samples * n);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = rng.gen_range(0..classes);
        labels.push(y);
        images.extend(templates[y].iter().map(|&m| m + rng.sample::<f64, _>(StandardNormal)));
    }
    Dataset {
        sample_shape,
        classes,
        images,
        labels,
    }
}

/// Raw CIFAR-10 records before scaling.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    /// `labels.len() * 3072` bytes.
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let full = bytes.len() / CIFAR_RECORD;
        let rem = bytes.len() % CIFAR_RECORD;
        if rem != 0 {
            return Err(Error::Truncated {
                offset: (full * CIFAR_RECORD) as u64,
                needed: CIFAR_RECORD,
                available: rem,
            });
        }
        let mut out = CifarRecords {
            labels: Vec::with_capacity(full),
            pixels: Vec::with_capacity(full * CIFAR_PIXELS),
        };
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: rec[0] as usize,
                    classes: CIFAR_CLASSES,
                });
            }
            out.labels.push(rec[0]);
            out.pixels.extend_from_slice(&rec[1..]);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for (l, px) in self.labels.iter().zip(self.pixels.chunks(CIFAR_PIXELS)) {
            out.push(*l);
            out.extend_from_slice(px);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Pixels scaled to [0, 1]; no mean subtraction.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            sample_shape: (3, 32, 32),
            classes: CIFAR_CLASSES,
            images: self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            labels: self.labels.iter().map(|&l| l as usize).collect(),
        }
    }

    /// Maps a 3x32x32 dataset with at most 10 classes onto bytes, linearly
    /// stretching its value range to 0..=255.
    pub fn quantize(d: &Dataset) -> Result<Self> {
        if d.sample_shape != (3, 32, 32) {
            let (c, h, w) = d.sample_shape;
            return Err(Error::InvalidSpec(format!("CIFAR records need 3x32x32 samples, got {c}x{h}x{w}")));
        }
        if let Some((i, &l)) = d.labels.iter().enumerate().find(|(_, &l)| l >= CIFAR_CLASSES) {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                classes: CIFAR_CLASSES,
            });
        }
        let lo = d.images.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.images.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Ok(CifarRecords {
            labels: d.labels.iter().map(|&l| l as u8).collect(),
            pixels: d.images.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect(),
        })
    }
}

/// Loads a CIFAR-10 binary file, or every `data_batch_*.bin` in a directory,
/// scales to [0, 1] and subtracts the mean image.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut v: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Config(format!("no data_batch_*.bin files in {}", path.display())));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = CifarRecords::default();
    for f in files {
        let r = CifarRecords::read(&f)?;
        all.labels.extend(r.labels);
        all.pixels.extend(r.pixels);
    }
    let mut d = all.to_dataset();
    d.subtract_mean_image();
    Ok(d)
}

/// Zero-pads by `pad`, takes a random crop of the original size and flips
/// horizontally with probability one half, independently per sample.
pub fn crop_flip<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, pad: usize, rng: &mut R) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                let si = i as isize + dy;
                if si < 0 || si >= s.h as isize {
                    continue;
                }
                for j in 0..s.w {
                    let jj = if flip { s.w - 1 - j } else { j };
                    let sj = jj as isize + dx;
                    if sj < 0 || sj >= s.w as isize {
                        continue;
                    }
                    dst[i * s.w + j] = src[si as usize * s.w + sj as usize];
                }
            }
        }
    }
    out
}

/// Epoch-wise shuffled batch order.
#[derive(Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_record() {
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 7;
        let r = CifarRecords::parse(&bytes).unwrap();
        let mut d = r.to_dataset();
        let mean = d.images.clone();
        d.subtract_mean_image();
        assert_eq!(d.labels, vec![7]);
        assert!(d.images.iter().zip(&mean).all(|(v, m)| *v == -m));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = vec![1u8; 2 * CIFAR_RECORD + 100];
        match CifarRecords::parse(&bytes) {
            Err(Error::Truncated { offset, available, .. }) => {
                assert_eq!(offset, 2 * CIFAR_RECORD as u64);
                assert_eq!(available, 100);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        assert!(matches!(CifarRecords::parse(&bytes), Err(Error::LabelOutOfRange { index: 1, .. })));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic((3, 4, 4), 2, 10, 1.0, 5);
        assert_eq!(a, synthetic((3, 4, 4), 2, 10, 1.0, 5));
        assert_ne!(a, synthetic((3, 4, 4), 2, 10, 1.0, 6));
        assert!(a.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn crop_flip_without_padding_is_flip_or_identity() {
        let x = Tensor::<f64>::from_f64_slice(Shape::new(1, 1, 1, 3), &[1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let y = crop_flip(&x, 0, &mut rng);
            assert!(y.data() == [1.0, 2.0, 3.0] || y.data() == [3.0, 2.0, 1.0]);
        }
    }
}
