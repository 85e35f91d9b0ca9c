//! Seeded synthetic bar images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Tensor4};

pub const IMAGE_SIDE: usize = 16;
/// Label of images holding a horizontal bar.
pub const HORIZONTAL: usize = 0;
/// Label of images holding a vertical bar.
pub const VERTICAL: usize = 1;

/// A labelled batch of single-channel images.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor4<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Split {
        let d = self.images.dims();
        let plane = d.c * d.h * d.w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        Split {
            images: Tensor4::new(Dims4::new(indices.len(), d.c, d.h, d.w), data)
                .expect("gathered length matches dims"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Horizontal (label 0) versus vertical (label 1) bars, `16 x 16`, one
/// bright line of value 1 at a random interior row or column on a zero
/// background, plus noise uniform in `[-noise, noise]` on every pixel.
///
/// Half of the samples carry each label. After a seeded shuffle the first
/// fifth is the test split, the next fifth validation, the rest training.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-label counts over all three splits.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in [&self.train, &self.val, &self.test] {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        counts
    }
}

pub fn generate_dataset(n: usize, noise: f64, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::config(format!("sample count {n} must be even and positive")));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::config(format!("noise level {noise} must lie in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = IMAGE_SIDE;
    let plane = side * side;
    let mut data = vec![0.0; n * plane];
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let label = if s < n / 2 { HORIZONTAL } else { VERTICAL };
        let pos = rng.random_range(1..side - 1);
        let img = &mut data[s * plane..(s + 1) * plane];
        for t in 0..side {
            let idx = if label == HORIZONTAL { pos * side + t } else { t * side + pos };
            img[idx] = 1.0;
        }
        if noise > 0.0 {
            for v in img.iter_mut() {
                *v += rng.random_range(-noise..=noise);
            }
        }
        labels.push(label);
    }
    let all = Split {
        images: Tensor4::new(Dims4::new(n, 1, side, side), data)?,
        labels,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = n / 5;
    let n_val = n / 5;
    Ok(SyntheticDataset {
        test: all.gather(&order[..n_test]),
        val: all.gather(&order[n_test..n_test + n_val]),
        train: all.gather(&order[n_test + n_val..]),
        noise,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_split() {
        let d = generate_dataset(512, 0.1, 3).unwrap();
        assert_eq!(d.class_counts(), [256, 256]);
        assert_eq!(d.len(), 512);
        assert_eq!(d.test.len(), 102);
        assert_eq!(d.val.len(), 102);
        assert_eq!(d.train.len(), 308);
    }

    #[test]
    fn same_seed_same_bits() {
        assert_eq!(generate_dataset(64, 0.2, 9).unwrap(), generate_dataset(64, 0.2, 9).unwrap());
        assert_ne!(generate_dataset(64, 0.2, 9).unwrap(), generate_dataset(64, 0.2, 10).unwrap());
    }

    #[test]
    fn noiseless_images_hold_one_full_line() {
        let d = generate_dataset(40, 0.0, 1).unwrap();
        let s = &d.train;
        for i in 0..s.len() {
            let img = s.gather(&[i]).images;
            let rows: Vec<f64> = (0..16).map(|y| (0..16).map(|x| img.at(0, 0, y, x)).sum()).collect();
            let cols: Vec<f64> = (0..16).map(|x| (0..16).map(|y| img.at(0, 0, y, x)).sum()).collect();
            let (full, single) = if s.labels[i] == HORIZONTAL { (&rows, &cols) } else { (&cols, &rows) };
            assert_eq!(full.iter().filter(|&&v| v == 16.0).count(), 1);
            assert!(single.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn noise_is_bounded() {
        let d = generate_dataset(20, 0.1, 5).unwrap();
        assert!(d.train.images.data().iter().all(|&v| (-0.1..=1.1).contains(&v)));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_dataset(7, 0.1, 0).is_err());
        assert!(generate_dataset(8, 1.0, 0).is_err());
        assert!(generate_dataset(8, -0.1, 0).is_err());
    }
}
