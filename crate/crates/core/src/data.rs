//! Seeded synthetic image classification data.
//!
//! Ten classes: five stroke shapes, each drawn brightly in one of two
//! channels and faintly in the other. Shapes are jittered by up to two
//! pixels and overlaid with uniform noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor4D;
use crate::{err, Result};

pub const CLASSES: usize = 10;
pub const CHANNELS: usize = 2;
pub const SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let size = CHANNELS * SIDE * SIDE;
        &self.images[i * size..(i + 1) * size]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the given samples into an `n x 2 x 16 x 16` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4D, Vec<usize>)> {
        if indices.is_empty() {
            return Err(err!(Shape, "empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * SIDE * SIDE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(err!(Shape, "sample {i} out of range"));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor4D::new(indices.len(), CHANNELS, SIDE, SIDE, data)?, labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
}

fn draw_shape(shape: usize, rng: &mut ChaCha8Rng) -> [[f32; SIDE]; SIDE] {
    let mut m = [[0.0f32; SIDE]; SIDE];
    let cy = 8 + rng.gen_range(-2i32..=2);
    let cx = 8 + rng.gen_range(-2i32..=2);
    let half = rng.gen_range(3i32..=5);
    let mut set = |y: i32, x: i32| {
        if (0..SIDE as i32).contains(&y) && (0..SIDE as i32).contains(&x) {
            m[y as usize][x as usize] = 1.0;
        }
    };
    for d in -half..=half {
        match shape {
            0 => set(cy, cx + d),
            1 => set(cy + d, cx),
            2 => {
                set(cy, cx + d);
                set(cy + d, cx);
            }
            3 => {
                set(cy - half, cx + d);
                set(cy + half, cx + d);
                set(cy + d, cx - half);
                set(cy + d, cx + half);
            }
            _ => set(cy + d, cx + d),
        }
    }
    m
}

/// `samples` images with labels cycling through the classes.
pub fn synthetic_dataset(samples: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0.0f32; samples * CHANNELS * SIDE * SIDE];
    let mut labels = Vec::with_capacity(samples);
    for (i, img) in images.chunks_exact_mut(CHANNELS * SIDE * SIDE).enumerate() {
        let label = i % CLASSES;
        let shape = draw_shape(label % 5, &mut rng);
        let strong = label / 5;
        let (hi, lo) = (rng.gen_range(0.7f32..1.0), rng.gen_range(0.1f32..0.3));
        for (ch, plane) in img.chunks_exact_mut(SIDE * SIDE).enumerate() {
            let gain = if ch == strong { hi } else { lo };
            for (p, v) in plane.iter_mut().enumerate() {
                *v = gain * shape[p / SIDE][p % SIDE] + rng.gen_range(-0.25f32..0.25);
            }
        }
        labels.push(label);
    }
    Dataset { images, labels }
}

/// Independent train and validation draws from one seed.
pub fn synthetic_split(train: usize, validation: usize, seed: u64) -> Split {
    Split {
        train: synthetic_dataset(train, seed),
        validation: synthetic_dataset(validation, seed ^ 0x9e37_79b9_7f4a_7c15),
    }
}
