//! Small odd-sized 2-D filters and their full discrete convolution.
//!
//! Filters are generic over the scalar so the integer approximations can be
//! handled in exact rational arithmetic while the sampled Gaussian/LoG
//! filters use `f64`.

use alloc::vec::Vec;
use core::ops::{Add, Mul};

use num_rational::Ratio;
use num_traits::Zero;

use crate::{err, Result};

pub type Rational = Ratio<i64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Filter2D<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Copy> Filter2D<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(err!(Shape, "filter dims must be odd, got {height}x{width}"));
        }
        if values.len() != height * width {
            return Err(err!(Shape, "{height}x{width} filter needs {} values, got {}", height * width, values.len()));
        }
        Ok(Filter2D { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.width + c]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Filter2D<U> {
        Filter2D { height: self.height, width: self.width, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Clockwise quarter turn.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut values = Vec::with_capacity(h * w);
        for r in 0..w {
            for c in 0..h {
                values.push(self.get(h - 1 - c, r));
            }
        }
        Filter2D { height: w, width: h, values }
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.width {
            for r in 0..self.height {
                values.push(self.get(r, c));
            }
        }
        Filter2D { height: self.width, width: self.height, values }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                values.push(self.get(r, c));
            }
        }
        Filter2D { height: self.height, width: self.width, values }
    }
}

impl<T: Copy + Zero + Add<Output = T>> Filter2D<T> {
    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &b| a + b)
    }
}

impl Filter2D<Rational> {
    pub fn from_ints(height: usize, width: usize, values: &[i64]) -> Result<Self> {
        Filter2D::new(height, width, values.iter().map(|&v| Rational::from_integer(v)).collect())
    }

    pub fn to_f64(&self) -> Filter2D<f64> {
        self.map(|v| *v.numer() as f64 / *v.denom() as f64)
    }
}

/// Full 2-D discrete convolution, `(ha+hb-1) x (wa+wb-1)`.
pub fn convolve_filters<T>(a: &Filter2D<T>, b: &Filter2D<T>) -> Filter2D<T>
where
    T: Copy + Zero + Add<Output = T> + Mul<Output = T>,
{
    let height = a.height + b.height - 1;
    let width = a.width + b.width - 1;
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let mut acc = T::zero();
            for p in i.saturating_sub(b.height - 1)..=i.min(a.height - 1) {
                for q in j.saturating_sub(b.width - 1)..=j.min(a.width - 1) {
                    acc = acc + a.get(p, q) * b.get(i - p, j - q);
                }
            }
            values.push(acc);
        }
    }
    Filter2D { height, width, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scatter-form oracle: add a shifted, scaled copy of `b` for every entry of `a`.
    fn convolve_scatter(a: &Filter2D<Rational>, b: &Filter2D<Rational>) -> Vec<Rational> {
        let (h, w) = (a.height() + b.height() - 1, a.width() + b.width() - 1);
        let mut out = vec![Rational::zero(); h * w];
        for p in 0..a.height() {
            for q in 0..a.width() {
                for r in 0..b.height() {
                    for s in 0..b.width() {
                        out[(p + r) * w + q + s] += a.get(p, q) * b.get(r, s);
                    }
                }
            }
        }
        out
    }

    fn random_int_filter(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Filter2D<Rational> {
        let vals: Vec<i64> = (0..h * w).map(|_| rng.gen_range(-9..=9)).collect();
        Filter2D::from_ints(h, w, &vals).unwrap()
    }

    #[test]
    fn row_times_column_is_outer_product() {
        let row = Filter2D::from_ints(1, 3, &[1, -2, 1]).unwrap();
        let col = row.transpose();
        let out = convolve_filters(&row, &col);
        assert_eq!(out, Filter2D::from_ints(3, 3, &[1, -2, 1, -2, 4, -2, 1, -2, 1]).unwrap());
    }

    #[test]
    fn impulse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_int_filter(&mut rng, 3, 5);
        let delta = Filter2D::from_ints(1, 1, &[1]).unwrap();
        assert_eq!(convolve_filters(&f, &delta), f);
        assert_eq!(convolve_filters(&delta, &f), f);
    }

    #[test]
    fn gather_matches_scatter_commutes_and_associates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let f = random_int_filter(&mut rng, 3, 3);
            let g = random_int_filter(&mut rng, 3, 3);
            let h = random_int_filter(&mut rng, 3, 3);
            let fg = convolve_filters(&f, &g);
            assert_eq!(fg.values(), &convolve_scatter(&f, &g)[..]);
            assert_eq!(fg, convolve_filters(&g, &f));
            assert_eq!(convolve_filters(&fg, &h), convolve_filters(&f, &convolve_filters(&g, &h)));
        }
    }

    #[test]
    fn even_dims_rejected() {
        assert!(Filter2D::from_ints(2, 3, &[0; 6]).is_err());
        assert!(Filter2D::from_ints(3, 3, &[0; 8]).is_err());
    }

    #[test]
    fn rotation_and_flip() {
        let f = Filter2D::from_ints(1, 3, &[1, 2, 3]).unwrap();
        assert_eq!(f.rotate90(), Filter2D::from_ints(3, 1, &[1, 2, 3]).unwrap());
        assert_eq!(f.flip_horizontal().values(), Filter2D::from_ints(1, 3, &[3, 2, 1]).unwrap().values());
        let g = Filter2D::from_ints(3, 3, &[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(g.rotate90().values(), Filter2D::from_ints(3, 3, &[7, 4, 1, 8, 5, 2, 9, 6, 3]).unwrap().values());
        assert_eq!(g.rotate90().rotate90().rotate90().rotate90(), g);
    }
}
