//! Sparse convolution patterns and the filter chain they are derived from.
//!
//! Gaussian -> Laplacian of Gaussian -> three-point and five-point integer
//! approximations -> the enhanced 3x3 filter (ELoG) -> four masks that each
//! keep the centre and three of the four cross arms. Averaging the four
//! masked copies of ELoG keeps the centre and scales every arm by 3/4.
//!
//! Mask bits are encoded row-major in 9 bits, bit 0 = top-left.

use alloc::vec::Vec;

use num_traits::Zero;

use crate::filter::{convolve_filters, Filter2D, Rational};
use crate::{err, Result};

/// Sampled Gaussian on the centred integer grid, normalized to unit sum.
pub fn gaussian_filter(size: usize, sigma: f64) -> Result<Filter2D<f64>> {
    check_size_sigma(size, sigma)?;
    let raw = sample(size, |x, y| gaussian(x, y, sigma));
    let total: f64 = raw.iter().sum();
    Filter2D::new(size, size, raw.into_iter().map(|v| v / total).collect())
}

/// Sampled Laplacian of Gaussian, not normalized.
pub fn log_filter(size: usize, sigma: f64) -> Result<Filter2D<f64>> {
    check_size_sigma(size, sigma)?;
    let s2 = sigma * sigma;
    Filter2D::new(size, size, sample(size, |x, y| ((x * x + y * y) / (s2 * s2) - 2.0 / s2) * gaussian(x, y, sigma)))
}

fn gaussian(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    libm::exp(-(x * x + y * y) / (2.0 * s2)) / (2.0 * core::f64::consts::PI * s2)
}

fn sample(size: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(f(c as f64 - half, r as f64 - half));
        }
    }
    out
}

fn check_size_sigma(size: usize, sigma: f64) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(err!(Domain, "filter size must be odd and positive, got {size}"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(err!(Domain, "sigma must be positive and finite, got {sigma}"));
    }
    Ok(())
}

/// Central second difference, `[1, -2, 1]`.
pub fn log_1d_approx() -> Filter2D<Rational> {
    Filter2D::from_ints(1, 3, &[1, -2, 1]).expect("static filter")
}

/// The two integer 3x3 LoG approximations: the outer (all-neighbour) form
/// and the cross (five-point) form, verbatim.
pub fn log_2d_approximations() -> (Filter2D<Rational>, Filter2D<Rational>) {
    let outer = Filter2D::from_ints(3, 3, &[-1, 2, -1, 2, -4, 2, -1, 2, -1]).expect("static filter");
    let cross = Filter2D::from_ints(3, 3, &[0, 1, 0, 1, -4, 1, 0, 1, 0]).expect("static filter");
    (outer, cross)
}

/// Enhanced LoG: `[[0,1,0],[1,8,1],[0,1,0]]`.
///
/// Returned verbatim rather than recomputed. The 5x5 convolution it is
/// derived from is available from [`elog_raw_derivation`]; the step that
/// reduces it to 3x3 is not reproduced.
pub fn elog_filter() -> Filter2D<Rational> {
    Filter2D::from_ints(3, 3, &[0, 1, 0, 1, 8, 1, 0, 1, 0]).expect("static filter")
}

/// Exact 5x5 convolution of the two 3x3 approximations.
pub fn elog_raw_derivation() -> Filter2D<Rational> {
    let (outer, cross) = log_2d_approximations();
    convolve_filters(&outer, &cross)
}

/// ELoG scaled to unit sum.
pub fn elog_normalized() -> Filter2D<Rational> {
    let elog = elog_filter();
    let total = elog.sum();
    elog.map(|v| v / total)
}

/// A 3x3 binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatternMask {
    id: u8,
    encoded: u16,
}

impl PatternMask {
    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn encoded(&self) -> u16 {
        self.encoded
    }

    pub fn popcount(&self) -> usize {
        self.encoded.count_ones() as usize
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r < 3 && c < 3 && self.encoded >> (r * 3 + c) & 1 == 1
    }

    pub fn bits(&self) -> [[bool; 3]; 3] {
        let mut out = [[false; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, b) in row.iter_mut().enumerate() {
                *b = self.contains(r, c);
            }
        }
        out
    }

    /// Flat row-major indices (0..9) of the set positions, increasing.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..9).filter(move |i| self.encoded >> i & 1 == 1)
    }

    pub fn apply<T: Copy + Zero>(&self, filter: &Filter2D<T>) -> Result<Filter2D<T>> {
        if filter.height() != 3 || filter.width() != 3 {
            return Err(err!(Shape, "masks apply to 3x3 filters, got {}x{}", filter.height(), filter.width()));
        }
        let values = (0..9).map(|i| if self.encoded >> i & 1 == 1 { filter.values()[i] } else { T::zero() }).collect();
        Filter2D::new(3, 3, values)
    }
}

/// An ordered library of distinct masks with a common nonzero count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    masks: Vec<PatternMask>,
    nonzeros: usize,
}

/// Sentinel pattern id meaning "kernel removed"; caps sets at 255 masks.
pub const MAX_PATTERNS: usize = 255;

impl PatternSet {
    pub fn new(encoded: &[u16]) -> Result<Self> {
        let first = *encoded.first().ok_or_else(|| err!(Validation, "pattern set is empty"))?;
        if encoded.len() > MAX_PATTERNS {
            return Err(err!(Validation, "at most {MAX_PATTERNS} patterns, got {}", encoded.len()));
        }
        let nonzeros = first.count_ones() as usize;
        let mut masks = Vec::with_capacity(encoded.len());
        for (i, &e) in encoded.iter().enumerate() {
            if e == 0 || e >= 1 << 9 {
                return Err(err!(Validation, "mask {i} encoding {e} is not a nonzero 9-bit value"));
            }
            if e.count_ones() as usize != nonzeros {
                return Err(err!(Validation, "mask {i} has {} nonzeros, expected {nonzeros}", e.count_ones()));
            }
            if encoded[..i].contains(&e) {
                return Err(err!(Validation, "mask {i} duplicates encoding {e}"));
            }
            masks.push(PatternMask { id: i as u8, encoded: e });
        }
        Ok(PatternSet { masks, nonzeros })
    }

    pub fn masks(&self) -> &[PatternMask] {
        &self.masks
    }

    pub fn get(&self, id: u8) -> Option<&PatternMask> {
        self.masks.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Nonzeros per mask.
    pub fn nonzeros(&self) -> usize {
        self.nonzeros
    }

    pub fn encodings(&self) -> Vec<u16> {
        self.masks.iter().map(|m| m.encoded).collect()
    }
}

// Flat positions of the cross arms.
const TOP: u16 = 1 << 1;
const LEFT: u16 = 1 << 3;
const CENTER: u16 = 1 << 4;
const RIGHT: u16 = 1 << 5;
const BOTTOM: u16 = 1 << 7;
const CROSS: u16 = TOP | LEFT | CENTER | RIGHT | BOTTOM;

/// The four canonical patterns, ids ordered by the absent arm: top, left, right, bottom.
pub fn canonical_scp_set() -> PatternSet {
    PatternSet::new(&canonical_encodings()).expect("canonical masks are valid")
}

fn canonical_encodings() -> [u16; 4] {
    [CROSS & !TOP, CROSS & !LEFT, CROSS & !RIGHT, CROSS & !BOTTOM]
}

/// `count` four-nonzero patterns: the canonical four, then the remaining
/// four-nonzero masks by descending retained ELoG mass, ties by smaller encoding.
pub fn extended_scp_set(count: usize) -> Result<PatternSet> {
    let canonical = canonical_encodings();
    let mut rest: Vec<u16> = (1u16..1 << 9).filter(|e| e.count_ones() == 4 && !canonical.contains(e)).collect();
    if count < 4 || count > canonical.len() + rest.len() {
        return Err(err!(Config, "pattern count must be between 4 and {}, got {count}", canonical.len() + rest.len()));
    }
    let elog = elog_filter();
    let mass = |e: u16| -> Rational {
        (0..9).filter(|i| e >> i & 1 == 1).map(|i| elog.values()[i]).fold(Rational::zero(), |a, b| a + b)
    };
    rest.sort_by(|&a, &b| mass(b).cmp(&mass(a)).then(a.cmp(&b)));
    let mut all = canonical.to_vec();
    all.extend_from_slice(&rest[..count - 4]);
    PatternSet::new(&all)
}

/// Uniform average of `mask ⊙ base` over the set, in exact arithmetic.
pub fn mixture_expectation(set: &PatternSet, base: &Filter2D<Rational>) -> Result<Filter2D<Rational>> {
    if set.is_empty() {
        return Err(err!(Validation, "pattern set is empty"));
    }
    let mut acc = alloc::vec![Rational::zero(); 9];
    for mask in set.masks() {
        let masked = mask.apply(base)?;
        for (a, &v) in acc.iter_mut().zip(masked.values()) {
            *a += v;
        }
    }
    let n = Rational::from_integer(set.len() as i64);
    Filter2D::new(3, 3, acc.into_iter().map(|v| v / n).collect())
}

/// How many 3x3 pattern layers the interpolation argument supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthBounds {
    pub desired: u32,
    pub maximum: u32,
}

impl DepthBounds {
    /// Whether a network with `layers` 3x3 convolutions stays within the maximum.
    pub fn covers(&self, layers: u32) -> bool {
        layers <= self.maximum
    }
}

/// Desired 24 (four patterns times the optimal six LoG applications) and
/// maximum 55.
pub fn interpolation_depth_bounds() -> DepthBounds {
    DepthBounds { desired: 24, maximum: 55 }
}
