//! Dense NCHW tensors, dense convolution and MAC accounting.
//!
//! [`conv2d_reference`] is the oracle every other executor is checked
//! against. It accumulates in `f64` in a fixed order (channel, then kernel
//! row, then kernel column) so comparisons are reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::{err, Result};

/// Row-major `(n, c, h, w)` tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(n, c, h, w)?;
        if data.len() != n * c * h * w {
            return Err(err!(Shape, "tensor {n}x{c}x{h}x{w} needs {} values, got {}", n * c * h * w, data.len()));
        }
        let t = Tensor4D { n, c, h, w, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        check_dims(n, c, h, w)?;
        Ok(Tensor4D { n, c, h, w, data: vec![0.0; n * c * h * w] })
    }

    /// Internal constructor for executor outputs whose shape is known good.
    pub(crate) fn from_parts(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), n * c * h * w);
        Tensor4D { n, c, h, w, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access. Callers writing non-finite values will get data
    /// errors from the convolution entry points.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let size = self.h * self.w;
        let start = (n * self.c + c) * size;
        &self.data[start..start + size]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(err!(Data, "non-finite value {} at flat index {i}", self.data[i])),
        }
    }

    /// Returns a tensor whose channel `i` is channel `order[i]` of `self`.
    pub fn gather_channels(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.c {
            return Err(err!(Shape, "channel order has {} entries for {} channels", order.len(), self.c));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for n in 0..self.n {
            for &src in order {
                if src >= self.c {
                    return Err(err!(Shape, "channel {src} out of range"));
                }
                data.extend_from_slice(self.plane(n, src));
            }
        }
        Ok(Tensor4D::from_parts(self.n, self.c, self.h, self.w, data))
    }
}

fn check_dims(n: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(err!(Shape, "tensor dims must be positive, got {n}x{c}x{h}x{w}"));
    }
    Ok(())
}

/// Stride, symmetric zero padding and kernel extent of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(err!(Config, "stride and kernel dims must be positive"));
        }
        Ok(ConvSpec { stride, padding, kernel_h, kernel_w })
    }

    /// 3x3, stride 1, padding 1.
    pub fn same3x3() -> Self {
        ConvSpec { stride: 1, padding: 1, kernel_h: 3, kernel_w: 3 }
    }

    /// Output spatial size for an `h`x`w` input (floor division by stride).
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return Err(err!(
                Shape,
                "{}x{} kernel does not fit a {h}x{w} input with padding {}",
                self.kernel_h,
                self.kernel_w,
                self.padding
            ));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

/// Dense convolution weights, `F x C x kh x kw`, plus one bias per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseConvLayer {
    filters: usize,
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl DenseConvLayer {
    pub fn new(
        filters: usize,
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if filters == 0 || channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(err!(Shape, "conv layer dims must be positive"));
        }
        let expected = filters * channels * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(err!(Shape, "expected {expected} weights, got {}", weights.len()));
        }
        if bias.len() != filters {
            return Err(err!(Shape, "expected {filters} biases, got {}", bias.len()));
        }
        if let Some(i) = weights.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(err!(Data, "non-finite parameter at flat index {i}"));
        }
        Ok(DenseConvLayer { filters, channels, kernel_h, kernel_w, weights, bias })
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn kernel(&self, f: usize, c: usize) -> &[f32] {
        let k = self.kernel_size();
        let start = (f * self.channels + c) * k;
        &self.weights[start..start + k]
    }

    /// Weights of filter `f` across all channels.
    pub fn filter(&self, f: usize) -> &[f32] {
        let len = self.channels * self.kernel_size();
        &self.weights[f * len..(f + 1) * len]
    }

    /// Reindexes the channel axis: new channel `perm[c]` holds old channel `c`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.channels)?;
        let k = self.kernel_size();
        let mut weights = vec![0.0; self.weights.len()];
        for f in 0..self.filters {
            for (c, &to) in perm.iter().enumerate() {
                let dst = (f * self.channels + to) * k;
                weights[dst..dst + k].copy_from_slice(self.kernel(f, c));
            }
        }
        Ok(DenseConvLayer { weights, ..self.clone() })
    }
}

pub(crate) fn check_permutation(perm: &[usize], len: usize) -> Result<()> {
    if perm.len() != len {
        return Err(err!(Shape, "permutation has {} entries, expected {len}", perm.len()));
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || seen[p] {
            return Err(err!(Shape, "not a permutation of 0..{len}"));
        }
        seen[p] = true;
    }
    Ok(())
}

fn check_conv_shapes(input: &Tensor4D, layer: &DenseConvLayer, spec: &ConvSpec) -> Result<(usize, usize)> {
    if input.c != layer.channels {
        return Err(err!(Shape, "input has {} channels, layer expects {}", input.c, layer.channels));
    }
    if (spec.kernel_h, spec.kernel_w) != layer.kernel_dims() {
        return Err(err!(
            Shape,
            "spec kernel {}x{} differs from layer kernel {}x{}",
            spec.kernel_h,
            spec.kernel_w,
            layer.kernel_h,
            layer.kernel_w
        ));
    }
    input.check_finite()?;
    spec.output_dims(input.h, input.w)
}

/// Direct convolution, the canonical oracle.
pub fn conv2d_reference(input: &Tensor4D, layer: &DenseConvLayer, spec: &ConvSpec) -> Result<Tensor4D> {
    let (ho, wo) = check_conv_shapes(input, layer, spec)?;
    let (kh, kw) = layer.kernel_dims();
    let pad = spec.padding as isize;
    let mut out = Vec::with_capacity(input.n * layer.filters * ho * wo);
    for n in 0..input.n {
        for f in 0..layer.filters {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for c in 0..layer.channels {
                        let kernel = layer.kernel(f, c);
                        let plane = input.plane(n, c);
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                let x = plane[iy as usize * input.w + ix as usize];
                                acc += f64::from(x) * f64::from(kernel[ky * kw + kx]);
                            }
                        }
                    }
                    out.push((acc + f64::from(layer.bias[f])) as f32);
                }
            }
        }
    }
    Ok(Tensor4D::from_parts(input.n, layer.filters, ho, wo, out))
}

/// Column block width for the im2col GEMM; keeps four accumulator rows in L1.
const GEMM_COLS: usize = 256;

/// im2col + blocked GEMM, single threaded. The dense throughput baseline.
pub fn conv2d_im2col(input: &Tensor4D, layer: &DenseConvLayer, spec: &ConvSpec) -> Result<Tensor4D> {
    conv2d_im2col_threaded(input, layer, spec, 1)
}

/// [`conv2d_im2col`] with the GEMM split over `threads` contiguous filter
/// blocks sharing one column buffer. Without the `std` feature the blocks
/// run in sequence.
pub fn conv2d_im2col_threaded(
    input: &Tensor4D,
    layer: &DenseConvLayer,
    spec: &ConvSpec,
    threads: usize,
) -> Result<Tensor4D> {
    if threads == 0 {
        return Err(err!(Config, "thread count must be positive"));
    }
    let (ho, wo) = check_conv_shapes(input, layer, spec)?;
    let cols = ho * wo;
    let rows = layer.channels * layer.kernel_size();
    let mut col = vec![0.0f32; rows * cols];
    let mut out = vec![0.0f32; input.n * layer.filters * cols];
    // Blocks are multiples of four filters so every block keeps the 4-row kernel.
    let block = layer.filters.div_ceil(threads).next_multiple_of(4);
    for n in 0..input.n {
        im2col(input, n, layer.kernel_dims(), spec, ho, wo, &mut col);
        let out_n = &mut out[n * layer.filters * cols..(n + 1) * layer.filters * cols];
        let col = &col;
        let jobs = out_n.chunks_mut(block * cols).enumerate().map(move |(i, o)| {
            let f = i * block..(i * block + o.len() / cols);
            move || gemm_bias(&layer.weights()[f.start * rows..f.end * rows], &layer.bias()[f], col, rows, cols, o)
        });
        #[cfg(feature = "std")]
        if threads > 1 {
            std::thread::scope(|s| {
                for job in jobs {
                    s.spawn(job);
                }
            });
            continue;
        }
        jobs.for_each(|job| job());
    }
    Ok(Tensor4D::from_parts(input.n, layer.filters, ho, wo, out))
}

fn im2col(
    input: &Tensor4D,
    n: usize,
    (kh, kw): (usize, usize),
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    let pad = spec.padding as isize;
    let cols = ho * wo;
    for c in 0..input.c {
        let plane = input.plane(n, c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * cols..][..cols];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - pad;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= input.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * input.w..][..input.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= input.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// `out[f, :] = bias[f] + weights[f, :] · col`, register-blocked four filters at a time.
fn gemm_bias(weights: &[f32], bias: &[f32], col: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    let filters = bias.len();
    let mut acc = [[0.0f32; GEMM_COLS]; 4];
    let mut c0 = 0;
    while c0 < cols {
        let width = GEMM_COLS.min(cols - c0);
        let mut f0 = 0;
        while f0 < filters {
            let nf = 4.min(filters - f0);
            for (i, a) in acc.iter_mut().enumerate().take(nf) {
                a[..width].fill(bias[f0 + i]);
            }
            for r in 0..rows {
                let src = &col[r * cols + c0..][..width];
                if nf == 4 {
                    let w0 = weights[f0 * rows + r];
                    let w1 = weights[(f0 + 1) * rows + r];
                    let w2 = weights[(f0 + 2) * rows + r];
                    let w3 = weights[(f0 + 3) * rows + r];
                    let [a0, a1, a2, a3] = &mut acc;
                    for ((((x, y0), y1), y2), y3) in src
                        .iter()
                        .zip(&mut a0[..width])
                        .zip(&mut a1[..width])
                        .zip(&mut a2[..width])
                        .zip(&mut a3[..width])
                    {
                        *y0 += w0 * x;
                        *y1 += w1 * x;
                        *y2 += w2 * x;
                        *y3 += w3 * x;
                    }
                } else {
                    for (i, a) in acc.iter_mut().enumerate().take(nf) {
                        let w = weights[(f0 + i) * rows + r];
                        for (y, x) in a[..width].iter_mut().zip(src) {
                            *y += w * x;
                        }
                    }
                }
            }
            for (i, a) in acc.iter().enumerate().take(nf) {
                out[(f0 + i) * cols + c0..][..width].copy_from_slice(&a[..width]);
            }
            f0 += nf;
        }
        c0 += width;
    }
}

/// Multiply-accumulate count of one convolution over a batch.
pub trait MacCount {
    /// MACs per output pixel, summed over filters and their retained kernels.
    fn macs_per_position(&self) -> u64;

    fn kernel_dims(&self) -> (usize, usize);

    fn mac_count(&self, spec: &ConvSpec, n: usize, h: usize, w: usize) -> Result<u64> {
        if (spec.kernel_h, spec.kernel_w) != MacCount::kernel_dims(self) {
            return Err(err!(Shape, "spec kernel does not match layer kernel"));
        }
        let (ho, wo) = spec.output_dims(h, w)?;
        Ok(n as u64 * ho as u64 * wo as u64 * self.macs_per_position())
    }
}

impl MacCount for DenseConvLayer {
    fn macs_per_position(&self) -> u64 {
        (self.filters * self.channels * self.kernel_size()) as u64
    }

    fn kernel_dims(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }
}

pub fn relu(t: &Tensor4D) -> Tensor4D {
    let data = t.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor4D::from_parts(t.n, t.c, t.h, t.w, data)
}

/// Max pooling without padding.
pub fn max_pool(t: &Tensor4D, size: usize, stride: usize) -> Result<Tensor4D> {
    if size == 0 || stride == 0 || t.h < size || t.w < size {
        return Err(err!(Shape, "pool {size}/{stride} does not fit {}x{}", t.h, t.w));
    }
    let ho = (t.h - size) / stride + 1;
    let wo = (t.w - size) / stride + 1;
    let mut out = Vec::with_capacity(t.n * t.c * ho * wo);
    for n in 0..t.n {
        for c in 0..t.c {
            let plane = t.plane(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..size {
                        for dx in 0..size {
                            m = m.max(plane[(oy * stride + dy) * t.w + ox * stride + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Ok(Tensor4D::from_parts(t.n, t.c, ho, wo, out))
}

/// Fully connected layer over the flattened `(c, h, w)` features; output is `n x outputs x 1 x 1`.
pub fn dense_forward(t: &Tensor4D, weights: &[f32], bias: &[f32]) -> Result<Tensor4D> {
    let inputs = t.c * t.h * t.w;
    let outputs = bias.len();
    if weights.len() != inputs * outputs || outputs == 0 {
        return Err(err!(Shape, "dense layer {outputs}x? does not accept {inputs} features"));
    }
    let mut out = Vec::with_capacity(t.n * outputs);
    for n in 0..t.n {
        let x = &t.data[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let row = &weights[o * inputs..(o + 1) * inputs];
            let acc: f64 = row.iter().zip(x).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            out.push((acc + f64::from(bias[o])) as f32);
        }
    }
    Ok(Tensor4D::from_parts(t.n, outputs, 1, 1, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::max_rel_diff;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input_1_to_9() -> Tensor4D {
        Tensor4D::new(1, 1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap()
    }

    fn single_kernel(values: [f32; 9]) -> DenseConvLayer {
        DenseConvLayer::new(1, 1, 3, 3, values.to_vec(), vec![0.0]).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4D {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4D::new(n, c, h, w, data).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, f: usize, c: usize, kh: usize, kw: usize) -> DenseConvLayer {
        let w = (0..f * c * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..f).map(|_| rng.gen_range(-0.5..0.5)).collect();
        DenseConvLayer::new(f, c, kh, kw, w, b).unwrap()
    }

    #[test]
    fn all_ones_kernel_sums_input() {
        let out =
            conv2d_reference(&input_1_to_9(), &single_kernel([1.0; 9]), &ConvSpec::new(1, 0, 3, 3).unwrap()).unwrap();
        assert_eq!(out.dims(), [1, 1, 1, 1]);
        assert_eq!(out.data(), &[45.0]);
    }

    #[test]
    fn identity_kernel_with_padding_is_identity() {
        let mut k = [0.0; 9];
        k[4] = 1.0;
        let input = input_1_to_9();
        let out = conv2d_reference(&input, &single_kernel(k), &ConvSpec::same3x3()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn elog_kernel_on_1_to_9() {
        let k = [0.0, 1.0, 0.0, 1.0, 8.0, 1.0, 0.0, 1.0, 0.0];
        let out = conv2d_reference(&input_1_to_9(), &single_kernel(k), &ConvSpec::new(1, 0, 3, 3).unwrap()).unwrap();
        // 2 + 4 + 8*5 + 6 + 8
        assert_eq!(out.data(), &[60.0]);
        let fast = conv2d_im2col(&input_1_to_9(), &single_kernel(k), &ConvSpec::new(1, 0, 3, 3).unwrap()).unwrap();
        assert_eq!(fast.data(), &[60.0]);
    }

    #[test]
    fn shape_and_data_errors() {
        let input = input_1_to_9();
        let layer = DenseConvLayer::new(1, 2, 3, 3, vec![0.0; 18], vec![0.0]).unwrap();
        assert!(matches!(conv2d_reference(&input, &layer, &ConvSpec::same3x3()), Err(Error::Shape(_))));
        assert!(matches!(
            conv2d_reference(&input, &single_kernel([0.0; 9]), &ConvSpec::new(1, 0, 5, 5).unwrap()),
            Err(Error::Shape(_))
        ));
        let mut bad = input_1_to_9();
        bad.data_mut()[3] = f32::NAN;
        assert!(matches!(conv2d_reference(&bad, &single_kernel([0.0; 9]), &ConvSpec::same3x3()), Err(Error::Data(_))));
        assert!(matches!(Tensor4D::new(1, 1, 1, 1, vec![f32::INFINITY]), Err(Error::Data(_))));
        assert!(Tensor4D::new(1, 1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor4D::zeros(0, 1, 1, 1).is_err());
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = random_layer(&mut rng, 5, 3, 3, 3);
        let input = Tensor4D::zeros(2, 3, 6, 7).unwrap();
        let out = conv2d_im2col(&input, &layer, &ConvSpec::same3x3()).unwrap();
        for n in 0..2 {
            for f in 0..5 {
                assert!(out.plane(n, f).iter().all(|&v| v == layer.bias()[f]));
            }
        }
    }

    #[test]
    fn im2col_matches_reference_on_vgg_sized_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor(&mut rng, 1, 64, 56, 56);
        let layer = random_layer(&mut rng, 64, 64, 3, 3);
        let spec = ConvSpec::same3x3();
        let a = conv2d_im2col(&input, &layer, &spec).unwrap();
        let b = conv2d_reference(&input, &layer, &spec).unwrap();
        assert!(max_rel_diff(a.data(), b.data()) < 1e-5);
    }

    #[test]
    fn threaded_im2col_is_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = random_tensor(&mut rng, 2, 5, 9, 7);
        let layer = random_layer(&mut rng, 11, 5, 3, 3);
        let spec = ConvSpec::new(2, 1, 3, 3).unwrap();
        let one = conv2d_im2col(&input, &layer, &spec).unwrap();
        for threads in 2..=6 {
            assert_eq!(conv2d_im2col_threaded(&input, &layer, &spec, threads).unwrap(), one);
        }
        assert!(conv2d_im2col_threaded(&input, &layer, &spec, 0).is_err());
    }

    #[test]
    fn shift_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer =
            DenseConvLayer::new(2, 2, 3, 3, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![0.0; 2]).unwrap();
        let base = random_tensor(&mut rng, 1, 2, 12, 12);
        let (dy, dx) = (2usize, 3usize);
        let mut shifted = Tensor4D::zeros(1, 2, 12, 12).unwrap();
        for c in 0..2 {
            for y in 0..12 - dy {
                for x in 0..12 - dx {
                    shifted.data_mut()[(c * 12 + y + dy) * 12 + x + dx] = base.get(0, c, y, x);
                }
            }
        }
        let spec = ConvSpec::new(1, 0, 3, 3).unwrap();
        let a = conv2d_reference(&base, &layer, &spec).unwrap();
        let b = conv2d_reference(&shifted, &layer, &spec).unwrap();
        for f in 0..2 {
            for y in 0..10 - dy {
                for x in 0..10 - dx {
                    assert_eq!(a.get(0, f, y, x), b.get(0, f, y + dy, x + dx));
                }
            }
        }
    }

    #[test]
    fn mac_count_vgg_layer() {
        let layer = DenseConvLayer::new(64, 64, 3, 3, vec![0.0; 64 * 64 * 9], vec![0.0; 64]).unwrap();
        assert_eq!(layer.mac_count(&ConvSpec::same3x3(), 1, 56, 56).unwrap(), 115_605_504);
    }

    #[test]
    fn output_dims_floor_and_errors() {
        let s = ConvSpec::new(2, 1, 3, 3).unwrap();
        assert_eq!(s.output_dims(56, 56).unwrap(), (28, 28));
        assert!(ConvSpec::new(1, 0, 5, 5).unwrap().output_dims(3, 3).is_err());
        assert!(ConvSpec::new(0, 0, 3, 3).is_err());
    }

    #[test]
    fn pool_relu_dense() {
        let t = Tensor4D::new(1, 1, 2, 2, vec![-1.0, 2.0, 3.0, -4.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 2.0, 3.0, 0.0]);
        assert_eq!(max_pool(&t, 2, 2).unwrap().data(), &[3.0]);
        let d = dense_forward(&t, &[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0], &[0.5, 0.0]).unwrap();
        assert_eq!(d.dims(), [1, 2, 1, 1]);
        assert_eq!(d.data(), &[0.5, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn im2col_equals_reference(
                seed in any::<u64>(),
                n in 1usize..3, c in 1usize..5, f in 1usize..6,
                h in 3usize..12, w in 3usize..12,
                k in prop::sample::select(vec![1usize, 3, 5]),
                stride in 1usize..3, pad in 0usize..3,
            ) {
                let spec = ConvSpec::new(stride, pad, k, k).unwrap();
                prop_assume!(spec.output_dims(h, w).is_ok());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let input = random_tensor(&mut rng, n, c, h, w);
                let layer = random_layer(&mut rng, f, c, k, k);
                let a = conv2d_im2col(&input, &layer, &spec).unwrap();
                let b = conv2d_reference(&input, &layer, &spec).unwrap();
                prop_assert_eq!(a.dims(), b.dims());
                prop_assert!(max_rel_diff(a.data(), b.data()) < 1e-5);
            }

            #[test]
            fn linearity(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut layer = random_layer(&mut rng, 3, 2, 3, 3);
                layer.bias.fill(0.0);
                let x = random_tensor(&mut rng, 1, 2, 8, 8);
                let y = random_tensor(&mut rng, 1, 2, 8, 8);
                let mix: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
                let mix = Tensor4D::new(1, 2, 8, 8, mix).unwrap();
                let spec = ConvSpec::same3x3();
                let lhs = conv2d_reference(&mix, &layer, &spec).unwrap();
                let cx = conv2d_reference(&x, &layer, &spec).unwrap();
                let cy = conv2d_reference(&y, &layer, &spec).unwrap();
                let rhs: Vec<f32> = cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect();
                prop_assert!(max_rel_diff(lhs.data(), &rhs) < 1e-5);
            }
        }
    }
}
