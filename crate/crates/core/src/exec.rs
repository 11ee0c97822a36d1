//! Executors: compiled pattern plans, the CSR baseline and whole networks.
//!
//! Inputs are copied once into a zero halo so no access template ever
//! tests a boundary. Workers own disjoint ranges of output filters; each
//! output value is accumulated in the filter's schedule order regardless of
//! how many workers run, so results do not depend on the thread count.

use alloc::vec;
use alloc::vec::Vec;

use crate::compiler::{ExecutionPlan, NetworkPlan, WorkChunk};
use crate::model::{check_input, ConvWeights, Layer, ModelGraph, PrunedConvLayer};
use crate::tensor::{conv2d_im2col, dense_forward, max_pool, relu, ConvSpec, DenseConvLayer, MacCount, Tensor4D};
use crate::{err, Result};

/// Output columns computed together by the vectorised row kernels.
const BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Accumulate in `f64`, for tolerance-tightened comparisons.
    pub accumulate_f64: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// Multiply-adds performed by each worker.
    pub worker_macs: Vec<u64>,
}

impl ExecStats {
    pub fn total_macs(&self) -> u64 {
        self.worker_macs.iter().sum()
    }
}

/// Copies every plane into a buffer with `pad` zeros on each side.
fn pad_input(input: &Tensor4D, pad: usize) -> Vec<f32> {
    let [n, c, h, w] = input.dims();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; n * c * ph * pw];
    for (i, plane) in input.data().chunks_exact(h * w).enumerate() {
        let dst = &mut out[i * ph * pw..(i + 1) * ph * pw];
        for (y, row) in plane.chunks_exact(w).enumerate() {
            dst[(y + pad) * pw + pad..][..w].copy_from_slice(row);
        }
    }
    out
}

/// A plan flattened against one layer: kernels in schedule order with
/// their plane offsets and weights side by side.
struct Lowered<'a> {
    nz: usize,
    /// Range of `runs` for each filter in compiled order.
    filter_runs: Vec<(usize, usize)>,
    /// `(template index, first kernel, end kernel)`.
    runs: Vec<(usize, usize, usize)>,
    /// Offset of each kernel's input plane within one image.
    bases: Vec<usize>,
    /// `nz` weights per kernel.
    weights: Vec<f32>,
    offsets: Vec<&'a [usize]>,
    bias: Vec<f32>,
}

fn lower<'a>(plan: &'a ExecutionPlan, layer: &PrunedConvLayer) -> Lowered<'a> {
    let plane = plan.padded_h * plan.row_stride;
    let nz = layer.nonzeros();
    let kernels = layer.retained_kernels();
    let mut low = Lowered {
        nz,
        filter_runs: Vec::with_capacity(plan.filters),
        runs: Vec::new(),
        bases: Vec::with_capacity(kernels),
        weights: Vec::with_capacity(kernels * nz),
        offsets: plan.templates.iter().map(|t| t.offsets.as_slice()).collect(),
        bias: Vec::with_capacity(plan.filters),
    };
    for s in &plan.schedules {
        let first = low.runs.len();
        for run in &s.runs {
            let k0 = low.bases.len();
            for &c in &run.channels {
                low.bases.push(c as usize * plane);
                // check_against guarantees the kernel is retained.
                low.weights.extend_from_slice(layer.kernel_weights(s.filter, c as usize).unwrap_or(&[]));
            }
            low.runs.push((run.pattern as usize, k0, low.bases.len()));
        }
        low.filter_runs.push((first, low.runs.len()));
        low.bias.push(layer.bias()[s.filter]);
    }
    low
}

/// Runs a compiled plan. The output's channels are in compiled order
/// (channel `j` is filter `plan.filter_order()[j]`); see [`unpermute_output`].
pub fn execute_plan(plan: &ExecutionPlan, layer: &PrunedConvLayer, input: &Tensor4D) -> Result<Tensor4D> {
    execute_plan_with(plan, layer, input, ExecOptions::default()).map(|(t, _)| t)
}

pub fn execute_plan_with(
    plan: &ExecutionPlan,
    layer: &PrunedConvLayer,
    input: &Tensor4D,
    options: ExecOptions,
) -> Result<(Tensor4D, ExecStats)> {
    plan.check_against(layer)?;
    let [n, c, h, w] = input.dims();
    if c != plan.channels || (h, w) != (plan.input_h, plan.input_w) {
        return Err(err!(
            Shape,
            "input {c}x{h}x{w} does not match plan input {}x{}x{}",
            plan.channels,
            plan.input_h,
            plan.input_w
        ));
    }
    input.check_finite()?;
    let padded = pad_input(input, plan.spec.padding);
    let low = lower(plan, layer);
    let plane_out = plan.output_h * plan.output_w;
    let mut out = vec![0.0f32; n * plan.filters * plane_out];
    let image_in = c * plan.padded_h * plan.row_stride;

    let geom =
        Geometry { out_h: plan.output_h, out_w: plan.output_w, row_stride: plan.row_stride, stride: plan.spec.stride };
    let jobs = split_jobs(&mut out, &plan.partition.workers, n, plan.filters, plane_out);
    let worker_macs = run_workers(jobs, |(img, chunk, slice): Job<'_>| {
        let src = &padded[img * image_in..(img + 1) * image_in];
        let mut macs = 0u64;
        for (f, dst) in (chunk.start..chunk.end).zip(slice.chunks_exact_mut(plane_out)) {
            macs += filter_plane(&low, f, src, dst, &geom, options);
        }
        macs
    });
    Ok((Tensor4D::from_parts(n, plan.filters, plan.output_h, plan.output_w, out), ExecStats { worker_macs }))
}

/// Puts a compiled-order output back into the layer's logical filter order.
pub fn unpermute_output(output: &Tensor4D, plan: &ExecutionPlan) -> Result<Tensor4D> {
    output.gather_channels(&plan.permutation)
}

struct Geometry {
    out_h: usize,
    out_w: usize,
    row_stride: usize,
    stride: usize,
}

/// One output plane of filter `f` (compiled order). Returns MACs performed.
fn filter_plane(low: &Lowered<'_>, f: usize, src: &[f32], dst: &mut [f32], g: &Geometry, opt: ExecOptions) -> u64 {
    let (r0, r1) = low.filter_runs[f];
    let runs = &low.runs[r0..r1];
    let kernels: usize = runs.iter().map(|r| r.2 - r.1).sum();
    let bias = low.bias[f];
    if !opt.accumulate_f64 && low.nz == 4 && g.stride == 1 {
        plane_k4(low, runs, src, bias, g, dst);
    } else {
        for (y, row) in dst.chunks_exact_mut(g.out_w).enumerate() {
            let row_base = y * g.stride * g.row_stride;
            if opt.accumulate_f64 {
                row_generic::<f64>(low, runs, src, row_base, g.stride, bias, row);
            } else {
                row_generic::<f32>(low, runs, src, row_base, g.stride, bias, row);
            }
        }
    }
    (g.out_h * g.out_w * kernels * low.nz) as u64
}

#[inline(always)]
fn block(src: &[f32], at: usize) -> &[f32; BLOCK] {
    src[at..at + BLOCK].try_into().unwrap()
}

/// `BLOCK` consecutive stream positions starting at `x`.
#[inline(always)]
fn block_k4(low: &Lowered<'_>, runs: &[(usize, usize, usize)], src: &[f32], x: usize, bias: f32) -> [f32; BLOCK] {
    let mut acc = [bias; BLOCK];
    for &(t, k0, k1) in runs {
        let o: &[usize; 4] = low.offsets[t].try_into().unwrap();
        for (&base, w) in low.bases[k0..k1].iter().zip(low.weights[4 * k0..4 * k1].chunks_exact(4)) {
            let b = base + x;
            let (a0, a1, a2, a3) =
                (block(src, b + o[0]), block(src, b + o[1]), block(src, b + o[2]), block(src, b + o[3]));
            for i in 0..BLOCK {
                acc[i] += (w[0] * a0[i] + w[1] * a1[i]) + (w[2] * a2[i] + w[3] * a3[i]);
            }
        }
    }
    acc
}

/// Four-nonzero patterns at unit stride. The plane is walked as one stream
/// over the padded row stride: position `y * row_stride + x` reads the same
/// template offsets for every `(y, x)`, so blocks run across row ends. The
/// two halo columns per row are computed and dropped, and the last block
/// overlaps its predecessor instead of falling back to scalar code.
fn plane_k4(low: &Lowered<'_>, runs: &[(usize, usize, usize)], src: &[f32], bias: f32, g: &Geometry, dst: &mut [f32]) {
    let rs = g.row_stride;
    let len = (g.out_h - 1) * rs + g.out_w;
    if len < BLOCK {
        for (y, row) in dst.chunks_exact_mut(g.out_w).enumerate() {
            row_generic::<f32>(low, runs, src, y * rs, 1, bias, row);
        }
        return;
    }
    let mut put = |x: usize, acc: &[f32; BLOCK]| {
        let (mut y, mut col) = (x / rs, x % rs);
        let mut i = 0;
        while i < BLOCK {
            let n = (g.out_w.saturating_sub(col)).min(BLOCK - i);
            dst[y * g.out_w + col..][..n].copy_from_slice(&acc[i..i + n]);
            i += rs - col;
            col = 0;
            y += 1;
        }
    };
    let mut x = 0;
    while x + BLOCK <= len {
        put(x, &block_k4(low, runs, src, x, bias));
        x += BLOCK;
    }
    if x < len {
        let last = len - BLOCK;
        put(last, &block_k4(low, runs, src, last, bias));
    }
}

trait Accum: Copy + core::ops::AddAssign + core::ops::Add<Output = Self> + core::ops::Mul<Output = Self> {
    const ZERO: Self;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Accum for f32 {
    const ZERO: Self = 0.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Accum for f64 {
    const ZERO: Self = 0.0;
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Any nonzero count and stride; one output at a time.
fn row_generic<A: Accum>(
    low: &Lowered<'_>,
    runs: &[(usize, usize, usize)],
    src: &[f32],
    row_base: usize,
    stride: usize,
    bias: f32,
    row: &mut [f32],
) {
    let nz = low.nz;
    for (xi, d) in row.iter_mut().enumerate() {
        let mut acc = A::ZERO;
        for &(t, k0, k1) in runs {
            let o = low.offsets[t];
            for k in k0..k1 {
                let b = row_base + low.bases[k] + xi * stride;
                let w = &low.weights[nz * k..nz * (k + 1)];
                let mut s = A::ZERO;
                for (&wi, &oi) in w.iter().zip(o) {
                    s += A::from_f32(wi) * A::from_f32(src[b + oi]);
                }
                acc += s;
            }
        }
        *d = (acc + A::from_f32(bias)).to_f32();
    }
}

/// `(image, chunk, output planes of the chunk's filters for that image)`.
type Job<'a> = (usize, WorkChunk, &'a mut [f32]);

/// Cuts the output into the disjoint slices each worker writes.
fn split_jobs<'a>(
    out: &'a mut [f32],
    workers: &[Vec<WorkChunk>],
    images: usize,
    filters: usize,
    plane: usize,
) -> Vec<Vec<Job<'a>>> {
    let mut owned: Vec<(usize, usize, WorkChunk)> = Vec::new();
    for img in 0..images {
        for (w, chunks) in workers.iter().enumerate() {
            owned.extend(chunks.iter().map(|&c| (img * filters + c.start, w, c)));
        }
    }
    owned.sort_by_key(|o| o.0);
    let mut jobs: Vec<Vec<Job<'a>>> = (0..workers.len()).map(|_| Vec::new()).collect();
    let mut rest = out;
    for (start, w, c) in owned {
        let (img, len) = (start / filters, (c.end - c.start) * plane);
        let taken = core::mem::take(&mut rest);
        let (head, tail) = taken.split_at_mut(len);
        rest = tail;
        jobs[w].push((img, c, head));
    }
    jobs
}

/// Runs each worker's jobs, on its own thread when `std` is available.
/// Returns per-worker results of `work` summed over that worker's jobs.
fn run_workers<J: Send, F>(jobs: Vec<Vec<J>>, work: F) -> Vec<u64>
where
    F: Fn(J) -> u64 + Sync,
{
    #[cfg(feature = "std")]
    if jobs.len() > 1 {
        let work = &work;
        return std::thread::scope(|s| {
            let handles: Vec<_> =
                jobs.into_iter().map(|js| s.spawn(move || js.into_iter().map(work).sum::<u64>())).collect();
            handles.into_iter().map(|h| h.join().expect("executor worker panicked")).collect()
        });
    }
    jobs.into_iter().map(|js| js.into_iter().map(&work).sum()).collect()
}

/// Filter-major compressed rows over the flattened `C x kh x kw` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrSparseLayer {
    filters: usize,
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    row_ptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
    bias: Vec<f32>,
}

impl CsrSparseLayer {
    /// Keeps the nonzero weights of `dense`.
    pub fn from_dense(dense: &DenseConvLayer) -> Self {
        let (kernel_h, kernel_w) = dense.kernel_dims();
        let mut row_ptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for f in 0..dense.filters() {
            for (i, &v) in dense.filter(f).iter().enumerate() {
                if v != 0.0 {
                    indices.push(i as u32);
                    values.push(v);
                }
            }
            row_ptr.push(indices.len());
        }
        CsrSparseLayer {
            filters: dense.filters(),
            channels: dense.channels(),
            kernel_h,
            kernel_w,
            row_ptr,
            indices,
            values,
            bias: dense.bias().to_vec(),
        }
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(flattened index, value)` pairs of filter `f`, indices increasing.
    pub fn row(&self, f: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[f], self.row_ptr[f + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
}

impl MacCount for CsrSparseLayer {
    fn macs_per_position(&self) -> u64 {
        self.nnz() as u64
    }

    fn kernel_dims(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }
}

/// Irregular sparse baseline: every output value gathers its filter's
/// nonzeros through decoded index offsets. Filters are split evenly over
/// `threads` workers.
pub fn csr_execute(layer: &CsrSparseLayer, spec: &ConvSpec, input: &Tensor4D, threads: usize) -> Result<Tensor4D> {
    if threads == 0 {
        return Err(err!(Config, "thread count must be at least 1"));
    }
    let [n, c, h, w] = input.dims();
    if c != layer.channels {
        return Err(err!(Shape, "input has {c} channels, layer expects {}", layer.channels));
    }
    if (spec.kernel_h, spec.kernel_w) != (layer.kernel_h, layer.kernel_w) {
        return Err(err!(Shape, "spec kernel does not match layer kernel"));
    }
    input.check_finite()?;
    let (oh, ow) = spec.output_dims(h, w)?;
    let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
    let padded = pad_input(input, spec.padding);
    let ksize = layer.kernel_h * layer.kernel_w;
    let offsets: Vec<usize> = layer
        .indices
        .iter()
        .map(|&i| {
            let (ch, k) = (i as usize / ksize, i as usize % ksize);
            ch * ph * pw + (k / layer.kernel_w) * pw + k % layer.kernel_w
        })
        .collect();

    let plane = oh * ow;
    let mut out = vec![0.0f32; n * layer.filters * plane];
    let per = layer.filters.div_ceil(threads);
    let workers: Vec<Vec<WorkChunk>> = (0..threads)
        .map(|t| {
            let (s, e) = ((t * per).min(layer.filters), ((t + 1) * per).min(layer.filters));
            if s < e {
                vec![WorkChunk { start: s, end: e, macs: 0 }]
            } else {
                Vec::new()
            }
        })
        .collect();
    let jobs = split_jobs(&mut out, &workers, n, layer.filters, plane);
    run_workers(jobs, |(img, chunk, slice): Job<'_>| {
        let src = &padded[img * c * ph * pw..(img + 1) * c * ph * pw];
        for (f, dst) in (chunk.start..chunk.end).zip(slice.chunks_exact_mut(plane)) {
            let (a, b) = (layer.row_ptr[f], layer.row_ptr[f + 1]);
            let (offs, vals) = (&offsets[a..b], &layer.values[a..b]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = oy * spec.stride * pw + ox * spec.stride;
                    let mut acc = 0.0f32;
                    for (&o, &v) in offs.iter().zip(vals) {
                        acc += v * src[base + o];
                    }
                    dst[oy * ow + ox] = acc + layer.bias[f];
                }
            }
        }
        0
    });
    Ok(Tensor4D::from_parts(n, layer.filters, oh, ow, out))
}

/// Runs a model with its compiled plans. Each pruned conv consumes the
/// previous plan's compiled channel order directly; dense layers and the
/// final output get the logical order back.
pub fn run_network(model: &ModelGraph, plans: &NetworkPlan, input: &Tensor4D) -> Result<Tensor4D> {
    check_input(model, input)?;
    if plans.layers.len() != model.layers.len() {
        return Err(err!(
            Validation,
            "network plan has {} layers, model has {}",
            plans.layers.len(),
            model.layers.len()
        ));
    }
    let mut x = input.clone();
    // Permutation (old -> new) of the channels of `x`, if not logical.
    let mut carried: Option<Vec<usize>> = None;
    for (i, (layer, plan)) in model.layers.iter().zip(&plans.layers).enumerate() {
        let logical = |x: Tensor4D, carried: &mut Option<Vec<usize>>| match carried.take() {
            Some(p) => x.gather_channels(&p),
            None => Ok(x),
        };
        x = match (layer, plan) {
            (Layer::Conv(conv), Some(plan)) => match &conv.weights {
                ConvWeights::Pruned(p) => {
                    let p = match &carried {
                        Some(perm) => p.permute_channels(perm)?,
                        None => p.clone(),
                    };
                    let y = execute_plan(plan, &p, &x)?;
                    carried = Some(plan.permutation.clone());
                    y
                }
                ConvWeights::Dense(_) => return Err(err!(Validation, "layer {i}: plan given for a dense conv")),
            },
            (Layer::Conv(conv), None) => match &conv.weights {
                ConvWeights::Dense(d) => conv2d_im2col(&logical(x, &mut carried)?, d, &conv.spec)?,
                ConvWeights::Pruned(_) => return Err(err!(Validation, "layer {i}: pruned conv has no plan")),
            },
            (_, Some(_)) => return Err(err!(Validation, "layer {i}: plan given for a {} layer", layer.kind())),
            (Layer::Relu, None) => relu(&x),
            (Layer::MaxPool { size, stride }, None) => max_pool(&x, *size, *stride)?,
            (Layer::Dense(d), None) => dense_forward(&logical(x, &mut carried)?, &d.weights, &d.bias)?,
        };
    }
    match carried {
        Some(p) => x.gather_channels(&p),
        None => Ok(x),
    }
}
