//! Layerwise benchmark of the three conv executors.
//!
//! Every layer gets seeded random weights and input. Variants of one layer
//! are timed in interleaved rounds, in a seeded random order per round, so
//! slow drift of the machine affects all of them alike. Each timed run
//! directly follows an untimed run of the same variant, so no variant
//! inherits the cache state left behind by another.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use pconv_core::compiler::{compile_layer, ExecutionPlan};
use pconv_core::exec::{csr_execute, execute_plan, CsrSparseLayer};
use pconv_core::model::PrunedConvLayer;
use pconv_core::prune::{prune_layer, KeepRatio};
use pconv_core::scp::extended_scp_set;
use pconv_core::tensor::{conv2d_im2col_threaded, ConvSpec, DenseConvLayer, MacCount, Tensor4D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_io::random_tensor;
use crate::zoo::he_uniform_conv;

pub const CSV_HEADER: &str = "suite,layer,H,W,C,F,k,keep_ratio,variant,threads,reps,median_ms,min_ms,gflops";
pub const MIN_REPS: usize = 5;
pub const WARMUPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Vgg16,
    Resnet50Shapes,
    Mobilenetv2Shapes,
    Toy,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Vgg16 => "vgg16",
            Suite::Resnet50Shapes => "resnet50-shapes",
            Suite::Mobilenetv2Shapes => "mobilenetv2-shapes",
            Suite::Toy => "toy",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::Vgg16, Suite::Resnet50Shapes, Suite::Mobilenetv2Shapes, Suite::Toy]
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| {
                Error::Parse(format!("unknown suite {s:?}; expected vgg16, resnet50-shapes, mobilenetv2-shapes or toy"))
            })
    }
}

/// One benchmarked conv: `c -> f` channels on an `h x w` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    /// 3 or 1; 1x1 layers run only as dense convs.
    pub kernel: usize,
    pub stride: usize,
}

const fn conv3(name: &'static str, c: usize, f: usize, side: usize, stride: usize) -> LayerShape {
    LayerShape { name, c, f, h: side, w: side, kernel: 3, stride }
}

const fn conv1(name: &'static str, c: usize, f: usize, side: usize) -> LayerShape {
    LayerShape { name, c, f, h: side, w: side, kernel: 1, stride: 1 }
}

/// The nine distinct conv layer sizes of VGG-16 on 224x224 inputs.
pub const VGG16_LAYERS: [LayerShape; 9] = [
    conv3("conv1_1", 3, 64, 224, 1),
    conv3("conv1_2", 64, 64, 224, 1),
    conv3("conv2_1", 64, 128, 112, 1),
    conv3("conv2_2", 128, 128, 112, 1),
    conv3("conv3_1", 128, 256, 56, 1),
    conv3("conv3_2", 256, 256, 56, 1),
    conv3("conv4_1", 256, 512, 28, 1),
    conv3("conv4_2", 512, 512, 28, 1),
    conv3("conv5_1", 512, 512, 14, 1),
];

/// The 3x3 convs of the ResNet-50 bottleneck stages.
const RESNET50_LAYERS: [LayerShape; 7] = [
    conv3("res2_conv2", 64, 64, 56, 1),
    conv3("res3_conv2_s2", 128, 128, 56, 2),
    conv3("res3_conv2", 128, 128, 28, 1),
    conv3("res4_conv2_s2", 256, 256, 28, 2),
    conv3("res4_conv2", 256, 256, 14, 1),
    conv3("res5_conv2_s2", 512, 512, 14, 2),
    conv3("res5_conv2", 512, 512, 7, 1),
];

/// The stride-2 stem plus the distinct pointwise layers of MobileNet-v2.
const MOBILENETV2_LAYERS: [LayerShape; 15] = [
    conv3("stem", 3, 32, 224, 2),
    conv1("b1_project", 32, 16, 112),
    conv1("b2_expand", 16, 96, 112),
    conv1("b2_project", 96, 24, 56),
    conv1("b3_expand", 24, 144, 56),
    conv1("b4_project", 144, 32, 28),
    conv1("b5_expand", 32, 192, 28),
    conv1("b7_project", 192, 64, 14),
    conv1("b8_expand", 64, 384, 14),
    conv1("b11_project", 384, 96, 14),
    conv1("b12_expand", 96, 576, 14),
    conv1("b14_project", 576, 160, 7),
    conv1("b15_expand", 160, 960, 7),
    conv1("b17_project", 960, 320, 7),
    conv1("head", 320, 1280, 7),
];

/// The two convs of the toy CNN.
const TOY_LAYERS: [LayerShape; 2] = [conv3("conv1", 2, 8, 16, 1), conv3("conv2", 8, 16, 8, 1)];

pub fn suite_layers(suite: Suite) -> &'static [LayerShape] {
    match suite {
        Suite::Vgg16 => &VGG16_LAYERS,
        Suite::Resnet50Shapes => &RESNET50_LAYERS,
        Suite::Mobilenetv2Shapes => &MOBILENETV2_LAYERS,
        Suite::Toy => &TOY_LAYERS,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub suite: Suite,
    pub threads: usize,
    pub reps: usize,
    pub keep: KeepRatio,
    /// Pattern-set sizes for the pattern executor; CSR uses the first.
    pub pattern_counts: Vec<usize>,
    /// Also time the dense and CSR baselines.
    pub baselines: bool,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(suite: Suite) -> Self {
        BenchConfig {
            suite,
            threads: 1,
            reps: 10,
            keep: KeepRatio::new(1, 2).expect("1/2"),
            pattern_counts: vec![4],
            baselines: true,
            seed: 0,
        }
    }

    /// Pattern executor at k = 4, 8 and 12.
    pub fn sweep(mut self) -> Self {
        self.pattern_counts = vec![4, 8, 12];
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Dense,
    Csr,
    Pattern,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense_im2col",
            Variant::Csr => "csr",
            Variant::Pattern => "pattern",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub suite: Suite,
    pub layer: &'static str,
    pub shape: LayerShape,
    /// Nonzeros per kernel: 9 (or 1) for dense rows, the pattern size otherwise.
    pub k: usize,
    pub keep: KeepRatio,
    pub variant: Variant,
    pub threads: usize,
    pub reps: usize,
    pub macs: u64,
    pub median_ms: f64,
    pub min_ms: f64,
    /// Timed runs in round order; round `i` of every variant of a layer ran
    /// within the same shuffled round.
    pub samples_ms: Vec<f64>,
}

impl BenchRow {
    pub fn gflops(&self) -> f64 {
        2.0 * self.macs as f64 / (self.median_ms * 1e6)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.3}",
                r.suite.name(),
                r.layer,
                r.shape.h,
                r.shape.w,
                r.shape.c,
                r.shape.f,
                r.k,
                r.keep.as_f64(),
                r.variant.name(),
                r.threads,
                r.reps,
                r.median_ms,
                r.min_ms,
                r.gflops()
            );
        }
        s
    }

    /// Sum over layers of the median time of `variant` (with `k` for pattern rows).
    pub fn total_median_ms(&self, variant: Variant, k: Option<usize>) -> f64 {
        self.rows.iter().filter(|r| r.variant == variant && k.is_none_or(|k| r.k == k)).map(|r| r.median_ms).sum()
    }
}

enum Work {
    Dense(DenseConvLayer),
    Csr(CsrSparseLayer),
    Pattern(Box<(ExecutionPlan, PrunedConvLayer)>),
}

struct Case {
    variant: Variant,
    k: usize,
    keep: KeepRatio,
    macs: u64,
    work: Work,
    times: Vec<f64>,
}

impl Case {
    fn run(&self, input: &Tensor4D, spec: &ConvSpec, threads: usize) -> Result<()> {
        let out = match &self.work {
            Work::Dense(d) => conv2d_im2col_threaded(input, d, spec, threads)?,
            Work::Csr(c) => csr_execute(c, spec, input, threads)?,
            Work::Pattern(p) => execute_plan(&p.0, &p.1, input)?,
        };
        std::hint::black_box(out);
        Ok(())
    }
}

fn layer_cases(shape: &LayerShape, config: &BenchConfig, spec: &ConvSpec, seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = he_uniform_conv(&mut rng, shape.f, shape.c, shape.kernel)?;
    let dense_macs = dense.mac_count(spec, 1, shape.h, shape.w)?;
    let mut cases = Vec::new();
    if config.baselines || shape.kernel != 3 {
        cases.push(Case {
            variant: Variant::Dense,
            k: shape.kernel * shape.kernel,
            keep: KeepRatio::one(),
            macs: dense_macs,
            work: Work::Dense(dense.clone()),
            times: Vec::new(),
        });
    }
    if shape.kernel != 3 {
        return Ok(cases);
    }
    for (i, &k) in config.pattern_counts.iter().enumerate() {
        let pruned = prune_layer(&dense, &extended_scp_set(k)?, config.keep, true)?;
        if i == 0 && config.baselines {
            let csr = CsrSparseLayer::from_dense(&pruned.to_dense());
            cases.push(Case {
                variant: Variant::Csr,
                k,
                keep: config.keep,
                macs: csr.mac_count(spec, 1, shape.h, shape.w)?,
                work: Work::Csr(csr),
                times: Vec::new(),
            });
        }
        let plan = compile_layer(&pruned, spec, (shape.h, shape.w), config.threads)?;
        cases.push(Case {
            variant: Variant::Pattern,
            k,
            keep: config.keep,
            macs: plan.macs(),
            work: Work::Pattern(Box::new((plan, pruned))),
            times: Vec::new(),
        });
    }
    Ok(cases)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times every layer of the suite; `on_row` sees each row as it completes.
pub fn run_bench_with(config: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    if config.reps < MIN_REPS {
        return Err(pconv_core::Error::Config(format!("reps must be at least {MIN_REPS}, got {}", config.reps)).into());
    }
    if config.threads == 0 {
        return Err(pconv_core::Error::Config("threads must be positive".into()).into());
    }
    if config.pattern_counts.is_empty() {
        return Err(pconv_core::Error::Config("no pattern counts to benchmark".into()).into());
    }
    let mut rows = Vec::new();
    for (li, shape) in suite_layers(config.suite).iter().enumerate() {
        let pad = shape.kernel / 2;
        let spec = ConvSpec::new(shape.stride, pad, shape.kernel, shape.kernel)?;
        let layer_seed = config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(li as u64);
        let input = random_tensor([1, shape.c, shape.h, shape.w], layer_seed ^ 0xa5a5)?;
        let mut cases = layer_cases(shape, config, &spec, layer_seed)?;
        for case in &cases {
            for _ in 0..WARMUPS {
                case.run(&input, &spec, config.threads)?;
            }
        }
        let mut order: Vec<usize> = (0..cases.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed);
        for _ in 0..config.reps {
            order.shuffle(&mut rng);
            for &j in &order {
                let case = &mut cases[j];
                case.run(&input, &spec, config.threads)?;
                let start = Instant::now();
                case.run(&input, &spec, config.threads)?;
                case.times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        for case in cases {
            let mut sorted = case.times.clone();
            sorted.sort_by(f64::total_cmp);
            let row = BenchRow {
                suite: config.suite,
                layer: shape.name,
                shape: *shape,
                k: case.k,
                keep: case.keep,
                variant: case.variant,
                threads: config.threads,
                reps: config.reps,
                macs: case.macs,
                median_ms: median(&sorted),
                min_ms: sorted[0],
                samples_ms: case.times,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(BenchReport { rows })
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    run_bench_with(config, |_| {})
}
