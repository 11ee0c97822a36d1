//! Lowering of pruned layers into execution plans.
//!
//! Three passes: layer information extraction, filter kernel reorder and
//! access-template construction. A plan only describes an order of work;
//! it never copies weights, so it stays valid exactly as long as the layer
//! fingerprint matches.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{extract_layer_info, ConvWeights, Layer, LayerInfo, ModelGraph, PrunedConvLayer};
use crate::scp::PatternSet;
use crate::tensor::{check_permutation, ConvSpec};
use crate::{err, Error, Result};

/// Input offsets of one pattern's nonzeros, relative to the top-left of the
/// receptive field in a padded plane with the given row stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTemplate {
    pub pattern: u8,
    pub offsets: Vec<usize>,
}

pub fn build_access_templates(set: &PatternSet, row_stride: usize) -> Result<Vec<AccessTemplate>> {
    if row_stride < 3 {
        return Err(err!(Shape, "row stride {row_stride} is narrower than a 3x3 kernel"));
    }
    Ok(set
        .masks()
        .iter()
        .map(|m| AccessTemplate {
            pattern: m.id(),
            offsets: m.positions().map(|p| (p / 3) * row_stride + p % 3).collect(),
        })
        .collect())
}

/// Result of filter kernel reorder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reorder {
    /// `permutation[old] = new`.
    pub permutation: Vec<usize>,
    /// `order[new] = old`.
    pub order: Vec<usize>,
    /// Retained `(channel, pattern)` visit sequence of each filter, by new position.
    pub kernel_orders: Vec<Vec<(u32, u8)>>,
}

/// Sorts filters by signature (stable, so equal signatures keep their
/// original order) and each filter's kernels by `(pattern, channel)`.
pub fn filter_kernel_reorder(info: &LayerInfo) -> Reorder {
    let mut order: Vec<usize> = (0..info.filters).collect();
    order.sort_by(|&a, &b| info.signatures[a].cmp(&info.signatures[b]));
    let mut permutation = vec![0usize; info.filters];
    for (new, &old) in order.iter().enumerate() {
        permutation[old] = new;
    }
    let kernel_orders = order
        .iter()
        .map(|&f| {
            let mut ks: Vec<(u32, u8)> =
                info.connectivity[f].iter().copied().zip(info.kernel_patterns[f].iter().copied()).collect();
            ks.sort_by_key(|&(c, p)| (p, c));
            ks
        })
        .collect();
    Reorder { permutation, order, kernel_orders }
}

/// Consecutive kernels of one filter sharing a pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelRun {
    pub pattern: u8,
    pub channels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterSchedule {
    /// Index of this filter in the layer's logical order.
    pub filter: usize,
    pub runs: Vec<KernelRun>,
}

impl FilterSchedule {
    pub fn kernel_count(&self) -> usize {
        self.runs.iter().map(|r| r.channels.len()).sum()
    }
}

/// Filters `start..end` (compiled order) with one shared signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterGroup {
    pub start: usize,
    pub end: usize,
    pub signature: Vec<u8>,
    /// MACs of the whole group for one image.
    pub macs: u64,
}

/// Filters `start..end` (compiled order) handed to one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkChunk {
    pub start: usize,
    pub end: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadPartition {
    pub workers: Vec<Vec<WorkChunk>>,
}

impl ThreadPartition {
    pub fn worker_macs(&self) -> Vec<u64> {
        self.workers.iter().map(|w| w.iter().map(|c| c.macs).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub filters: usize,
    pub channels: usize,
    pub nonzeros: usize,
    pub spec: ConvSpec,
    pub input_h: usize,
    pub input_w: usize,
    pub output_h: usize,
    pub output_w: usize,
    /// Row stride of the zero-padded input plane.
    pub row_stride: usize,
    pub padded_h: usize,
    /// `permutation[old] = new` for output channels.
    pub permutation: Vec<usize>,
    /// One schedule per filter, in compiled order.
    pub schedules: Vec<FilterSchedule>,
    pub templates: Vec<AccessTemplate>,
    pub groups: Vec<FilterGroup>,
    pub partition: ThreadPartition,
    pub threads: usize,
    /// Fingerprint of the layer this plan was compiled from.
    pub fingerprint: u64,
}

impl ExecutionPlan {
    pub fn output_positions(&self) -> u64 {
        (self.output_h * self.output_w) as u64
    }

    /// `order[new] = old`.
    pub fn filter_order(&self) -> Vec<usize> {
        self.schedules.iter().map(|s| s.filter).collect()
    }

    /// MACs of the whole layer for one image.
    pub fn macs(&self) -> u64 {
        self.groups.iter().map(|g| g.macs).sum()
    }

    /// Number of pattern switches a worker takes inside each group's filters.
    pub fn branch_switches(&self) -> Vec<usize> {
        self.groups.iter().map(|g| self.schedules[g.start].runs.len()).collect()
    }

    /// Checks that the plan describes `layer` completely and consistently.
    /// Run before every execution so a hand-edited plan cannot index out of bounds.
    pub fn check_against(&self, layer: &PrunedConvLayer) -> Result<()> {
        if self.fingerprint != layer.fingerprint() {
            return Err(Error::Fingerprint { expected: self.fingerprint, found: layer.fingerprint() });
        }
        if (self.filters, self.channels, self.nonzeros) != (layer.filters(), layer.channels(), layer.nonzeros()) {
            return Err(err!(Validation, "plan dims do not match layer"));
        }
        if (self.spec.kernel_h, self.spec.kernel_w) != (3, 3) {
            return Err(Error::UnsupportedShape { kh: self.spec.kernel_h, kw: self.spec.kernel_w });
        }
        let (oh, ow) = self.spec.output_dims(self.input_h, self.input_w)?;
        let pad = self.spec.padding;
        if (oh, ow) != (self.output_h, self.output_w)
            || self.row_stride != self.input_w + 2 * pad
            || self.padded_h != self.input_h + 2 * pad
        {
            return Err(err!(Validation, "plan geometry is inconsistent"));
        }
        if self.templates != build_access_templates(layer.patterns(), self.row_stride)? {
            return Err(err!(Validation, "plan access templates do not match the layer's pattern set"));
        }
        check_permutation(&self.permutation, self.filters)?;
        if self.schedules.len() != self.filters {
            return Err(err!(Validation, "plan has {} schedules for {} filters", self.schedules.len(), self.filters));
        }
        for (new, s) in self.schedules.iter().enumerate() {
            if s.filter >= self.filters || self.permutation[s.filter] != new {
                return Err(err!(Validation, "schedule {new} disagrees with the filter permutation"));
            }
            let mut seen = vec![false; self.channels];
            for run in &s.runs {
                for &c in &run.channels {
                    let c = c as usize;
                    if c >= self.channels || seen[c] || layer.pattern_id(s.filter, c) != run.pattern {
                        return Err(err!(Validation, "filter {} schedule names channel {c} inconsistently", s.filter));
                    }
                    seen[c] = true;
                }
            }
            if s.kernel_count() != layer.retained_in_filter(s.filter) {
                return Err(err!(Validation, "filter {} schedule misses retained kernels", s.filter));
            }
        }
        let mut covered = 0;
        for g in &self.groups {
            if g.start != covered || g.end <= g.start || g.end > self.filters {
                return Err(err!(Validation, "filter groups do not partition the filters"));
            }
            covered = g.end;
        }
        if covered != self.filters {
            return Err(err!(Validation, "filter groups do not partition the filters"));
        }
        let mut chunks: Vec<WorkChunk> = self.partition.workers.iter().flatten().copied().collect();
        chunks.sort_by_key(|c| c.start);
        let mut covered = 0;
        for c in &chunks {
            if c.start != covered || c.end <= c.start || c.end > self.filters {
                return Err(err!(Validation, "thread partition does not cover every filter once"));
            }
            covered = c.end;
        }
        if covered != self.filters || self.partition.workers.len() != self.threads {
            return Err(err!(Validation, "thread partition does not cover every filter once"));
        }
        Ok(())
    }
}

/// Splits every group into pieces of at most `ceil(filters / threads)`
/// filters, then hands pieces largest-first to the least-loaded worker.
fn partition_work(groups: &[FilterGroup], filter_macs: &[u64], filters: usize, threads: usize) -> ThreadPartition {
    let piece = filters.div_ceil(threads).max(1);
    let mut chunks = Vec::new();
    for g in groups {
        // Split each group into near-equal chunks of at most `piece` filters.
        let len = g.end - g.start;
        let n = len.div_ceil(piece);
        let mut s = g.start;
        for i in 0..n {
            let e = s + len / n + usize::from(i < len % n);
            chunks.push(WorkChunk { start: s, end: e, macs: filter_macs[s..e].iter().sum() });
            s = e;
        }
    }
    chunks.sort_by(|a, b| b.macs.cmp(&a.macs).then(a.start.cmp(&b.start)));
    let mut workers: Vec<Vec<WorkChunk>> = vec![Vec::new(); threads];
    let mut load = vec![0u64; threads];
    for c in chunks {
        let w = (0..threads).min_by_key(|&w| (load[w], w)).unwrap();
        load[w] += c.macs;
        workers[w].push(c);
    }
    for w in &mut workers {
        w.sort_by_key(|c| c.start);
    }
    ThreadPartition { workers }
}

/// Compiles one pruned 3x3 layer for inputs of `input_dims = (h, w)`.
pub fn compile_layer(
    layer: &PrunedConvLayer,
    spec: &ConvSpec,
    input_dims: (usize, usize),
    threads: usize,
) -> Result<ExecutionPlan> {
    if threads == 0 {
        return Err(err!(Config, "thread count must be at least 1"));
    }
    if (spec.kernel_h, spec.kernel_w) != (3, 3) {
        return Err(Error::UnsupportedShape { kh: spec.kernel_h, kw: spec.kernel_w });
    }
    let (h, w) = input_dims;
    let (output_h, output_w) = spec.output_dims(h, w)?;
    let positions = (output_h * output_w) as u64;
    let info = extract_layer_info(layer)?;
    let reorder = filter_kernel_reorder(&info);

    let schedules: Vec<FilterSchedule> = reorder
        .order
        .iter()
        .zip(&reorder.kernel_orders)
        .map(|(&filter, kernels)| {
            let mut runs: Vec<KernelRun> = Vec::new();
            for &(c, p) in kernels {
                match runs.last_mut() {
                    Some(r) if r.pattern == p => r.channels.push(c),
                    _ => runs.push(KernelRun { pattern: p, channels: vec![c] }),
                }
            }
            FilterSchedule { filter, runs }
        })
        .collect();

    let filter_macs: Vec<u64> = reorder.order.iter().map(|&f| info.filter_macs[f] * positions).collect();
    let mut groups: Vec<FilterGroup> = Vec::new();
    for (new, &old) in reorder.order.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if g.signature == info.signatures[old] => {
                g.end = new + 1;
                g.macs += filter_macs[new];
            }
            _ => groups.push(FilterGroup {
                start: new,
                end: new + 1,
                signature: info.signatures[old].clone(),
                macs: filter_macs[new],
            }),
        }
    }
    let partition = partition_work(&groups, &filter_macs, layer.filters(), threads);
    let row_stride = w + 2 * spec.padding;

    Ok(ExecutionPlan {
        filters: layer.filters(),
        channels: layer.channels(),
        nonzeros: layer.nonzeros(),
        spec: *spec,
        input_h: h,
        input_w: w,
        output_h,
        output_w,
        row_stride,
        padded_h: h + 2 * spec.padding,
        permutation: reorder.permutation,
        schedules,
        templates: build_access_templates(layer.patterns(), row_stride)?,
        groups,
        partition,
        threads,
        fingerprint: layer.fingerprint(),
    })
}

/// Reindexes the input channels of the next layer so it consumes this
/// plan's output in compiled order directly.
pub fn propagate_permutation(plan: &ExecutionPlan, next: &PrunedConvLayer) -> Result<PrunedConvLayer> {
    if next.channels() != plan.filters {
        return Err(err!(Shape, "next layer has {} channels, plan produces {}", next.channels(), plan.filters));
    }
    next.permute_channels(&plan.permutation)
}

/// One plan per model layer; `None` for layers run without a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkPlan {
    pub threads: usize,
    pub layers: Vec<Option<ExecutionPlan>>,
}

/// Compiles every pruned conv layer of `model`. Each plan is compiled
/// against the layer as it will run: input channels already reindexed by
/// the permutation of the conv before it.
pub fn compile_network(model: &ModelGraph, threads: usize) -> Result<NetworkPlan> {
    let shapes = model.shapes()?;
    let mut carried: Option<Vec<usize>> = None;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let plan = match layer {
            Layer::Conv(conv) => match &conv.weights {
                ConvWeights::Pruned(p) => {
                    let p = match &carried {
                        Some(perm) => p.permute_channels(perm)?,
                        None => p.clone(),
                    };
                    let plan = compile_layer(&p, &conv.spec, (shapes[i].h, shapes[i].w), threads)?;
                    carried = Some(plan.permutation.clone());
                    Some(plan)
                }
                ConvWeights::Dense(_) => {
                    carried = None;
                    None
                }
            },
            Layer::Dense(_) => {
                carried = None;
                None
            }
            Layer::Relu | Layer::MaxPool { .. } => None,
        };
        layers.push(plan);
    }
    Ok(NetworkPlan { threads, layers })
}
