//! `.pplan` files: versioned JSON of a [`NetworkPlan`], plus a text dump of
//! the specialized loop nest each filter group runs.

use std::fmt::Write as _;
use std::path::Path;

use pconv_core::compiler::{
    AccessTemplate, ExecutionPlan, FilterGroup, FilterSchedule, KernelRun, NetworkPlan, ThreadPartition, WorkChunk,
};
use pconv_core::tensor::ConvSpec;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};

pub const PLAN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    format: String,
    version: u32,
    threads: usize,
    /// One entry per model layer; `null` where no plan is needed.
    layers: Vec<Option<PlanDto>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunDto {
    pattern: u8,
    channels: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDto {
    filter: usize,
    runs: Vec<RunDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupDto {
    start: usize,
    end: usize,
    signature: Vec<u8>,
    macs: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateDto {
    pattern: u8,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDto {
    fingerprint: String,
    filters: usize,
    channels: usize,
    nonzeros: usize,
    stride: usize,
    padding: usize,
    input: [usize; 2],
    output: [usize; 2],
    row_stride: usize,
    padded_h: usize,
    threads: usize,
    /// `permutation[old] = new`.
    permutation: Vec<usize>,
    templates: Vec<TemplateDto>,
    groups: Vec<GroupDto>,
    schedules: Vec<ScheduleDto>,
    /// Per worker, `[start, end, macs]` chunks of compiled filter positions.
    workers: Vec<Vec<[u64; 3]>>,
}

impl From<&ExecutionPlan> for PlanDto {
    fn from(p: &ExecutionPlan) -> Self {
        PlanDto {
            fingerprint: format!("{:#018x}", p.fingerprint),
            filters: p.filters,
            channels: p.channels,
            nonzeros: p.nonzeros,
            stride: p.spec.stride,
            padding: p.spec.padding,
            input: [p.input_h, p.input_w],
            output: [p.output_h, p.output_w],
            row_stride: p.row_stride,
            padded_h: p.padded_h,
            threads: p.threads,
            permutation: p.permutation.clone(),
            templates: p
                .templates
                .iter()
                .map(|t| TemplateDto { pattern: t.pattern, offsets: t.offsets.clone() })
                .collect(),
            groups: p
                .groups
                .iter()
                .map(|g| GroupDto { start: g.start, end: g.end, signature: g.signature.clone(), macs: g.macs })
                .collect(),
            schedules: p
                .schedules
                .iter()
                .map(|s| ScheduleDto {
                    filter: s.filter,
                    runs: s.runs.iter().map(|r| RunDto { pattern: r.pattern, channels: r.channels.clone() }).collect(),
                })
                .collect(),
            workers: p
                .partition
                .workers
                .iter()
                .map(|w| w.iter().map(|c| [c.start as u64, c.end as u64, c.macs]).collect())
                .collect(),
        }
    }
}

impl PlanDto {
    fn into_plan(self, layer: usize) -> Result<ExecutionPlan> {
        let hex = self.fingerprint.strip_prefix("0x").unwrap_or(&self.fingerprint);
        let fingerprint = u64::from_str_radix(hex, 16)
            .map_err(|e| Error::Parse(format!("layer {layer}: fingerprint {:?}: {e}", self.fingerprint)))?;
        let workers = self
            .workers
            .into_iter()
            .map(|w| {
                w.into_iter()
                    .map(|[s, e, m]| Ok(WorkChunk { start: to_usize(s, layer)?, end: to_usize(e, layer)?, macs: m }))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExecutionPlan {
            filters: self.filters,
            channels: self.channels,
            nonzeros: self.nonzeros,
            spec: ConvSpec::new(self.stride, self.padding, 3, 3)?,
            input_h: self.input[0],
            input_w: self.input[1],
            output_h: self.output[0],
            output_w: self.output[1],
            row_stride: self.row_stride,
            padded_h: self.padded_h,
            permutation: self.permutation,
            schedules: self
                .schedules
                .into_iter()
                .map(|s| FilterSchedule {
                    filter: s.filter,
                    runs: s.runs.into_iter().map(|r| KernelRun { pattern: r.pattern, channels: r.channels }).collect(),
                })
                .collect(),
            templates: self
                .templates
                .into_iter()
                .map(|t| AccessTemplate { pattern: t.pattern, offsets: t.offsets })
                .collect(),
            groups: self
                .groups
                .into_iter()
                .map(|g| FilterGroup { start: g.start, end: g.end, signature: g.signature, macs: g.macs })
                .collect(),
            partition: ThreadPartition { workers },
            threads: self.threads,
            fingerprint,
        })
    }
}

fn to_usize(v: u64, layer: usize) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Parse(format!("layer {layer}: chunk bound {v} out of range")))
}

pub fn plan_to_json(plan: &NetworkPlan) -> String {
    let file = PlanFile {
        format: "pplan".into(),
        version: PLAN_VERSION,
        threads: plan.threads,
        layers: plan.layers.iter().map(|l| l.as_ref().map(PlanDto::from)).collect(),
    };
    serde_json::to_string_pretty(&file).expect("plan serializes")
}

/// Structural parse only; consistency with a model is checked when the
/// plan runs.
pub fn plan_from_json(text: &str) -> Result<NetworkPlan> {
    let file: PlanFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("plan file: {e}")))?;
    if file.format != "pplan" {
        return Err(Error::Parse(format!("plan file format is {:?}, expected \"pplan\"", file.format)));
    }
    if file.version != PLAN_VERSION {
        return Err(Error::Parse(format!("plan version mismatch: expected {PLAN_VERSION}, found {}", file.version)));
    }
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.map(|d| d.into_plan(i)).transpose())
        .collect::<Result<_>>()?;
    Ok(NetworkPlan { threads: file.threads, layers })
}

pub fn read_plan(path: &Path) -> Result<NetworkPlan> {
    let bytes = read_file(path)?;
    plan_from_json(std::str::from_utf8(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?)
}

pub fn write_plan(path: &Path, plan: &NetworkPlan) -> Result<()> {
    write_file(path, plan_to_json(plan).as_bytes())
}

fn list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Human-readable loop structure: per group, the pattern runs every filter
/// in it executes, with the input offsets each run reads.
pub fn emit_plan_text(plan: &NetworkPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "network plan, {} worker(s)", plan.threads);
    for (i, p) in plan.layers.iter().enumerate() {
        let Some(p) = p else { continue };
        let _ = writeln!(
            s,
            "\nlayer {i}: F={} C={} k={} {}x{} -> {}x{} stride {} pad {} fingerprint {:#018x}",
            p.filters,
            p.channels,
            p.nonzeros,
            p.input_h,
            p.input_w,
            p.output_h,
            p.output_w,
            p.spec.stride,
            p.spec.padding,
            p.fingerprint
        );
        let _ = writeln!(s, "  filter order (compiled <- original): {}", list(&p.filter_order()));
        let _ = writeln!(s, "  templates, padded row stride {}:", p.row_stride);
        for t in &p.templates {
            let _ = writeln!(s, "    p{}: in[c][base + {{{}}}]", t.pattern, list(&t.offsets));
        }
        for (g, group) in p.groups.iter().enumerate() {
            let sched = &p.schedules[group.start];
            let _ = writeln!(
                s,
                "  group {g}: filters {}..{} signature [{}] macs {}",
                group.start,
                group.end,
                list(&group.signature),
                group.macs
            );
            let _ = writeln!(s, "    for f in {}..{}:", group.start, group.end);
            let _ = writeln!(s, "      out[f][y][x] = bias[f]");
            for run in &sched.runs {
                let _ = writeln!(
                    s,
                    "      for {} kernel(s) with p{}: out[f][y][x] += w . in[c][base(y, x) + template(p{})]",
                    run.channels.len(),
                    run.pattern,
                    run.pattern
                );
            }
        }
        for (w, chunks) in p.partition.workers.iter().enumerate() {
            let ranges: Vec<String> = chunks.iter().map(|c| format!("{}..{}", c.start, c.end)).collect();
            let macs: u64 = chunks.iter().map(|c| c.macs).sum();
            let _ = writeln!(s, "  worker {w}: filters {} ({macs} macs)", ranges.join(", "));
        }
    }
    s
}
