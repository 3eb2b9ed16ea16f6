//! Placement of depthwise layers onto the tile array.
//!
//! A plan splits the padded ifmap width into *segments* (the IA columns that
//! sit in a tile at once) and each segment into *strips* (the outputs one
//! shift schedule produces). Work units are `(segment, output row)` pairs;
//! channels are grouped onto tiles, and idle tiles take copies of a group
//! that split its work units.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::DataflowId;
use crate::engine::{dwconv_multichannel_masked, AccumTensor, EngineError, IntTensor};
use crate::schedule::{
    output_len, schedulable_params, schedule_from_params, KernelGeometry, ScheduleError, ScheduleParams,
    ShiftSchedule,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MappingError {
    #[error("width {width} is too narrow for one kernel block (needs {needed})")]
    TooNarrow { width: u64, needed: u64 },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid layer {name}: {reason}")]
    InvalidLayer { name: String, reason: String },
    #[error("invalid macro configuration: {0}")]
    InvalidMacro(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("coverage violation: {0}")]
    Coverage(String),
}

/// Hardware envelope of the macro.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroConfig {
    pub n_tiles: u64,
    pub tm_rows: u64,
    pub word_bits: u64,
    pub trf_words: u64,
    pub ib_bytes: u64,
    pub ob_bytes: u64,
    pub wb_bytes: u64,
    pub n_adcs_per_tile: u64,
    pub clock_hz: f64,
    pub dram_bw_bytes_per_s: f64,
    /// Clocks per computation cycle of the bit-serial MAC pipeline.
    pub clocks_per_compute: u64,
    /// Output columns covered by one input-stationary TM fill.
    pub is_fill_outputs: u64,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            n_tiles: 64,
            tm_rows: 180,
            word_bits: 8,
            trf_words: 180,
            ib_bytes: 16384,
            ob_bytes: 16384,
            wb_bytes: 4096,
            n_adcs_per_tile: 8,
            clock_hz: 250e6,
            dram_bw_bytes_per_s: 25.6e9,
            clocks_per_compute: 10,
            is_fill_outputs: 8,
        }
    }
}

impl MacroConfig {
    pub fn validate(&self) -> Result<(), MappingError> {
        let counts = [
            ("n_tiles", self.n_tiles),
            ("tm_rows", self.tm_rows),
            ("word_bits", self.word_bits),
            ("trf_words", self.trf_words),
            ("ib_bytes", self.ib_bytes),
            ("ob_bytes", self.ob_bytes),
            ("wb_bytes", self.wb_bytes),
            ("n_adcs_per_tile", self.n_adcs_per_tile),
            ("clocks_per_compute", self.clocks_per_compute),
            ("is_fill_outputs", self.is_fill_outputs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(MappingError::InvalidMacro(format!("{name} must be positive")));
        }
        for (name, v) in [("clock_hz", self.clock_hz), ("dram_bw_bytes_per_s", self.dram_bw_bytes_per_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MappingError::InvalidMacro(format!("{name} must be a positive number")));
            }
        }
        Ok(())
    }

    /// The same macro with the TM and TRF capacities exchanged, used when the
    /// IAs become the stationary operand.
    pub fn with_swapped_operands(&self) -> Self {
        Self {
            tm_rows: self.trf_words,
            trf_words: self.tm_rows,
            ..self.clone()
        }
    }
}

/// One depthwise layer. Stride and padding apply to both axes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub channels: u64,
    pub height: u64,
    pub width: u64,
    pub kernel_h: u64,
    pub kernel_w: u64,
    pub stride: u64,
    pub padding: u64,
}

impl LayerSpec {
    pub fn padded_height(&self) -> u64 {
        self.height + 2 * self.padding
    }

    pub fn padded_width(&self) -> u64 {
        self.width + 2 * self.padding
    }

    pub fn out_height(&self) -> u64 {
        (self.padded_height() - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> u64 {
        (self.padded_width() - self.kernel_w) / self.stride + 1
    }

    pub fn outputs(&self) -> u64 {
        self.channels * self.out_height() * self.out_width()
    }

    pub fn geometry(&self) -> Result<KernelGeometry, ScheduleError> {
        KernelGeometry::new(self.kernel_w, self.stride)
    }

    /// Shape sanity independent of the shift-schedule conditions.
    pub fn check_shape(&self) -> Result<(), MappingError> {
        let bad = |reason: String| MappingError::InvalidLayer {
            name: self.name.clone(),
            reason,
        };
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(bad(format!("{field} must be positive")));
            }
        }
        if self.padded_height() < self.kernel_h || self.padded_width() < self.kernel_w {
            return Err(bad("kernel larger than the padded ifmap".into()));
        }
        Ok(())
    }

    /// Real (unpadded) rows or columns inside the padded range `[lo, hi)`.
    pub fn real_span(&self, lo: u64, hi: u64, extent: u64) -> u64 {
        let a = lo.max(self.padding);
        let b = hi.min(self.padding + extent);
        b.saturating_sub(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheduler {
    #[serde(rename = "BIG")]
    Big,
    #[serde(rename = "LITTLE")]
    Little,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::Big => "BIG",
            Scheduler::Little => "LITTLE",
        })
    }
}

/// Outputs `[out_start, out_start + out_count)` of a row, produced by a
/// schedule with `blocks` kernel copies reading padded columns from
/// `in_start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strip {
    pub out_start: u64,
    pub out_count: u64,
    pub in_start: u64,
    pub blocks: u64,
}

/// Padded IA columns `[in_start, in_start + in_width)` resident in a tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub in_start: u64,
    pub in_width: u64,
    pub strips: Vec<Strip>,
}

impl Segment {
    pub fn outputs(&self) -> u64 {
        self.strips.iter().map(|s| s.out_count).sum()
    }
}

/// Output rows of one segment handled by a tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub segment: usize,
    pub out_rows: Range<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileAssignment {
    pub tile: u64,
    pub copy: u64,
    pub channels: Vec<u64>,
    /// TM rows holding each channel's stationary operand, aligned with `channels`.
    pub tm_rows: Vec<Range<u64>>,
    pub items: Vec<WorkItem>,
    pub tm_rows_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassPlan {
    pub channels_per_tile: u64,
    pub copies: u64,
    pub tiles: Vec<TileAssignment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub layer: String,
    pub dataflow: DataflowId,
    /// Absent for the baseline dataflows.
    pub scheduler: Option<Scheduler>,
    pub tile_width: u64,
    pub blocks: u64,
    pub channels_per_tile: u64,
    pub cross_tile_copies: u64,
    pub tm_rows_per_channel: u64,
    pub segments: Vec<Segment>,
    pub passes: Vec<PassPlan>,
    pub schedule: Option<ShiftSchedule>,
}

impl MappingPlan {
    pub fn active_tiles(&self) -> impl Iterator<Item = (usize, &TileAssignment)> {
        self.passes
            .iter()
            .enumerate()
            .flat_map(|(p, pass)| pass.tiles.iter().map(move |t| (p, t)))
    }

    /// Every `(channel, row, column)` output must be produced exactly once.
    pub fn check_coverage(&self, layer: &LayerSpec) -> Result<(), MappingError> {
        let (ho, wo) = (layer.out_height(), layer.out_width());
        let mut hits = vec![0u8; (layer.channels * ho * wo) as usize];
        for (_, tile) in self.active_tiles() {
            for item in &tile.items {
                let seg = &self.segments[item.segment];
                for &c in &tile.channels {
                    for h in item.out_rows.clone() {
                        for strip in &seg.strips {
                            for x in strip.out_start..strip.out_start + strip.out_count {
                                if h >= ho || x >= wo || c >= layer.channels {
                                    return Err(MappingError::Coverage(format!(
                                        "output ({c}, {h}, {x}) outside the ofmap"
                                    )));
                                }
                                let slot = &mut hits[((c * ho + h) * wo + x) as usize];
                                *slot = slot.saturating_add(1);
                            }
                        }
                    }
                }
            }
        }
        match hits.iter().position(|&n| n != 1) {
            None => Ok(()),
            Some(i) => {
                let i = i as u64;
                Err(MappingError::Coverage(format!(
                    "output ({}, {}, {}) produced {} times",
                    i / (ho * wo),
                    (i / wo) % ho,
                    i % wo,
                    hits[i as usize]
                )))
            }
        }
    }

    /// TM and TRF occupancy stay inside the macro.
    pub fn check_capacity(&self, layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<(), MappingError> {
        for (p, tile) in self.active_tiles() {
            if tile.tm_rows_used > macro_cfg.tm_rows {
                return Err(MappingError::Capacity(format!(
                    "pass {p} tile {} uses {} TM rows of {}",
                    tile.tile, tile.tm_rows_used, macro_cfg.tm_rows
                )));
            }
            if self.dataflow == DataflowId::WsConvdk {
                let widest = tile
                    .items
                    .iter()
                    .map(|it| self.segments[it.segment].in_width)
                    .max()
                    .unwrap_or(0);
                let words = widest * layer.kernel_h * tile.channels.len() as u64;
                if words > macro_cfg.trf_words {
                    return Err(MappingError::Capacity(format!(
                        "pass {p} tile {} needs {words} TRF words of {}",
                        tile.tile, macro_cfg.trf_words
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Widest `k_h`-tall slab that fits the TRF.
pub fn compute_tw(macro_cfg: &MacroConfig, kernel_h: u64) -> u64 {
    macro_cfg.trf_words / kernel_h.max(1)
}

/// Kernel copies that fit in `min(width, tile_width)` IA columns.
pub fn duplication_count(width: u64, tile_width: u64, kernel_w: u64, stride: u64) -> Result<u64, MappingError> {
    let l = KernelGeometry::new(kernel_w, stride)?.shift_cycles()?;
    let avail = width.min(tile_width);
    let needed = kernel_w + l - 1;
    if avail < needed {
        return Err(MappingError::TooNarrow { width: avail, needed });
    }
    Ok((avail - l + 1) / kernel_w)
}

pub fn select_scheduler(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Scheduler {
    if layer.padded_width() > compute_tw(macro_cfg, layer.kernel_h) {
        Scheduler::Big
    } else {
        Scheduler::Little
    }
}

/// Fewest blocks whose schedule covers `count` outputs.
fn blocks_for(geometry: KernelGeometry, count: u64, max_blocks: u64) -> Result<u64, ScheduleError> {
    for n in 1..=max_blocks {
        if output_len(geometry, n)? >= count {
            return Ok(n);
        }
    }
    Ok(max_blocks)
}

/// Splits a row of `out_width` outputs into strips of at most `per_strip`.
fn strips_for_row(
    geometry: KernelGeometry,
    out_width: u64,
    blocks: u64,
) -> Result<Vec<Strip>, ScheduleError> {
    let per_strip = output_len(geometry, blocks)?;
    let mut strips = Vec::new();
    let mut start = 0;
    while start < out_width {
        let count = per_strip.min(out_width - start);
        strips.push(Strip {
            out_start: start,
            out_count: count,
            in_start: start * geometry.s,
            blocks: blocks_for(geometry, count, blocks)?,
        });
        start += count;
    }
    Ok(strips)
}

pub(crate) fn strip_in_width(strip: &Strip, geometry: KernelGeometry) -> u64 {
    (strip.out_count - 1) * geometry.s + geometry.k
}

fn chunk_units(segments: &[Segment], out_rows: u64, parts: u64) -> Vec<Vec<WorkItem>> {
    let units: Vec<(usize, u64)> = (0..segments.len())
        .flat_map(|s| (0..out_rows).map(move |h| (s, h)))
        .collect();
    let n = units.len() as u64;
    (0..parts)
        .map(|i| {
            let lo = (i * n / parts) as usize;
            let hi = ((i + 1) * n / parts) as usize;
            let mut items: Vec<WorkItem> = Vec::new();
            for &(seg, h) in &units[lo..hi] {
                match items.last_mut() {
                    Some(it) if it.segment == seg && it.out_rows.end == h => it.out_rows.end = h + 1,
                    _ => items.push(WorkItem {
                        segment: seg,
                        out_rows: h..h + 1,
                    }),
                }
            }
            items
        })
        .collect()
}

/// Rule for how many channels share a tile and how many copies a pass gets.
pub(crate) struct Packing {
    pub channels_per_tile: u64,
    pub allow_copies: bool,
}

pub(crate) fn copies_for(groups: u64, n_tiles: u64, allow: bool) -> u64 {
    if allow && groups > 0 {
        (n_tiles / groups).saturating_sub(1)
    } else {
        0
    }
}

/// Channels per tile for the final pass of a multi-pass layer: the smallest
/// per-tile work `n / (copies + 1)`, ties to the larger `n`.
fn last_pass_packing(remaining: u64, max_per_tile: u64, n_tiles: u64, allow: bool) -> u64 {
    let lo = remaining.div_ceil(n_tiles).max(1);
    let mut best = lo;
    let mut best_copies = copies_for(remaining.div_ceil(lo), n_tiles, allow);
    for n in lo..=max_per_tile {
        let copies = copies_for(remaining.div_ceil(n), n_tiles, allow);
        if n * (best_copies + 1) <= best * (copies + 1) {
            best = n;
            best_copies = copies;
        }
    }
    best
}

pub(crate) fn build_passes(
    layer: &LayerSpec,
    macro_cfg: &MacroConfig,
    segments: &[Segment],
    packing: Packing,
    tm_rows_per_channel: u64,
) -> Vec<PassPlan> {
    let c = layer.channels;
    let t = macro_cfg.n_tiles;
    let nch = packing.channels_per_tile;
    if c == 0 {
        return Vec::new();
    }
    let per_pass = t * nch;
    let n_passes = c.div_ceil(nch).div_ceil(t);
    let mut passes = Vec::new();
    for p in 0..n_passes {
        let base = p * per_pass;
        let count = per_pass.min(c - base);
        let n = if n_passes == 1 || p + 1 < n_passes {
            nch
        } else {
            last_pass_packing(count, nch, t, packing.allow_copies)
        };
        let groups = count.div_ceil(n);
        let copies = copies_for(groups, t, packing.allow_copies);
        let chunks = chunk_units(segments, layer.out_height(), copies + 1);
        let mut tiles = Vec::new();
        for (ci, items) in chunks.iter().enumerate() {
            for g in 0..groups {
                let channels: Vec<u64> = (base + g * n..(base + (g + 1) * n).min(base + count)).collect();
                let tm_rows = (0..channels.len() as u64)
                    .map(|i| i * tm_rows_per_channel..(i + 1) * tm_rows_per_channel)
                    .collect();
                tiles.push(TileAssignment {
                    tile: ci as u64 * groups + g,
                    copy: ci as u64,
                    tm_rows_used: channels.len() as u64 * tm_rows_per_channel,
                    channels,
                    tm_rows,
                    items: items.clone(),
                });
            }
        }
        passes.push(PassPlan {
            channels_per_tile: n,
            copies,
            tiles,
        });
    }
    passes
}

pub(crate) fn duplicated_blocks_cap(layer: &LayerSpec, tm_rows: u64) -> Result<u64, MappingError> {
    let kernel_words = layer.kernel_h * layer.kernel_w;
    let cap = tm_rows / kernel_words;
    if cap == 0 {
        return Err(MappingError::Capacity(format!(
            "a {}x{} kernel does not fit {} TM rows",
            layer.kernel_h, layer.kernel_w, tm_rows
        )));
    }
    Ok(cap)
}

fn checked_params(layer: &LayerSpec) -> Result<(KernelGeometry, ScheduleParams), MappingError> {
    layer.check_shape()?;
    let geometry = layer.geometry()?;
    Ok((geometry, schedulable_params(geometry)?))
}

/// Shared BIG/LITTLE planning for both ConvDK dataflows.
pub(crate) fn plan_convdk(
    layer: &LayerSpec,
    macro_cfg: &MacroConfig,
    dataflow: DataflowId,
    forced: Option<Scheduler>,
) -> Result<MappingPlan, MappingError> {
    macro_cfg.validate()?;
    let (geometry, params) = checked_params(layer)?;
    let tile_width = compute_tw(macro_cfg, layer.kernel_h);
    let wp = layer.padded_width();
    let scheduler = forced.unwrap_or_else(|| select_scheduler(layer, macro_cfg));
    let kernel_words = layer.kernel_h * layer.kernel_w;
    let cap = duplicated_blocks_cap(layer, macro_cfg.tm_rows)?;
    let blocks = duplication_count(wp, tile_width, layer.kernel_w, layer.stride)?.min(cap);
    let strips = strips_for_row(geometry, layer.out_width(), blocks)?;

    let (segments, nch) = match scheduler {
        Scheduler::Big => {
            let segs = strips
                .into_iter()
                .map(|s| Segment {
                    in_start: s.in_start,
                    in_width: strip_in_width(&s, geometry),
                    strips: vec![s],
                })
                .collect();
            (segs, 1)
        }
        Scheduler::Little => {
            let by_trf = macro_cfg.trf_words / (layer.kernel_h * wp);
            if by_trf == 0 {
                return Err(MappingError::TooNarrow {
                    width: tile_width,
                    needed: wp,
                });
            }
            let by_tm = macro_cfg.tm_rows / (blocks * kernel_words);
            let segs = vec![Segment {
                in_start: 0,
                in_width: wp,
                strips,
            }];
            (segs, by_trf.min(by_tm).max(1))
        }
    };

    let tm_rows_per_channel = match dataflow {
        DataflowId::IsConvdk => {
            let widest = segments.iter().map(|s| s.in_width).max().unwrap_or(0);
            layer.kernel_h * widest
        }
        _ => blocks * kernel_words,
    };
    let passes = build_passes(
        layer,
        macro_cfg,
        &segments,
        Packing {
            channels_per_tile: nch,
            allow_copies: true,
        },
        tm_rows_per_channel,
    );
    let groups = layer.channels.div_ceil(nch);
    Ok(MappingPlan {
        layer: layer.name.clone(),
        dataflow,
        scheduler: Some(scheduler),
        tile_width,
        blocks,
        channels_per_tile: nch,
        cross_tile_copies: copies_for(groups, macro_cfg.n_tiles, true),
        tm_rows_per_channel,
        segments,
        passes,
        schedule: Some(schedule_from_params(params, blocks)?),
    })
}

/// Weight-stationary ConvDK plan; the scheduler is picked from the width.
pub fn plan_ws_convdk(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    plan_convdk(layer, macro_cfg, DataflowId::WsConvdk, None)
}

/// Forces the BIG scheduler regardless of width.
pub fn plan_big(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    plan_convdk(layer, macro_cfg, DataflowId::WsConvdk, Some(Scheduler::Big))
}

/// Forces the LITTLE scheduler; fails when one padded row slab exceeds the TRF.
pub fn plan_little(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    plan_convdk(layer, macro_cfg, DataflowId::WsConvdk, Some(Scheduler::Little))
}

/// Fraction of all TM rows holding stationary operands, averaged over passes.
pub fn utilization(plan: &MappingPlan, macro_cfg: &MacroConfig) -> f64 {
    if plan.passes.is_empty() {
        return 0.0;
    }
    let used: u64 = plan.active_tiles().map(|(_, t)| t.tm_rows_used).sum();
    used as f64 / (plan.passes.len() as f64 * macro_cfg.n_tiles as f64 * macro_cfg.tm_rows as f64)
}

fn direct_window(ifmap: &IntTensor, kernels: &IntTensor, layer: &LayerSpec, c: usize, h: u64, x: u64) -> Result<i32, EngineError> {
    let mut acc = 0i32;
    let s = layer.stride as i64;
    let p = layer.padding as i64;
    for j in 0..kernels.rows {
        for i in 0..kernels.cols {
            let v = ifmap.get_or_zero(c, h as i64 * s + j as i64 - p, x as i64 * s + i as i64 - p);
            acc = acc
                .checked_add(i32::from(kernels.get(c, j, i)) * i32::from(v))
                .ok_or(EngineError::Overflow(x))?;
        }
    }
    Ok(acc)
}

/// Runs a plan functionally. ConvDK plans go through the shift-schedule
/// engine tile by tile; baseline plans compute each window directly. Every
/// output must be written exactly once.
pub fn execute(
    layer: &LayerSpec,
    plan: &MappingPlan,
    ifmap: &IntTensor,
    kernels: &IntTensor,
) -> Result<AccumTensor, MappingError> {
    let c = layer.channels as usize;
    if ifmap.channels != c || ifmap.rows as u64 != layer.height || ifmap.cols as u64 != layer.width {
        return Err(EngineError::ShapeMismatch("ifmap does not match the layer".into()).into());
    }
    if kernels.channels != c || kernels.rows as u64 != layer.kernel_h || kernels.cols as u64 != layer.kernel_w {
        return Err(EngineError::ShapeMismatch("kernels do not match the layer".into()).into());
    }
    let (ho, wo) = (layer.out_height() as usize, layer.out_width() as usize);
    let mut out = AccumTensor::zeros(c, ho, wo);
    let mut written = vec![false; c * ho * wo];
    let mut put = |out: &mut AccumTensor, ch: usize, h: usize, x: usize, v: i32| -> Result<(), MappingError> {
        let i = out.index(ch, h, x);
        if std::mem::replace(&mut written[i], true) {
            return Err(MappingError::Coverage(format!("output ({ch}, {h}, {x}) written twice")));
        }
        out.data[i] = v;
        Ok(())
    };

    let mut schedules: BTreeMap<u64, ShiftSchedule> = BTreeMap::new();
    let pad = layer.padding as usize;
    let full_rows = layer.padded_height() as usize;
    for (_, tile) in plan.active_tiles() {
        let chans: Vec<usize> = tile.channels.iter().map(|&c| c as usize).collect();
        let tile_kernels: Vec<IntTensor> = chans.iter().map(|&c| kernels.channel(c)).collect();
        for item in &tile.items {
            let seg = &plan.segments[item.segment];
            for strip in &seg.strips {
                let Some(base) = &plan.schedule else {
                    for &ch in &chans {
                        for h in item.out_rows.clone() {
                            for x in strip.out_start..strip.out_start + strip.out_count {
                                let v = direct_window(ifmap, kernels, layer, ch, h, x)?;
                                put(&mut out, ch, h as usize, x as usize, v)?;
                            }
                        }
                    }
                    continue;
                };
                let sched = match schedules.entry(strip.blocks) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => e.insert(schedule_from_params(base.params, strip.blocks)?),
                };
                let width = sched.input_len() as usize;
                let submaps: Vec<IntTensor> = chans
                    .iter()
                    .map(|&ch| ifmap.padded_window(ch, pad, 0, strip.in_start as usize, full_rows, width))
                    .collect();
                for h in item.out_rows.clone() {
                    let emitted = dwconv_multichannel_masked(&submaps, &tile_kernels, sched, h, strip.out_count)?;
                    for e in emitted {
                        put(&mut out, chans[e.channel], h as usize, (strip.out_start + e.m) as usize, e.value)?;
                    }
                }
            }
        }
    }
    if let Some(i) = written.iter().position(|w| !w) {
        return Err(MappingError::Coverage(format!("output index {i} never written")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::plan_ws_baseline;

    fn layer(c: u64, hw: u64, k: u64, s: u64, p: u64) -> LayerSpec {
        LayerSpec {
            name: format!("c{c}_h{hw}_k{k}_s{s}"),
            channels: c,
            height: hw,
            width: hw,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: p,
        }
    }

    fn dflt() -> MacroConfig {
        MacroConfig::default()
    }

    #[test]
    fn tile_width_examples() {
        assert_eq!(compute_tw(&dflt(), 3), 60);
        assert_eq!(compute_tw(&dflt(), 1), 180);
        assert_eq!(compute_tw(&dflt(), 5), 36);
    }

    #[test]
    fn duplication_examples() {
        assert_eq!(duplication_count(112, 60, 3, 1).unwrap(), 19);
        assert_eq!(duplication_count(24, 60, 3, 1).unwrap(), 7);
        assert_eq!(duplication_count(5, 60, 3, 2).unwrap(), 1);
        assert_eq!(
            duplication_count(4, 60, 3, 2),
            Err(MappingError::TooNarrow { width: 4, needed: 5 })
        );
    }

    #[test]
    fn scheduler_selection() {
        assert_eq!(select_scheduler(&layer(32, 112, 3, 1, 0), &dflt()), Scheduler::Big);
        assert_eq!(select_scheduler(&layer(32, 24, 3, 1, 0), &dflt()), Scheduler::Little);
        assert_eq!(select_scheduler(&layer(32, 60, 3, 1, 0), &dflt()), Scheduler::Little);
        assert_eq!(select_scheduler(&layer(32, 58, 3, 1, 1), &dflt()), Scheduler::Little);
        assert_eq!(select_scheduler(&layer(32, 59, 3, 1, 1), &dflt()), Scheduler::Big);
    }

    #[test]
    fn big_plan_duplicates_across_tiles() {
        let l = layer(32, 112, 3, 1, 1);
        let plan = plan_ws_convdk(&l, &dflt()).unwrap();
        assert_eq!(plan.scheduler, Some(Scheduler::Big));
        assert_eq!(plan.cross_tile_copies, 1);
        assert_eq!(plan.passes.len(), 1);
        let pass = &plan.passes[0];
        assert_eq!(pass.tiles.len(), 64);
        for t in &pass.tiles {
            assert_eq!(t.channels, vec![t.tile % 32]);
            assert_eq!(t.copy, t.tile / 32);
        }
        plan.check_coverage(&l).unwrap();
        plan.check_capacity(&l, &dflt()).unwrap();
    }

    #[test]
    fn big_plan_64_and_96_channels() {
        let plan = plan_ws_convdk(&layer(64, 112, 3, 1, 1), &dflt()).unwrap();
        assert_eq!(plan.cross_tile_copies, 0);
        let l = layer(96, 112, 3, 2, 1);
        let plan = plan_ws_convdk(&l, &dflt()).unwrap();
        assert_eq!(plan.passes.len(), 2);
        assert_eq!(plan.passes[0].tiles.len(), 64);
        assert_eq!(plan.passes[0].copies, 0);
        assert_eq!(plan.passes[1].copies, 1);
        let second: Vec<u64> = plan.passes[1].tiles.iter().flat_map(|t| t.channels.clone()).collect();
        assert_eq!(second.len(), 64);
        assert!(second.iter().all(|&c| (64..96).contains(&c)));
        plan.check_coverage(&l).unwrap();
    }

    #[test]
    fn big_strips_overlap_by_kernel_minus_stride() {
        let l = layer(1, 112, 3, 1, 1);
        let plan = plan_ws_convdk(&l, &dflt()).unwrap();
        assert_eq!(plan.blocks, 19);
        let segs = &plan.segments;
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].in_start, segs[0].in_width), (0, 59));
        assert_eq!(segs[0].strips[0].out_count, 57);
        assert_eq!(segs[1].in_start, 57);
        assert_eq!(segs[1].strips[0].out_count, 55);
        assert_eq!(segs[1].strips[0].blocks, 19);
    }

    #[test]
    fn little_plan_two_channels_per_tile() {
        let l = layer(128, 24, 3, 1, 0);
        let plan = plan_ws_convdk(&l, &dflt()).unwrap();
        assert_eq!(plan.scheduler, Some(Scheduler::Little));
        assert_eq!(plan.channels_per_tile, 2);
        assert_eq!(plan.blocks, 7);
        assert_eq!(plan.cross_tile_copies, 0);
        assert_eq!(plan.passes.len(), 1);
        assert_eq!(plan.passes[0].tiles.len(), 64);
        plan.check_coverage(&l).unwrap();
        plan.check_capacity(&l, &dflt()).unwrap();
    }

    #[test]
    fn little_plan_64_channels_copies() {
        let plan = plan_little(&layer(64, 24, 3, 1, 0), &dflt()).unwrap();
        assert_eq!(plan.channels_per_tile, 2);
        assert_eq!(plan.cross_tile_copies, 1);
    }

    #[test]
    fn little_rejects_wide_rows() {
        assert!(matches!(
            plan_little(&layer(4, 112, 3, 1, 1), &dflt()),
            Err(MappingError::TooNarrow { .. })
        ));
    }

    #[test]
    fn little_single_channel_per_tile() {
        let l = layer(8, 58, 3, 1, 1);
        let plan = plan_ws_convdk(&l, &dflt()).unwrap();
        assert_eq!(plan.channels_per_tile, 1);
        plan.check_coverage(&l).unwrap();
    }

    #[test]
    fn multi_pass_last_pass_packing() {
        // 512 channels at 3 per tile: 171 groups, three passes.
        let l = layer(512, 14, 3, 1, 1);
        let plan = plan_ws_convdk(&l, &dflt()).unwrap();
        assert_eq!(plan.channels_per_tile, 3);
        assert_eq!(plan.passes.len(), 3);
        assert_eq!(plan.passes[2].channels_per_tile, 2);
        assert_eq!(plan.passes[2].copies, 0);
        plan.check_coverage(&l).unwrap();
    }

    #[test]
    fn utilization_examples() {
        let l = layer(64, 112, 3, 1, 1);
        let ws = plan_ws_baseline(&l, &dflt()).unwrap();
        assert!((utilization(&ws, &dflt()) - 0.05).abs() < 1e-12);
        let cd = plan_ws_convdk(&l, &dflt()).unwrap();
        assert!((utilization(&cd, &dflt()) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_channels_plan_is_empty() {
        let plan = plan_ws_convdk(&layer(0, 24, 3, 1, 1), &dflt()).unwrap();
        assert!(plan.passes.is_empty());
        assert_eq!(utilization(&plan, &dflt()), 0.0);
    }

    #[test]
    fn plans_reject_even_kernel() {
        assert!(matches!(
            plan_ws_convdk(&layer(4, 24, 4, 1, 1), &dflt()),
            Err(MappingError::Schedule(ScheduleError::ConditionViolation { .. }))
        ));
        plan_ws_baseline(&layer(4, 24, 4, 1, 1), &dflt()).unwrap();
    }

    #[test]
    fn macro_validation() {
        assert!(dflt().validate().is_ok());
        let bad = MacroConfig { n_tiles: 0, ..dflt() };
        assert!(bad.validate().is_err());
        let bad = MacroConfig { clock_hz: 0.0, ..dflt() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn macro_partial_json_uses_defaults() {
        let m: MacroConfig = serde_json::from_str(r#"{"n_tiles": 16}"#).unwrap();
        assert_eq!(m.n_tiles, 16);
        assert_eq!(m.tm_rows, 180);
        assert!(serde_json::from_str::<MacroConfig>(r#"{"tiles": 16}"#).is_err());
    }
}
