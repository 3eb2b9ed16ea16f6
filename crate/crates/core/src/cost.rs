//! Traffic, latency and energy accounting for a mapped layer.
//!
//! The walk visits every tile's work units in plan order. Per pass each phase
//! costs the slowest tile's clocks, since all tiles advance in lock step.
//! DRAM traffic depends only on the layer and the IB size: the IB is filled
//! in bands of output rows, channel chunk by channel chunk, and each band's
//! transfer overlaps the compute that the band feeds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::DataflowId;
use crate::mapping::{utilization, LayerSpec, MacroConfig, MappingError, MappingPlan, Scheduler};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid energy model: {0}")]
    InvalidEnergy(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// Per-bit energy constants in picojoules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub dram_pj_per_bit: f64,
    pub buffer_pj_per_bit: f64,
    pub tm_write_pj_per_bit: f64,
    pub trf_write_pj_per_bit: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            dram_pj_per_bit: 20.0,
            buffer_pj_per_bit: 1.139,
            tm_write_pj_per_bit: 0.017,
            trf_write_pj_per_bit: 0.028,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, v) in [
            ("dram_pj_per_bit", self.dram_pj_per_bit),
            ("buffer_pj_per_bit", self.buffer_pj_per_bit),
            ("tm_write_pj_per_bit", self.tm_write_pj_per_bit),
            ("trf_write_pj_per_bit", self.trf_write_pj_per_bit),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::InvalidEnergy(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Bits moved along each edge of the memory hierarchy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLedger {
    pub dram_to_ib_bits: u64,
    pub dram_to_wb_bits: u64,
    pub ob_to_dram_bits: u64,
    pub ib_to_trf_bits: u64,
    pub wb_to_tm_bits: u64,
    pub acc_to_ob_bits: u64,
    /// IAs written into the TM by the input-stationary dataflows.
    pub ib_to_tm_bits: u64,
    /// Weights streamed into the TRF by the input-stationary dataflows.
    pub wb_to_trf_bits: u64,
}

impl TrafficLedger {
    pub fn dram_bits(&self) -> u64 {
        self.dram_to_ib_bits + self.dram_to_wb_bits + self.ob_to_dram_bits
    }

    /// Traffic between the on-chip buffers and the tiles.
    pub fn buffer_bits(&self) -> u64 {
        self.ib_to_trf_bits + self.wb_to_tm_bits + self.acc_to_ob_bits + self.ib_to_tm_bits + self.wb_to_trf_bits
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            dram_to_ib_bits: self.dram_to_ib_bits * k,
            dram_to_wb_bits: self.dram_to_wb_bits * k,
            ob_to_dram_bits: self.ob_to_dram_bits * k,
            ib_to_trf_bits: self.ib_to_trf_bits * k,
            wb_to_tm_bits: self.wb_to_tm_bits * k,
            acc_to_ob_bits: self.acc_to_ob_bits * k,
            ib_to_tm_bits: self.ib_to_tm_bits * k,
            wb_to_trf_bits: self.wb_to_trf_bits * k,
        }
    }

    pub fn add(&mut self, o: &TrafficLedger) {
        self.dram_to_ib_bits += o.dram_to_ib_bits;
        self.dram_to_wb_bits += o.dram_to_wb_bits;
        self.ob_to_dram_bits += o.ob_to_dram_bits;
        self.ib_to_trf_bits += o.ib_to_trf_bits;
        self.wb_to_tm_bits += o.wb_to_tm_bits;
        self.acc_to_ob_bits += o.acc_to_ob_bits;
        self.ib_to_tm_bits += o.ib_to_tm_bits;
        self.wb_to_trf_bits += o.wb_to_trf_bits;
    }
}

/// Clock cycles per phase. `compute_steps` counts computation cycles; all
/// `*_cycles` fields are clocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub compute_steps: u64,
    pub compute_cycles: u64,
    pub trf_load_cycles: u64,
    pub tm_write_cycles: u64,
    pub ob_write_cycles: u64,
    pub dram_stall_cycles: u64,
    pub total_cycles: u64,
    pub total_seconds: f64,
}

impl LatencyBreakdown {
    /// Clocks spent moving data between the buffers and the tiles.
    pub fn buffer_cycles(&self) -> u64 {
        self.trf_load_cycles + self.tm_write_cycles + self.ob_write_cycles
    }

    fn finish(mut self, clock_hz: f64) -> Self {
        self.total_cycles = self.compute_cycles + self.buffer_cycles() + self.dram_stall_cycles;
        self.total_seconds = self.total_cycles as f64 / clock_hz;
        self
    }

    pub fn add(&mut self, o: &LatencyBreakdown) {
        self.compute_steps += o.compute_steps;
        self.compute_cycles += o.compute_cycles;
        self.trf_load_cycles += o.trf_load_cycles;
        self.tm_write_cycles += o.tm_write_cycles;
        self.ob_write_cycles += o.ob_write_cycles;
        self.dram_stall_cycles += o.dram_stall_cycles;
        self.total_cycles += o.total_cycles;
        self.total_seconds += o.total_seconds;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dram_pj: f64,
    pub buffer_pj: f64,
    pub tm_write_pj: f64,
    pub trf_write_pj: f64,
    pub total_pj: f64,
    /// Buffer-side energy split by operand, write surcharges included.
    pub ia_buffer_pj: f64,
    pub weight_buffer_pj: f64,
    pub output_buffer_pj: f64,
}

impl EnergyReport {
    /// Energy spent on the on-chip buffer edges, write surcharges included.
    pub fn on_chip_pj(&self) -> f64 {
        self.buffer_pj + self.tm_write_pj + self.trf_write_pj
    }

    pub fn add(&mut self, o: &EnergyReport) {
        self.dram_pj += o.dram_pj;
        self.buffer_pj += o.buffer_pj;
        self.tm_write_pj += o.tm_write_pj;
        self.trf_write_pj += o.trf_write_pj;
        self.total_pj += o.total_pj;
        self.ia_buffer_pj += o.ia_buffer_pj;
        self.weight_buffer_pj += o.weight_buffer_pj;
        self.output_buffer_pj += o.output_buffer_pj;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layer: String,
    pub dataflow: DataflowId,
    pub scheduler: Option<Scheduler>,
    pub traffic: TrafficLedger,
    pub latency: LatencyBreakdown,
    pub energy: EnergyReport,
    pub utilization: f64,
    pub dram_overlapped: bool,
}

pub fn energy_total(ledger: &TrafficLedger, model: &EnergyModel) -> EnergyReport {
    let b = |bits: u64| bits as f64;
    let dram_pj = b(ledger.dram_bits()) * model.dram_pj_per_bit;
    let buffer_pj = b(ledger.buffer_bits()) * model.buffer_pj_per_bit;
    let tm_write_pj = b(ledger.wb_to_tm_bits + ledger.ib_to_tm_bits) * model.tm_write_pj_per_bit;
    let trf_write_pj = b(ledger.ib_to_trf_bits + ledger.wb_to_trf_bits) * model.trf_write_pj_per_bit;
    let to_tm = model.buffer_pj_per_bit + model.tm_write_pj_per_bit;
    let to_trf = model.buffer_pj_per_bit + model.trf_write_pj_per_bit;
    EnergyReport {
        dram_pj,
        buffer_pj,
        tm_write_pj,
        trf_write_pj,
        total_pj: dram_pj + buffer_pj + tm_write_pj + trf_write_pj,
        ia_buffer_pj: b(ledger.ib_to_trf_bits) * to_trf + b(ledger.ib_to_tm_bits) * to_tm,
        weight_buffer_pj: b(ledger.wb_to_tm_bits) * to_tm + b(ledger.wb_to_trf_bits) * to_trf,
        output_buffer_pj: b(ledger.acc_to_ob_bits) * model.buffer_pj_per_bit,
    }
}

/// Clocks to write one kernel into the TM. Duplicates are written by
/// asserting several word lines at once, one extra clock per weight.
pub fn tm_write_cycles(kernel_words: u64, blocks: u64) -> u64 {
    if blocks > 1 {
        2 * kernel_words
    } else {
        kernel_words
    }
}

/// Seconds to fill the whole IB from DRAM.
pub fn ib_fill_seconds(macro_cfg: &MacroConfig) -> f64 {
    macro_cfg.ib_bytes as f64 / macro_cfg.dram_bw_bytes_per_s
}

/// One IB fill: a channel chunk and a band of output rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IbPass {
    pub channels: u64,
    pub out_rows: u64,
    pub input_bytes: u64,
    pub weight_bytes: u64,
    pub output_bytes: u64,
}

impl IbPass {
    pub fn bytes(&self) -> u64 {
        self.input_bytes + self.weight_bytes + self.output_bytes
    }
}

/// IB fills for a layer. Halo rows stay resident between bands, so each input
/// row of a channel crosses the DRAM edge once.
pub fn ib_passes(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<Vec<IbPass>, CostError> {
    if layer.channels == 0 {
        return Ok(Vec::new());
    }
    let w = layer.width;
    let slab = w * layer.kernel_h;
    if slab > macro_cfg.ib_bytes {
        return Err(CostError::Capacity(format!(
            "layer {}: one channel's {}-row slab ({slab} B) exceeds the {} B IB",
            layer.name, layer.kernel_h, macro_cfg.ib_bytes
        )));
    }
    let chunk = (macro_cfg.ib_bytes / slab).min(layer.channels);
    let rows = macro_cfg.ib_bytes / (chunk * w);
    let band = (rows - layer.kernel_h) / layer.stride + 1;
    let (ho, wo, s) = (layer.out_height(), layer.out_width(), layer.stride);
    let mut out = Vec::new();
    let mut c0 = 0;
    while c0 < layer.channels {
        let cc = chunk.min(layer.channels - c0);
        let mut loaded_to = 0;
        let mut h0 = 0;
        while h0 < ho {
            let n = band.min(ho - h0);
            let lo = (h0 * s).max(loaded_to);
            let hi = (h0 + n - 1) * s + layer.kernel_h;
            let new_rows = layer.real_span(lo, hi, layer.height);
            loaded_to = loaded_to.max(hi);
            out.push(IbPass {
                channels: cc,
                out_rows: n,
                input_bytes: cc * new_rows * w,
                weight_bytes: if h0 == 0 { cc * layer.kernel_h * layer.kernel_w } else { 0 },
                output_bytes: cc * n * wo,
            });
            h0 += n;
        }
        c0 += cc;
    }
    Ok(out)
}

/// Buffer-side work accumulated by walking the plan.
#[derive(Debug, Clone, Copy, Default)]
struct Walk {
    ledger: TrafficLedger,
    latency: LatencyBreakdown,
}

#[derive(Debug, Clone, Copy, Default)]
struct TileTally {
    steps: u64,
    ia_words: u64,
    ia_clocks: u64,
    weight_words: u64,
    weight_clocks: u64,
}

fn walk_plan(layer: &LayerSpec, plan: &MappingPlan, macro_cfg: &MacroConfig) -> Walk {
    let df = plan.dataflow;
    let s = layer.stride;
    let kh = layer.kernel_h;
    let kernel_words = kh * layer.kernel_w;
    let word = macro_cfg.word_bits;
    let seg_cols: Vec<u64> = plan
        .segments
        .iter()
        .map(|seg| layer.real_span(seg.in_start, seg.in_start + seg.in_width, layer.width))
        .collect();
    let window_cols: Vec<u64> = plan
        .segments
        .iter()
        .map(|seg| {
            seg.strips
                .iter()
                .flat_map(|st| (0..st.out_count).map(move |i| st.in_start + i * s))
                .map(|x| layer.real_span(x, x + layer.kernel_w, layer.width))
                .sum()
        })
        .collect();

    let mut walk = Walk::default();
    for pass in &plan.passes {
        let mut worst = TileTally::default();
        for tile in &pass.tiles {
            let g = tile.channels.len() as u64;
            let mut t = TileTally::default();
            let mut last: Option<(usize, u64, u64)> = None;
            for item in &tile.items {
                let seg = &plan.segments[item.segment];
                let outs = seg.outputs();
                for h in item.out_rows.clone() {
                    let top = h * s;
                    let bottom = top + kh;
                    t.steps += outs * g;
                    match df {
                        DataflowId::WsBaseline => {
                            let rows = layer.real_span(top, bottom, layer.height);
                            t.ia_words += rows * window_cols[item.segment] * g;
                            t.ia_clocks += outs * g;
                        }
                        _ => {
                            let from = match last {
                                Some((sg, lh, end)) if sg == item.segment && lh + 1 == h => top.max(end),
                                _ => top,
                            };
                            let words = layer.real_span(from, bottom, layer.height) * seg_cols[item.segment] * g;
                            t.ia_words += words;
                            t.ia_clocks += if df.input_stationary() { words } else { 1 };
                        }
                    }
                    last = Some((item.segment, h, bottom));
                }
            }
            match df {
                DataflowId::WsBaseline | DataflowId::WsConvdk => {
                    t.weight_words = g * kernel_words;
                    t.weight_clocks = g * tm_write_cycles(kernel_words, plan.blocks);
                }
                DataflowId::IsBaseline => {
                    t.weight_words = t.steps * kernel_words;
                    t.weight_clocks = t.steps;
                }
                DataflowId::IsConvdk => {
                    t.weight_words = g * plan.blocks * kernel_words;
                    t.weight_clocks = 1;
                }
            }
            let l = &mut walk.ledger;
            if df.input_stationary() {
                l.ib_to_tm_bits += t.ia_words * word;
                l.wb_to_trf_bits += t.weight_words * word;
            } else {
                l.ib_to_trf_bits += t.ia_words * word;
                l.wb_to_tm_bits += t.weight_words * word;
            }
            l.acc_to_ob_bits += t.steps * word;
            worst.steps = worst.steps.max(t.steps);
            worst.ia_clocks = worst.ia_clocks.max(t.ia_clocks);
            worst.weight_clocks = worst.weight_clocks.max(t.weight_clocks);
        }
        let lat = &mut walk.latency;
        lat.compute_steps += worst.steps;
        lat.ob_write_cycles += worst.steps;
        if df.input_stationary() {
            lat.tm_write_cycles += worst.ia_clocks;
            lat.trf_load_cycles += worst.weight_clocks;
        } else {
            lat.trf_load_cycles += worst.ia_clocks;
            lat.tm_write_cycles += worst.weight_clocks;
        }
    }
    walk.latency.compute_cycles = walk.latency.compute_steps * macro_cfg.clocks_per_compute;
    walk
}

/// Per IB fill: DRAM transfer clocks and the compute clocks it overlaps with.
fn ib_timeline(layer: &LayerSpec, macro_cfg: &MacroConfig, compute_cycles: u64) -> Result<Vec<(IbPass, f64, f64)>, CostError> {
    let passes = ib_passes(layer, macro_cfg)?;
    let total_out = layer.outputs() as f64;
    let clocks_per_byte = macro_cfg.clock_hz / macro_cfg.dram_bw_bytes_per_s;
    Ok(passes
        .into_iter()
        .map(|p| {
            let share = (p.channels * p.out_rows * layer.out_width()) as f64 / total_out;
            (p, p.bytes() as f64 * clocks_per_byte, compute_cycles as f64 * share)
        })
        .collect())
}

/// Compute clocks that overlap each IB fill.
pub fn ib_pass_compute_cycles(layer: &LayerSpec, plan: &MappingPlan, macro_cfg: &MacroConfig) -> Result<Vec<f64>, CostError> {
    let walk = walk_plan(layer, plan, macro_cfg);
    Ok(ib_timeline(layer, macro_cfg, walk.latency.compute_cycles)?
        .into_iter()
        .map(|(_, _, c)| c)
        .collect())
}

/// Phase latencies of a plan, DRAM stalls included.
pub fn latency_rules(layer: &LayerSpec, plan: &MappingPlan, macro_cfg: &MacroConfig) -> Result<LatencyBreakdown, CostError> {
    let walk = walk_plan(layer, plan, macro_cfg);
    let mut lat = walk.latency;
    let stall: f64 = ib_timeline(layer, macro_cfg, lat.compute_cycles)?
        .iter()
        .map(|&(_, dram, comp)| (dram - comp).max(0.0))
        .sum();
    lat.dram_stall_cycles = stall.ceil() as u64;
    Ok(lat.finish(macro_cfg.clock_hz))
}

/// True when every IB fill transfers within the compute it overlaps.
pub fn dram_overlap_check(layer: &LayerSpec, plan: &MappingPlan, macro_cfg: &MacroConfig) -> Result<bool, CostError> {
    let walk = walk_plan(layer, plan, macro_cfg);
    let timeline = ib_timeline(layer, macro_cfg, walk.latency.compute_cycles)?;
    Ok(timeline.iter().all(|&(p, dram, comp)| {
        if comp <= 0.0 {
            p.bytes() == 0
        } else {
            dram <= comp
        }
    }))
}

pub fn simulate_layer(
    layer: &LayerSpec,
    plan: &MappingPlan,
    macro_cfg: &MacroConfig,
    energy: &EnergyModel,
) -> Result<CostReport, CostError> {
    macro_cfg.validate()?;
    energy.validate()?;
    let mut ledger = walk_plan(layer, plan, macro_cfg).ledger;
    for p in ib_passes(layer, macro_cfg)? {
        ledger.dram_to_ib_bits += p.input_bytes * 8;
        ledger.dram_to_wb_bits += p.weight_bytes * 8;
        ledger.ob_to_dram_bits += p.output_bytes * 8;
    }
    let latency = latency_rules(layer, plan, macro_cfg)?;
    Ok(CostReport {
        layer: layer.name.clone(),
        dataflow: plan.dataflow,
        scheduler: plan.scheduler,
        energy: energy_total(&ledger, energy),
        traffic: ledger,
        latency,
        utilization: utilization(plan, macro_cfg),
        dram_overlapped: layer.channels == 0 || dram_overlap_check(layer, plan, macro_cfg)?,
    })
}
