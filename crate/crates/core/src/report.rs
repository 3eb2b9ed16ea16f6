//! Network-level reports and the four-way comparison table.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{plan_for, DataflowId};
use crate::cost::{simulate_layer, CostReport, EnergyModel, EnergyReport, LatencyBreakdown, TrafficLedger};
use crate::error::Error;
use crate::mapping::{MacroConfig, MappingPlan};
use crate::workload::NetworkSpec;

pub const TOTAL_ROW: &str = "TOTAL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkReport {
    pub model: String,
    pub dataflow: DataflowId,
    pub layers: Vec<CostReport>,
    /// Sums over layers; utilization is weighted by compute cycles.
    pub aggregate: CostReport,
    /// Plain mean of per-layer utilization.
    pub utilization_mean: f64,
}

fn aggregate(dataflow: DataflowId, layers: &[CostReport]) -> (CostReport, f64) {
    let mut traffic = TrafficLedger::default();
    let mut latency = LatencyBreakdown::default();
    let mut energy = EnergyReport::default();
    let mut weighted = 0.0;
    for r in layers {
        traffic.add(&r.traffic);
        latency.add(&r.latency);
        energy.add(&r.energy);
        weighted += r.utilization * r.latency.compute_cycles as f64;
    }
    let utilization = if latency.compute_cycles > 0 {
        weighted / latency.compute_cycles as f64
    } else {
        0.0
    };
    let mean = if layers.is_empty() {
        0.0
    } else {
        layers.iter().map(|r| r.utilization).sum::<f64>() / layers.len() as f64
    };
    let report = CostReport {
        layer: TOTAL_ROW.to_string(),
        dataflow,
        scheduler: None,
        traffic,
        latency,
        energy,
        utilization,
        dram_overlapped: layers.iter().all(|r| r.dram_overlapped),
    };
    (report, mean)
}

/// Plans every layer of a network for one dataflow.
pub fn plan_network(net: &NetworkSpec, dataflow: DataflowId, macro_cfg: &MacroConfig) -> Result<Vec<MappingPlan>, Error> {
    net.layers
        .iter()
        .map(|l| plan_for(dataflow, l, macro_cfg).map_err(|e| Error::from(e).context(format!("layer {}", l.name))))
        .collect()
}

pub fn run_network(
    net: &NetworkSpec,
    dataflow: DataflowId,
    macro_cfg: &MacroConfig,
    energy: &EnergyModel,
) -> Result<NetworkReport, Error> {
    let plans = plan_network(net, dataflow, macro_cfg)?;
    let layers = net
        .layers
        .iter()
        .zip(&plans)
        .map(|(l, p)| simulate_layer(l, p, macro_cfg, energy).map_err(|e| Error::from(e).context(format!("layer {}", l.name))))
        .collect::<Result<Vec<_>, _>>()?;
    let (aggregate, utilization_mean) = aggregate(dataflow, &layers);
    Ok(NetworkReport {
        model: net.name.clone(),
        dataflow,
        layers,
        aggregate,
        utilization_mean,
    })
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// A cost report as `(dotted JSON path, value)` pairs.
pub fn flatten_report(report: &CostReport) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten_into("", &serde_json::to_value(report).expect("report serializes"), &mut out);
    out
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl NetworkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per layer plus the aggregate row. Column names are the dotted
    /// paths of the same values in the JSON report.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), Error> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header_done = false;
        for r in self.layers.iter().chain(std::iter::once(&self.aggregate)) {
            let flat = flatten_report(r);
            if !header_done {
                let mut header = vec!["model".to_string()];
                header.extend(flat.iter().map(|(k, _)| k.clone()));
                wr.write_record(&header).map_err(csv_err)?;
                header_done = true;
            }
            let mut row = vec![self.model.clone()];
            row.extend(flat.iter().map(|(_, v)| cell(v)));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, Error> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Output(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Output(e.to_string())
}

/// One `(model, dataflow)` line of the comparison. `*_norm` columns divide by
/// the weight-stationary baseline's value of the same metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub dataflow: DataflowId,
    pub utilization: f64,
    pub utilization_mean: f64,
    pub dram_bits: u64,
    pub dram_norm: f64,
    pub buffer_bits: u64,
    pub buffer_norm: f64,
    pub energy_pj: f64,
    pub energy_norm: f64,
    pub buffer_energy_pj: f64,
    pub buffer_energy_norm: f64,
    pub energy_dram_pj: f64,
    pub energy_ia_pj: f64,
    pub energy_weight_pj: f64,
    pub energy_output_pj: f64,
    pub latency_cycles: u64,
    pub latency_norm: f64,
    pub buffer_latency_cycles: u64,
    pub buffer_latency_norm: f64,
    pub latency_compute_cycles: u64,
    pub latency_trf_cycles: u64,
    pub latency_tm_cycles: u64,
    pub latency_ob_cycles: u64,
    pub latency_stall_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// `x / base`, with `0 / 0` read as parity.
pub fn normalize(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        if x == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        x / base
    }
}

impl ComparisonTable {
    /// Rows for one model from its four network reports.
    pub fn model_rows(reports: &[NetworkReport]) -> Result<Vec<ComparisonRow>, Error> {
        let base = reports
            .iter()
            .find(|r| r.dataflow == DataflowId::WsBaseline)
            .ok_or_else(|| Error::Output("comparison needs the ws-baseline run".into()))?;
        let b = &base.aggregate;
        let mut rows: Vec<ComparisonRow> = reports
            .iter()
            .map(|r| {
                let a = &r.aggregate;
                let n = |x: f64, y: f64| normalize(x, y);
                ComparisonRow {
                    model: r.model.clone(),
                    dataflow: r.dataflow,
                    utilization: a.utilization,
                    utilization_mean: r.utilization_mean,
                    dram_bits: a.traffic.dram_bits(),
                    dram_norm: n(a.traffic.dram_bits() as f64, b.traffic.dram_bits() as f64),
                    buffer_bits: a.traffic.buffer_bits(),
                    buffer_norm: n(a.traffic.buffer_bits() as f64, b.traffic.buffer_bits() as f64),
                    energy_pj: a.energy.total_pj,
                    energy_norm: n(a.energy.total_pj, b.energy.total_pj),
                    buffer_energy_pj: a.energy.on_chip_pj(),
                    buffer_energy_norm: n(a.energy.on_chip_pj(), b.energy.on_chip_pj()),
                    energy_dram_pj: a.energy.dram_pj,
                    energy_ia_pj: a.energy.ia_buffer_pj,
                    energy_weight_pj: a.energy.weight_buffer_pj,
                    energy_output_pj: a.energy.output_buffer_pj,
                    latency_cycles: a.latency.total_cycles,
                    latency_norm: n(a.latency.total_cycles as f64, b.latency.total_cycles as f64),
                    buffer_latency_cycles: a.latency.buffer_cycles(),
                    buffer_latency_norm: n(a.latency.buffer_cycles() as f64, b.latency.buffer_cycles() as f64),
                    latency_compute_cycles: a.latency.compute_cycles,
                    latency_trf_cycles: a.latency.trf_load_cycles,
                    latency_tm_cycles: a.latency.tm_write_cycles,
                    latency_ob_cycles: a.latency.ob_write_cycles,
                    latency_stall_cycles: a.latency.dram_stall_cycles,
                }
            })
            .collect();
        rows.sort_by_key(|r| r.dataflow);
        Ok(rows)
    }

    /// Runs all four dataflows on every network, in the given model order.
    pub fn build(nets: &[NetworkSpec], macro_cfg: &MacroConfig, energy: &EnergyModel) -> Result<Self, Error> {
        let mut rows = Vec::new();
        for net in nets {
            let reports = DataflowId::ALL
                .iter()
                .map(|&d| run_network(net, d, macro_cfg, energy).map_err(|e| e.context(format!("model {}", net.name))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.extend(Self::model_rows(&reports)?);
        }
        Ok(Self { rows })
    }

    pub fn row(&self, model: &str, dataflow: DataflowId) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model && r.dataflow == dataflow)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    pub fn to_csv(&self) -> Result<String, Error> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            wr.serialize(r).map_err(csv_err)?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Output(e.to_string()))
    }
}
