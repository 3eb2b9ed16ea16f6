//! Comparison dataflows: the weight-stationary and input-stationary
//! baselines, and input-stationary ConvDK.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mapping::{
    build_passes, compute_tw, duplicated_blocks_cap, plan_convdk, plan_ws_convdk, LayerSpec, MacroConfig,
    MappingError, MappingPlan, Packing, Segment, Strip,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataflowId {
    WsBaseline,
    IsBaseline,
    WsConvdk,
    IsConvdk,
}

impl DataflowId {
    pub const ALL: [DataflowId; 4] = [
        DataflowId::WsBaseline,
        DataflowId::IsBaseline,
        DataflowId::WsConvdk,
        DataflowId::IsConvdk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DataflowId::WsBaseline => "ws-baseline",
            DataflowId::IsBaseline => "is-baseline",
            DataflowId::WsConvdk => "ws-convdk",
            DataflowId::IsConvdk => "is-convdk",
        }
    }

    pub fn uses_shift_schedule(self) -> bool {
        matches!(self, DataflowId::WsConvdk | DataflowId::IsConvdk)
    }

    pub fn input_stationary(self) -> bool {
        matches!(self, DataflowId::IsBaseline | DataflowId::IsConvdk)
    }
}

impl fmt::Display for DataflowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown dataflow `{0}` (expected ws-baseline, is-baseline, ws-convdk or is-convdk)")]
pub struct UnknownDataflow(pub String);

impl FromStr for DataflowId {
    type Err = UnknownDataflow;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        DataflowId::ALL
            .into_iter()
            .find(|d| d.as_str() == norm)
            .ok_or_else(|| UnknownDataflow(s.to_string()))
    }
}

/// Input-stationary ConvDK: IAs in the TM, the duplicated kernel in the TRF.
pub fn plan_is_convdk(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    let swapped = macro_cfg.with_swapped_operands();
    plan_convdk(layer, &swapped, DataflowId::IsConvdk, None)
}

/// One kernel per tile, one IA window per output.
pub fn plan_ws_baseline(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    macro_cfg.validate()?;
    layer.check_shape()?;
    let kernel_words = layer.kernel_h * layer.kernel_w;
    duplicated_blocks_cap(layer, macro_cfg.tm_rows)?;
    let strips = (0..layer.out_width())
        .map(|x| Strip {
            out_start: x,
            out_count: 1,
            in_start: x * layer.stride,
            blocks: 1,
        })
        .collect();
    let segments = vec![Segment {
        in_start: 0,
        in_width: layer.padded_width(),
        strips,
    }];
    let passes = build_passes(
        layer,
        macro_cfg,
        &segments,
        Packing {
            channels_per_tile: 1,
            allow_copies: false,
        },
        kernel_words,
    );
    Ok(MappingPlan {
        layer: layer.name.clone(),
        dataflow: DataflowId::WsBaseline,
        scheduler: None,
        tile_width: compute_tw(macro_cfg, layer.kernel_h),
        blocks: 1,
        channels_per_tile: 1,
        cross_tile_copies: 0,
        tm_rows_per_channel: kernel_words,
        segments,
        passes,
        schedule: None,
    })
}

/// Output columns per input-stationary TM fill, shrunk until the fill fits.
pub fn is_fill_outputs(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<u64, MappingError> {
    let mut fill = macro_cfg.is_fill_outputs.min(layer.out_width());
    while fill > 0 && layer.kernel_h * ((fill - 1) * layer.stride + layer.kernel_w) > macro_cfg.tm_rows {
        fill -= 1;
    }
    if fill == 0 {
        return Err(MappingError::Capacity(format!(
            "a {}x{} IA window does not fit {} TM rows",
            layer.kernel_h, layer.kernel_w, macro_cfg.tm_rows
        )));
    }
    Ok(fill)
}

/// Sub-ifmap segments stationary in the TM, weights streamed per output.
pub fn plan_is_baseline(layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    macro_cfg.validate()?;
    layer.check_shape()?;
    let fill = is_fill_outputs(layer, macro_cfg)?;
    let s = layer.stride;
    let wo = layer.out_width();
    let mut segments = Vec::new();
    let mut start = 0;
    while start < wo {
        let count = fill.min(wo - start);
        segments.push(Segment {
            in_start: start * s,
            in_width: (count - 1) * s + layer.kernel_w,
            strips: vec![Strip {
                out_start: start,
                out_count: count,
                in_start: start * s,
                blocks: 1,
            }],
        });
        start += count;
    }
    let tm_rows_per_channel = layer.kernel_h * ((fill - 1) * s + layer.kernel_w).min(layer.padded_width());
    let passes = build_passes(
        layer,
        macro_cfg,
        &segments,
        Packing {
            channels_per_tile: 1,
            allow_copies: false,
        },
        tm_rows_per_channel,
    );
    Ok(MappingPlan {
        layer: layer.name.clone(),
        dataflow: DataflowId::IsBaseline,
        scheduler: None,
        tile_width: compute_tw(macro_cfg, layer.kernel_h),
        blocks: 1,
        channels_per_tile: 1,
        cross_tile_copies: 0,
        tm_rows_per_channel,
        segments,
        passes,
        schedule: None,
    })
}

pub fn plan_for(dataflow: DataflowId, layer: &LayerSpec, macro_cfg: &MacroConfig) -> Result<MappingPlan, MappingError> {
    match dataflow {
        DataflowId::WsBaseline => plan_ws_baseline(layer, macro_cfg),
        DataflowId::IsBaseline => plan_is_baseline(layer, macro_cfg),
        DataflowId::WsConvdk => plan_ws_convdk(layer, macro_cfg),
        DataflowId::IsConvdk => plan_is_convdk(layer, macro_cfg),
    }
}
