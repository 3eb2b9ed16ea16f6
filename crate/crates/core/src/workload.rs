//! Depthwise layer tables: built-in networks and JSON layer files.
//!
//! A layer file is a JSON object:
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "layers": [
//!     {"name": "dw1", "channels": 32, "height": 112, "width": 112,
//!      "kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1}
//!   ]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::conv_out_len;
use crate::mapping::LayerSpec;
use crate::schedule::check_conditions;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("layer `{layer}`: {reason}")]
    Validation { layer: String, reason: String },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Checks one layer's shape and the three schedule conditions.
pub fn validate_layer(layer: &LayerSpec) -> Result<(), WorkloadError> {
    let fail = |reason: String| WorkloadError::Validation {
        layer: layer.name.clone(),
        reason,
    };
    layer.check_shape().map_err(|e| fail(e.to_string()))?;
    let geometry = layer.geometry().map_err(|e| fail(e.to_string()))?;
    let report = check_conditions(geometry).map_err(|e| fail(e.to_string()))?;
    if !report.cond1 {
        return Err(fail(format!(
            "kernel_w={} with stride {} violates condition 1 (kernel width odd and stride below it)",
            layer.kernel_w, layer.stride
        )));
    }
    if !report.cond2 {
        return Err(fail(format!(
            "condition 2 fails: m1*{s} = n1*{k} + 1 has no solution",
            s = layer.stride,
            k = layer.kernel_w
        )));
    }
    if !report.cond3 {
        return Err(fail("condition 3 fails: gcd(m1, l) != 1".into()));
    }
    Ok(())
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.layers.iter().try_for_each(validate_layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }
}

pub fn parse_network(text: &str) -> Result<NetworkSpec, WorkloadError> {
    let spec: NetworkSpec = serde_json::from_str(text).map_err(|e| WorkloadError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_network(path: &Path) -> Result<NetworkSpec, WorkloadError> {
    let text = fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text)
}

pub fn save_network(spec: &NetworkSpec, path: &Path) -> Result<(), WorkloadError> {
    fs::write(path, spec.to_json() + "\n").map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `(channels, kernel, stride)` for each depthwise layer in order. Spatial
/// sizes follow from the input resolution: a stride-2 3x3 stem, then each
/// depthwise layer in turn (pointwise layers keep the size).
type DwTable = &'static [(u64, u64, u64)];

// MobileNetV1: the 13 "Conv dw" rows of the body table.
const MOBILENET_V1: DwTable = &[
    (32, 3, 1),
    (64, 3, 2),
    (128, 3, 1),
    (128, 3, 2),
    (256, 3, 1),
    (256, 3, 2),
    (512, 3, 1),
    (512, 3, 1),
    (512, 3, 1),
    (512, 3, 1),
    (512, 3, 1),
    (512, 3, 2),
    (1024, 3, 1),
];

// MobileNetV2: one depthwise conv per bottleneck; channels are the expanded
// width (t * c_in), stride on the first block of each stage.
const MOBILENET_V2: DwTable = &[
    (32, 3, 1),  // t=1, c=16
    (96, 3, 2),  // t=6, c=24, n=2
    (144, 3, 1),
    (144, 3, 2), // c=32, n=3
    (192, 3, 1),
    (192, 3, 1),
    (192, 3, 2), // c=64, n=4
    (384, 3, 1),
    (384, 3, 1),
    (384, 3, 1),
    (384, 3, 1), // c=96, n=3
    (576, 3, 1),
    (576, 3, 1),
    (576, 3, 2), // c=160, n=3
    (960, 3, 1),
    (960, 3, 1),
    (960, 3, 1), // c=320
];

// MobileNetV3-Large: expansion size, kernel and stride of each bneck.
const MOBILENET_V3_LARGE: DwTable = &[
    (16, 3, 1),
    (64, 3, 2),
    (72, 3, 1),
    (72, 5, 2),
    (120, 5, 1),
    (120, 5, 1),
    (240, 3, 2),
    (200, 3, 1),
    (184, 3, 1),
    (184, 3, 1),
    (480, 3, 1),
    (672, 3, 1),
    (672, 5, 2),
    (960, 5, 1),
    (960, 5, 1),
];

// MobileNetV3-Small.
const MOBILENET_V3_SMALL: DwTable = &[
    (16, 3, 2),
    (72, 3, 2),
    (88, 3, 1),
    (96, 5, 2),
    (240, 5, 1),
    (240, 5, 1),
    (120, 5, 1),
    (144, 5, 1),
    (288, 5, 2),
    (576, 5, 1),
    (576, 5, 1),
];

// EfficientNet-B0: MBConv stages (expand, kernel, stride, repeats)
// 1/3/1/1, 6/3/2/2, 6/5/2/2, 6/3/2/3, 6/5/1/3, 6/5/2/4, 6/3/1/1.
const EFFICIENTNET_B0: DwTable = &[
    (32, 3, 1),
    (96, 3, 2),
    (144, 3, 1),
    (144, 5, 2),
    (240, 5, 1),
    (240, 3, 2),
    (480, 3, 1),
    (480, 3, 1),
    (480, 5, 1),
    (672, 5, 1),
    (672, 5, 1),
    (672, 5, 2),
    (1152, 5, 1),
    (1152, 5, 1),
    (1152, 5, 1),
    (1152, 3, 1),
];

pub const BUILTIN_NAMES: [&str; 5] = [
    "mobilenet_v1",
    "mobilenet_v2",
    "mobilenet_v3_large",
    "mobilenet_v3_small",
    "efficientnet_b0",
];

pub const DEFAULT_RESOLUTION: u64 = 224;

fn table(name: &str) -> Option<DwTable> {
    Some(match name {
        "mobilenet_v1" => MOBILENET_V1,
        "mobilenet_v2" => MOBILENET_V2,
        "mobilenet_v3_large" => MOBILENET_V3_LARGE,
        "mobilenet_v3_small" => MOBILENET_V3_SMALL,
        "efficientnet_b0" => EFFICIENTNET_B0,
        _ => return None,
    })
}

fn expand(name: &str, rows: DwTable, resolution: u64) -> Result<NetworkSpec, WorkloadError> {
    let too_small = || WorkloadError::Validation {
        layer: name.to_string(),
        reason: format!("resolution {resolution} too small"),
    };
    let mut size = conv_out_len(resolution as usize, 1, 3, 2).ok_or_else(too_small)? as u64;
    let mut layers = Vec::with_capacity(rows.len());
    for (i, &(channels, k, s)) in rows.iter().enumerate() {
        let padding = (k - 1) / 2;
        let layer = LayerSpec {
            name: format!("dw{:02}", i + 1),
            channels,
            height: size,
            width: size,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding,
        };
        validate_layer(&layer)?;
        size = layer.out_height();
        layers.push(layer);
    }
    Ok(NetworkSpec {
        name: name.to_string(),
        layers,
    })
}

/// One built-in network at the given input resolution.
pub fn builtin(name: &str, resolution: u64) -> Result<NetworkSpec, WorkloadError> {
    let rows = table(name).ok_or_else(|| WorkloadError::UnknownModel(name.to_string()))?;
    expand(name, rows, resolution)
}

/// All five built-in networks at 224x224.
pub fn builtin_models() -> Vec<NetworkSpec> {
    BUILTIN_NAMES
        .iter()
        .map(|n| builtin(n, DEFAULT_RESOLUTION).expect("builtin tables are valid"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(net: &NetworkSpec) -> Vec<(u64, u64, u64, u64)> {
        net.layers.iter().map(|l| (l.channels, l.height, l.kernel_w, l.stride)).collect()
    }

    #[test]
    fn mobilenet_v1_table() {
        let net = builtin("mobilenet_v1", 224).unwrap();
        assert_eq!(net.layers.len(), 13);
        assert_eq!(shapes(&net)[0], (32, 112, 3, 1));
        assert_eq!(shapes(&net)[12], (1024, 7, 3, 1));
        assert_eq!(net.layers[12].out_height(), 7);
    }

    #[test]
    fn published_spatial_sizes() {
        let sizes = |n: &str| -> Vec<u64> { builtin(n, 224).unwrap().layers.iter().map(|l| l.height).collect() };
        assert_eq!(
            sizes("mobilenet_v2"),
            vec![112, 112, 56, 56, 28, 28, 28, 14, 14, 14, 14, 14, 14, 14, 7, 7, 7]
        );
        assert_eq!(
            sizes("mobilenet_v3_large"),
            vec![112, 112, 56, 56, 28, 28, 28, 14, 14, 14, 14, 14, 14, 7, 7]
        );
        assert_eq!(sizes("mobilenet_v3_small"), vec![112, 56, 28, 28, 14, 14, 14, 14, 14, 7, 7]);
        assert_eq!(
            sizes("efficientnet_b0"),
            vec![112, 112, 56, 56, 28, 28, 14, 14, 14, 14, 14, 14, 7, 7, 7, 7]
        );
        for net in builtin_models() {
            assert_eq!(net.layers.last().unwrap().out_height(), 7, "{}", net.name);
        }
    }

    #[test]
    fn builtins_have_five_by_five() {
        for n in ["mobilenet_v3_large", "mobilenet_v3_small", "efficientnet_b0"] {
            assert!(builtin(n, 224).unwrap().layers.iter().any(|l| l.kernel_w == 5));
        }
    }

    #[test]
    fn builtins_validate() {
        let nets = builtin_models();
        assert_eq!(nets.len(), 5);
        assert_eq!(nets.iter().map(|n| n.layers.len()).collect::<Vec<_>>(), vec![13, 17, 15, 11, 16]);
        for net in nets {
            net.validate().unwrap();
        }
    }

    #[test]
    fn resolution_override() {
        let net = builtin("mobilenet_v1", 160).unwrap();
        assert_eq!(net.layers[0].height, 80);
        assert!(builtin("mobilenet_v1", 0).is_err());
        assert!(matches!(builtin("resnet50", 224), Err(WorkloadError::UnknownModel(_))));
    }

    #[test]
    fn parse_two_layers() {
        let text = r#"{"name": "t", "layers": [
            {"name": "a", "channels": 8, "height": 16, "width": 16, "kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1},
            {"name": "b", "channels": 8, "height": 16, "width": 16, "kernel_h": 5, "kernel_w": 5, "stride": 2, "padding": 2}
        ]}"#;
        let net = parse_network(text).unwrap();
        assert_eq!(net.layers.len(), 2);
        assert_eq!(parse_network(&net.to_json()).unwrap(), net);
    }

    #[test]
    fn even_kernel_names_condition_one() {
        let text = r#"{"name": "t", "layers": [
            {"name": "bad", "channels": 8, "height": 16, "width": 16, "kernel_h": 4, "kernel_w": 4, "stride": 1, "padding": 1}
        ]}"#;
        let err = parse_network(text).unwrap_err();
        assert!(matches!(err, WorkloadError::Validation { .. }));
        assert!(err.to_string().contains("condition 1"), "{err}");
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_network("{\n  \"name\": \"t\",\n  \"layers\": [ oops ]\n}").unwrap_err();
        match err {
            WorkloadError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = builtin("mobilenet_v3_small", 224).unwrap();
        save_network(&net, &path).unwrap();
        assert_eq!(load_network(&path).unwrap(), net);
        assert!(matches!(load_network(&dir.path().join("missing.json")), Err(WorkloadError::Io { .. })));
    }
}
