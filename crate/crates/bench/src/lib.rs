//! Shared fixtures for the criterion benches.

use convdk_core::LayerSpec;

/// Representative layers: one BIG, one LITTLE, one 5x5 strided.
pub fn fixture_layers() -> Vec<LayerSpec> {
    [(32, 112, 3, 1), (128, 24, 3, 1), (96, 28, 5, 2)]
        .into_iter()
        .enumerate()
        .map(|(i, (c, hw, k, s))| LayerSpec {
            name: format!("bench{i}"),
            channels: c,
            height: hw,
            width: hw,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: (k - 1) / 2,
        })
        .collect()
}
