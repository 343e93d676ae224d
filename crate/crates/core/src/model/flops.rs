//! Closed-form attention-stage FLOPs for a Swin-style baseline and the
//! shared multi-granularity core, evaluated in exact integer arithmetic.

use serde::{Deserialize, Serialize};

/// One layer's inputs: token grid `h x w`, width `c`, window side `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerSpec>,
    pub per_layer: Vec<u128>,
    pub total: u128,
}

impl FlopsReport {
    fn from_terms(layers: &[LayerSpec], term: impl Fn(&LayerSpec) -> u128) -> Self {
        let per_layer: Vec<u128> = layers.iter().map(term).collect();
        let total = per_layer.iter().sum();
        Self { layers: layers.to_vec(), per_layer, total }
    }
}

/// `4 H W C^2 + 2 H W C M^2` per layer.
pub fn swin_layer(l: &LayerSpec) -> u128 {
    let (h, w, c, m) = (l.h as u128, l.w as u128, l.c as u128, l.m as u128);
    4 * h * w * c * c + 2 * h * w * c * m * m
}

/// `3 H W C^2 + 2 H W C M_l^2 + 3 H W C` per layer.
pub fn grc_layer(l: &LayerSpec) -> u128 {
    let (h, w, c, m) = (l.h as u128, l.w as u128, l.c as u128, l.m as u128);
    3 * h * w * c * c + 2 * h * w * c * m * m + 3 * h * w * c
}

pub fn flops_swin(layers: &[LayerSpec]) -> FlopsReport {
    FlopsReport::from_terms(layers, swin_layer)
}

pub fn flops_grc(layers: &[LayerSpec]) -> FlopsReport {
    FlopsReport::from_terms(layers, grc_layer)
}

/// A named pair of layer lists evaluated under both formulas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    pub swin: Vec<LayerSpec>,
    pub grc: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub name: String,
    pub swin: u128,
    pub grc: u128,
    pub ratio: f64,
}

pub fn evaluate(entry: &SweepEntry) -> SweepRow {
    let swin = flops_swin(&entry.swin).total;
    let grc = flops_grc(&entry.grc).total;
    let ratio = if swin == 0 { f64::NAN } else { grc as f64 / swin as f64 };
    SweepRow { name: entry.name.clone(), swin, grc, ratio }
}

fn stage_layers(stages: &[(u64, u64, usize)], window: u64) -> Vec<LayerSpec> {
    stages
        .iter()
        .flat_map(|&(res, c, depth)| std::iter::repeat_n(LayerSpec { h: res, w: res, c, m: window.min(res) }, depth))
        .collect()
}

/// Reference sweep: a single 56x56 C=96 M=7 layer, then for each granularity
/// the Swin-T stage list (resolutions 56/28/14/7, widths 96..768, depths
/// 2/2/6/2, window 7) against the same stages truncated to the stage
/// resolutions that granularity covers (56,28 / 56,28,14 / 56,28,14,7)
/// with `M_l = min(7, resolution)`.
pub fn reference_sweep() -> Vec<SweepEntry> {
    let single = vec![LayerSpec { h: 56, w: 56, c: 96, m: 7 }];
    let stages: [(u64, u64, usize); 4] = [(56, 96, 2), (28, 192, 2), (14, 384, 6), (7, 768, 2)];
    let swin = stage_layers(&stages, 7);
    let mut out = vec![SweepEntry { name: "layer-56x56-c96-m7".into(), swin: single.clone(), grc: single }];
    for (g, n) in [(1, 2), (2, 3), (3, 4)] {
        out.push(SweepEntry { name: format!("swin-t-vs-g{g}"), swin: swin.clone(), grc: stage_layers(&stages[..n], 7) });
    }
    out
}
