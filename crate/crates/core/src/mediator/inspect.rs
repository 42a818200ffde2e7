//! First-layer weight report, grouped by input block.

use std::fmt::Write as _;

use super::MediatorModel;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeight {
    pub block: &'static str,
    pub size: usize,
    pub mean_abs_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstLayerReport {
    /// `|W|` of the first layer, `hidden x input`, row-major.
    pub abs_weights: Vec<f64>,
    pub hidden: usize,
    pub inputs: usize,
    pub blocks: Vec<BlockWeight>,
}

impl FirstLayerReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,size,mean_abs_weight\n");
        for b in &self.blocks {
            let _ = writeln!(out, "{},{},{}", b.block, b.size, b.mean_abs_weight);
        }
        out
    }
}

/// Mean absolute first-layer weight per input block. Blocks absent from a
/// reduced-input model are omitted.
pub fn inspect_first_layer(model: &MediatorModel) -> FirstLayerReport {
    let n = model.num_committee;
    let layer = &model.layers[0];
    let abs_weights: Vec<f64> = layer.weights.iter().map(|w| w.abs()).collect();
    let layout = [
        ("relationship", n),
        ("affinity", n + 1),
        ("neighbor_mean", 2 * (n + 1)),
        ("neighbor_var", 2 * (n + 1)),
    ];
    let mut blocks = Vec::new();
    let mut start = 0;
    for (block, size) in layout {
        if size == 0 {
            continue;
        }
        let end = (start + size).min(layer.inputs);
        if end <= start {
            break;
        }
        let total: f64 = abs_weights
            .chunks_exact(layer.inputs)
            .map(|row| row[start..end].iter().sum::<f64>())
            .sum();
        let count = (end - start) * layer.outputs;
        blocks.push(BlockWeight {
            block,
            size: end - start,
            mean_abs_weight: total / count as f64,
        });
        start = end;
    }
    FirstLayerReport {
        abs_weights,
        hidden: layer.outputs,
        inputs: layer.inputs,
        blocks,
    }
}
