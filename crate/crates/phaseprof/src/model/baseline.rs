//! Plain per-pixel encoder-decoder baseline for the comparison harness.

use std::collections::BTreeMap;

use crate::tensor::{Graph, Padding, Result, TensorError, Var};

use super::ModelConfig;

/// 2D encoder, 1x1 head emitting `N*D` channels, reshape to the volume
/// layout and softmax. Same output contract as the SGMAGNet forward.
pub fn baseline_forward(
    g: &mut Graph,
    x: Var,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "baseline_forward",
            expected: 4,
            got: shape,
        });
    }
    if shape[1] != cfg.in_channels {
        return Err(TensorError::ChannelMismatch {
            op: "baseline_forward",
            expected: cfg.in_channels,
            got: shape[1],
        });
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut cur = x;
    for i in 0..2 {
        let wv = vars[&format!("base_enc{i}.weight")];
        let bv = vars[&format!("base_enc{i}.bias")];
        let conv = g.conv2d(cur, wv, bv, 1, Padding::Same)?;
        if cur != x {
            g.release(cur);
        }
        cur = g.relu(conv)?;
        g.release(conv);
    }
    let head = g.conv2d(
        cur,
        vars["base_head.weight"],
        vars["base_head.bias"],
        1,
        Padding::Same,
    )?;
    g.release(cur);
    let volume = g.reshape(head, &[b, cfg.num_classes, cfg.height_dim, h, w])?;
    g.release(head);
    let probs = g.softmax(volume, 1)?;
    g.release(volume);
    Ok(probs)
}
