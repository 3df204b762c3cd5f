//! The four SGMAGNet stages, composed over a [`Graph`].
//!
//! Each stage only releases buffers it created itself, so callers can run
//! the stages individually; [`forward`] strings them together and frees
//! dead activations on inference graphs.

use std::collections::BTreeMap;

use crate::tensor::{Graph, Padding, Result, TensorError, Var};

use super::ModelConfig;

fn wb(vars: &BTreeMap<String, Var>, name: &str) -> (Var, Var) {
    let w = *vars
        .get(&format!("{name}.weight"))
        .unwrap_or_else(|| panic!("missing parameter '{name}.weight'"));
    let b = *vars
        .get(&format!("{name}.bias"))
        .unwrap_or_else(|| panic!("missing parameter '{name}.bias'"));
    (w, b)
}

/// 2D conv encoder: `encoder_depth` stride-1 3x3 blocks with ReLU,
/// channel path C -> E -> ... -> E. Spatial size is preserved.
pub fn encode_spatial(
    g: &mut Graph,
    x: Var,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "encode_spatial",
            expected: 4,
            got: shape,
        });
    }
    if shape[1] != cfg.in_channels {
        return Err(TensorError::ChannelMismatch {
            op: "encode_spatial",
            expected: cfg.in_channels,
            got: shape[1],
        });
    }
    let mut h = x;
    for i in 0..cfg.encoder_depth {
        let (w, b) = wb(vars, &format!("enc{i}"));
        let conv = g.conv2d(h, w, b, 1, Padding::Same)?;
        if h != x {
            g.release(h);
        }
        h = g.relu(conv)?;
        g.release(conv);
    }
    Ok(h)
}

/// Replicates the `[1, H_dim, E]` height embedding across batch and width,
/// yielding `[B, H_dim, W, E]`. Rows never mix across layers.
pub fn height_features(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    batch: usize,
    width: usize,
) -> Result<Var> {
    let embed = *vars
        .get("height_embed")
        .expect("missing parameter 'height_embed'");
    let lifted = g.reshape(embed, &[1, cfg.height_dim, 1, cfg.embed_dim])?;
    let out = g.expand(lifted, &[batch, cfg.height_dim, width, cfg.embed_dim]);
    g.release(lifted);
    out
}

/// Lifts 2D features into a 3D column by broadcast addition:
/// `volume[b,e,d,h,w] = f_spatial[b,e,h,w] + embed[d,e]`.
///
/// `f_height` is the width-replicated embedding from [`height_features`];
/// since all replicas are identical the (b=0, w=0) slice recovers the
/// per-layer table that is actually added.
pub fn fuse(g: &mut Graph, f_spatial: Var, f_height: Var, cfg: &ModelConfig) -> Result<Var> {
    let fs = g.shape(f_spatial).to_vec();
    let fh = g.shape(f_height).to_vec();
    if fs.len() != 4 || fh.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "fuse",
            expected: 4,
            got: if fs.len() != 4 { fs } else { fh },
        });
    }
    let (b, e, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let d = fh[1];
    if fh != [b, d, w, e] || e != cfg.embed_dim || d != cfg.height_dim {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            a: fs,
            b: fh,
        });
    }
    let b0 = g.narrow(f_height, 0, 0, 1)?;
    let w0 = g.narrow(b0, 2, 0, 1)?;
    g.release(b0);
    let table = g.permute(w0, &[0, 3, 1, 2])?; // [1, E, D, 1]
    g.release(w0);
    let table5 = g.reshape(table, &[1, e, d, 1, 1])?;
    g.release(table);
    let spatial5 = g.reshape(f_spatial, &[b, e, 1, h, w])?;
    let volume = g.broadcast_add(spatial5, table5)?;
    g.release(spatial5);
    g.release(table5);
    Ok(volume)
}

/// Multi-scale volumetric generator: per scale, resample -> 3x3x3 conv +
/// ReLU -> resample back; concatenate branches on the channel axis and
/// fuse with a 1x1x1 conv.
pub fn multiscale_generate(
    g: &mut Graph,
    volume: Var,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let vs = g.shape(volume).to_vec();
    if vs.len() != 5 {
        return Err(TensorError::RankMismatch {
            op: "multiscale_generate",
            expected: 5,
            got: vs,
        });
    }
    if vs[2] != cfg.height_dim {
        return Err(TensorError::ShapeMismatch {
            op: "multiscale_generate",
            a: vs,
            b: vec![cfg.height_dim],
        });
    }
    let full = [vs[2], vs[3], vs[4]];
    let mut branches = Vec::with_capacity(cfg.scales.len());
    for (i, scale) in cfg.scales.iter().enumerate() {
        let (w, b) = wb(vars, &format!("scale{i}"));
        let branch_in = if scale.is_one() {
            volume
        } else {
            g.interp3d(volume, scale.as_f64())?
        };
        let conv = g.conv3d(branch_in, w, b, 1, Padding::Same)?;
        if branch_in != volume {
            g.release(branch_in);
        }
        let act = g.relu(conv)?;
        g.release(conv);
        let out = if scale.is_one() {
            act
        } else {
            let up = g.interp3d_to(act, full)?;
            g.release(act);
            up
        };
        branches.push(out);
    }
    let cat = if branches.len() == 1 {
        branches[0]
    } else {
        let cat = g.concat(&branches, 1)?;
        for v in &branches {
            g.release(*v);
        }
        cat
    };
    let (w, b) = wb(vars, "fuse");
    let fused = g.conv3d(cat, w, b, 1, Padding::Same)?;
    g.release(cat);
    let out = g.relu(fused)?;
    g.release(fused);
    Ok(out)
}

/// Phase-aware gating: a 3x3x3 conv block, a 1x1x1 conv down to the class
/// count, then softmax over the class axis.
pub fn phase_gate(
    g: &mut Graph,
    features: Var,
    vars: &BTreeMap<String, Var>,
    _cfg: &ModelConfig,
) -> Result<Var> {
    let (w0, b0) = wb(vars, "gate0");
    let (w1, b1) = wb(vars, "gate1");
    let conv = g.conv3d(features, w0, b0, 1, Padding::Same)?;
    let act = g.relu(conv)?;
    g.release(conv);
    let logits = g.conv3d(act, w1, b1, 1, Padding::Same)?;
    g.release(act);
    let probs = g.softmax(logits, 1)?;
    g.release(logits);
    Ok(probs)
}

/// Full SGMAGNet forward pass: `[B,C,H,W]` -> `[B,N,D,H,W]` voxel
/// probabilities.
pub fn forward(
    g: &mut Graph,
    x: Var,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "forward",
            expected: 4,
            got: shape,
        });
    }
    let (b, w) = (shape[0], shape[3]);
    let f_spatial = encode_spatial(g, x, vars, cfg)?;
    let f_height = height_features(g, vars, cfg, b, w)?;
    let volume = fuse(g, f_spatial, f_height, cfg)?;
    g.release(f_spatial);
    g.release(f_height);
    let generated = multiscale_generate(g, volume, vars, cfg)?;
    g.release(volume);
    let probs = phase_gate(g, generated, vars, cfg)?;
    g.release(generated);
    Ok(probs)
}
