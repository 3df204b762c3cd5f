//! Labeled patch extraction around matched track pixels.

use std::collections::BTreeMap;

use super::{
    CollocError, ImagerScene, LabeledPatch, LayerLabelVector, Result, AUX_PLANES, NUM_LAYERS,
    SENTINEL, SPECTRAL_CHANNELS,
};

/// Copies a scene window into the patch channel layout: the 16 spectral
/// channels verbatim, then the normalized auxiliary planes
/// `[lat/90, lon/180, cos(solar zenith), night]`.
pub(crate) fn window_channels(
    scene: &ImagerScene,
    origin_r: usize,
    origin_c: usize,
    win_h: usize,
    win_w: usize,
) -> Vec<f32> {
    let w = scene.width();
    let h = scene.height();
    let num_channels = SPECTRAL_CHANNELS + AUX_PLANES;
    let plane = win_h * win_w;
    let mut channels = vec![0.0f32; num_channels * plane];
    for ch in 0..SPECTRAL_CHANNELS {
        for py in 0..win_h {
            let src = (ch * h + origin_r + py) * w + origin_c;
            let dst = (ch * win_h + py) * win_w;
            channels[dst..dst + win_w].copy_from_slice(&scene.channels[src..src + win_w]);
        }
    }
    let aux = SPECTRAL_CHANNELS * plane;
    for py in 0..win_h {
        for px in 0..win_w {
            let (sy, sx) = (origin_r + py, origin_c + px);
            let scene_idx = sy * w + sx;
            let local = py * win_w + px;
            channels[aux + local] = (scene.lat_axis[sy] / 90.0) as f32;
            channels[aux + plane + local] = (scene.lon_axis[sx] / 180.0) as f32;
            channels[aux + 2 * plane + local] =
                (scene.sol_zenith[scene_idx] as f64).to_radians().cos() as f32;
            channels[aux + 3 * plane + local] =
                if scene.night[scene_idx] { 1.0 } else { 0.0 };
        }
    }
    channels
}

/// Cuts labeled patches out of a scene.
///
/// The scene is tiled into stride-aligned cells; each matched pixel
/// belongs to exactly one cell, and every cell holding at least one
/// matched pixel becomes a patch (cells at the far edges shift inward so
/// the window stays inside the scene). With the default stride = patch
/// the windows are non-overlapping; a smaller stride gives overlapping
/// sampling. Channels are copied verbatim and the four auxiliary planes
/// `[lat/90, lon/180, cos(solar zenith), night]` are appended.
pub fn extract_patches(
    scene: &ImagerScene,
    matched: &[((usize, usize), LayerLabelVector)],
    patch: usize,
    stride: usize,
) -> Result<Vec<LabeledPatch>> {
    scene.validate()?;
    let (h, w) = (scene.height(), scene.width());
    if h < patch || w < patch {
        return Err(CollocError::SceneTooSmall { h, w, patch });
    }
    if stride == 0 || stride > patch {
        return Err(CollocError::InvalidStride { stride, patch });
    }
    let mut cells: BTreeMap<(usize, usize), Vec<((usize, usize), &LayerLabelVector)>> =
        BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for ((r, c), vector) in matched {
        if !seen.insert((*r, *c)) {
            return Err(CollocError::DuplicatePixel(*r, *c));
        }
        if *r >= h || *c >= w {
            return Err(CollocError::InvalidPatch(format!(
                "matched pixel ({r},{c}) outside the {h}x{w} scene"
            )));
        }
        cells
            .entry((r / stride, c / stride))
            .or_default()
            .push(((*r, *c), vector));
    }
    let mut out = Vec::with_capacity(cells.len());
    for ((cell_r, cell_c), pixels) in cells {
        let origin_r = (cell_r * stride).min(h - patch);
        let origin_c = (cell_c * stride).min(w - patch);
        let channels = window_channels(scene, origin_r, origin_c, patch, patch);
        let num_channels = SPECTRAL_CHANNELS + AUX_PLANES;
        let mut labels = vec![SENTINEL; NUM_LAYERS * patch * patch];
        let mut mask = vec![false; patch * patch];
        for ((r, c), vector) in pixels {
            let local = (r - origin_r) * patch + (c - origin_c);
            mask[local] = true;
            for (d, &v) in vector.as_slice().iter().enumerate() {
                labels[d * patch * patch + local] = v;
            }
        }
        let built = LabeledPatch {
            channels,
            num_channels,
            height: patch,
            width: patch,
            labels,
            mask,
            dense: None,
        };
        built.validate()?;
        out.push(built);
    }
    Ok(out)
}
