//! Scene-level collocation driver.

use std::collections::BTreeMap;

use super::{
    aggregate_shots, bin_profile, extract_patches, match_spatial, match_temporal, ImagerScene,
    LabeledPatch, LayerLabelVector, ProfilerShot, Result,
};
use crate::threads;

#[derive(Debug, Clone, Default)]
pub struct CollocStats {
    pub shots_total: usize,
    pub shots_matched: usize,
    pub pixels_labeled: usize,
    pub patches: usize,
    pub mask_density: f64,
}

/// Matches every shot to a scene and pixel, aggregates per-pixel votes,
/// and cuts patches. Scenes are processed in timestamp order (ties by
/// input order) and may run on worker threads; the output ordering is
/// (scene, patch row, patch col) regardless of scheduling.
pub fn collocate(
    scenes: &[ImagerScene],
    shots: &[ProfilerShot],
    window_s: i64,
    patch: usize,
    stride: usize,
) -> Result<(Vec<LabeledPatch>, CollocStats)> {
    for scene in scenes {
        scene.validate()?;
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by_key(|&i| (scenes[i].timestamp, i));
    let times: Vec<i64> = order.iter().map(|&i| scenes[i].timestamp).collect();

    let mut per_scene: Vec<BTreeMap<(usize, usize), Vec<LayerLabelVector>>> =
        vec![BTreeMap::new(); scenes.len()];
    let mut matched_shots = 0usize;
    for shot in shots {
        shot.validate()?;
        let Some(slot) = match_temporal(shot.time, &times, window_s) else {
            continue;
        };
        matched_shots += 1;
        let scene = &scenes[order[slot]];
        let pixel = match_spatial(shot.lat, shot.lon, scene);
        let vector = bin_profile(&shot.layers)?;
        per_scene[order[slot]].entry(pixel).or_default().push(vector);
    }

    let mut pixels_labeled = 0usize;
    let mut jobs: Vec<(usize, Vec<((usize, usize), LayerLabelVector)>)> = Vec::new();
    for &i in &order {
        if per_scene[i].is_empty() {
            continue;
        }
        let mut matched = Vec::with_capacity(per_scene[i].len());
        for (pixel, vectors) in &per_scene[i] {
            matched.push((*pixel, aggregate_shots(vectors)?));
        }
        pixels_labeled += matched.len();
        jobs.push((i, matched));
    }

    let results = threads::parallel_map(jobs.len(), |j| {
        let (scene_idx, matched) = &jobs[j];
        extract_patches(&scenes[*scene_idx], matched, patch, stride)
    });
    let mut patches = Vec::new();
    for r in results {
        patches.extend(r?);
    }

    let cells: usize = patches.iter().map(|p| p.height * p.width).sum();
    let covered: usize = patches.iter().map(|p| p.mask_count()).sum();
    let stats = CollocStats {
        shots_total: shots.len(),
        shots_matched: matched_shots,
        pixels_labeled,
        patches: patches.len(),
        mask_density: if cells == 0 {
            0.0
        } else {
            covered as f64 / cells as f64
        },
    };
    Ok((patches, stats))
}
