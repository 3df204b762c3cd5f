//! Procedural generator of paired (imager-like scene, dense 3D phase
//! truth), the stand-in for real satellite archives.
//!
//! Clouds are ellipsoidal blobs rasterized into the 38-layer column grid.
//! After rasterization each contiguous cloudy run in a column is phased
//! by its top altitude: above 7 km ice, below 3 km water, mixed in
//! between. Channels follow a fixed physics proxy: TIR brightness
//! temperature drops 6.5 K per km of cloud-top altitude from a 288 K
//! clear-sky value, VIS reflectance grows with column thickness and is
//! zeroed at night. The proxy is strictly monotone in cloud-top height,
//! so the 2D -> 3D inversion the network has to learn is well posed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::colloc::{
    window_channels, ImagerScene, LabeledPatch, AUX_PLANES, LAYER_KM, NUM_LAYERS, SENTINEL,
    SPECTRAL_CHANNELS,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Phase-by-altitude thresholds on a run's top altitude (km).
pub const ICE_TOP_KM: f64 = 7.0;
pub const WATER_TOP_KM: f64 = 3.0;
/// Clear-sky TIR brightness temperature (K) and its lapse per km of top.
pub const CLEAR_BT_K: f64 = 288.0;
pub const LAPSE_K_PER_KM: f64 = 6.5;
pub const BT_FLOOR_K: f64 = 160.0;

/// Target voxel mixture over {no cloud, ice, mixed, water}: the nominal
/// 89.3 / 5.7 / 3.9 / 1.2 percent split, normalized so the fractions sum
/// to 1 (the nominal percentages add up to 100.1).
pub const DEFAULT_MIXTURE: [f64; 4] = [
    0.892107892107892,
    0.05694305694305694,
    0.03896103896103895,
    0.011988011988011986,
];

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of cloud blob count per scene.
    pub cloud_count: (u32, u32),
    /// Voxel fractions over {no cloud, ice, mixed, water}; must sum to 1.
    pub mixture: [f64; 4],
    /// Std-dev of additive Gaussian channel noise (K for TIR bands,
    /// reflectance units for VIS bands).
    pub noise_sigma: f64,
    /// UTC seconds stamped on the scene.
    pub timestamp: i64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 128,
            width: 128,
            cloud_count: (40, 55),
            mixture: DEFAULT_MIXTURE,
            noise_sigma: 0.5,
            timestamp: 1_538_352_000, // 2018-10-01T00:00:00Z
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(SynthError::InvalidSpec("size must be at least 8x8".into()));
        }
        let sum: f64 = self.mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SynthError::InvalidSpec(format!(
                "mixture fractions sum to {sum}, expected 1"
            )));
        }
        if self.mixture.iter().any(|&f| f < 0.0) {
            return Err(SynthError::InvalidSpec("negative mixture fraction".into()));
        }
        if self.cloud_count.0 > self.cloud_count.1 {
            return Err(SynthError::InvalidSpec("cloud_count range inverted".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated scene plus its dense voxel truth `[NUM_LAYERS, H, W]`.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub scene: ImagerScene,
    pub dense: Vec<u8>,
}

/// Per-class blob geometry: phase code, altitude band of the centre (km),
/// vertical semi-axis band (km), horizontal semi-axis band (pixels).
const BLOB_BANDS: [(u8, [f64; 2], [f64; 2], [f64; 2]); 3] = [
    (1, [8.0, 11.0], [0.75, 1.5], [14.0, 28.0]),
    (2, [4.0, 5.5], [0.6, 1.2], [10.0, 20.0]),
    (3, [0.9, 1.8], [0.4, 0.8], [6.0, 13.0]),
];

/// Converts voxel-share targets into per-class blob pick weights using
/// the mean blob volume of each class (with an edge-clipping allowance).
fn blob_class_weights(mixture: &[f64; 4]) -> [f64; 3] {
    let mut weights = [0.0; 3];
    for (i, (_, _, ra, rh)) in BLOB_BANDS.iter().enumerate() {
        let mean_rh = (rh[0] + rh[1]) / 2.0;
        let mean_ra_layers = (ra[0] + ra[1]) / 2.0 / LAYER_KM;
        let volume = 4.0 / 3.0 * std::f64::consts::PI * mean_rh * mean_rh * mean_ra_layers;
        weights[i] = mixture[i + 1] / (volume * 0.8);
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in &mut weights {
            *w /= total;
        }
    }
    weights
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// TIR brightness temperature for a column whose highest cloud top sits
/// at `top_alt_km` (`None` = clear). Strictly decreasing in the top
/// altitude until the floor.
pub fn tir_bt(top_alt_km: Option<f64>, band_offset: f64) -> f64 {
    let base = match top_alt_km {
        None => CLEAR_BT_K,
        Some(alt) => CLEAR_BT_K - LAPSE_K_PER_KM * alt,
    };
    (base + band_offset).max(BT_FLOOR_K)
}

/// Deterministically generates one scene with dense truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);

    // geometry stream: geo grid and viewing angles
    let mut geo = rng_stream(spec.seed, 1);
    let lat0: f64 = geo.gen_range(-45.0..45.0);
    let lon0: f64 = geo.gen_range(100.0..150.0);
    let lat_axis: Vec<f64> = (0..h).map(|r| lat0 - 0.02 * r as f64).collect();
    let lon_axis: Vec<f64> = (0..w).map(|c| lon0 + 0.02 * c as f64).collect();
    let sat_base: f64 = geo.gen_range(10.0..40.0);
    let sol_base: f64 = geo.gen_range(20.0..95.0);
    let mut sat_zenith = vec![0.0f32; h * w];
    let mut sol_zenith = vec![0.0f32; h * w];
    let mut night = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let frac = x as f64 / (w - 1) as f64;
            let sat = sat_base + 20.0 * frac;
            let sol = sol_base + 25.0 * frac;
            sat_zenith[y * w + x] = sat as f32;
            sol_zenith[y * w + x] = sol as f32;
            night[y * w + x] = sol > 90.0;
        }
    }

    // blob stream: rasterize ellipsoidal clouds
    let mut blobs = rng_stream(spec.seed, 2);
    let count = if spec.cloud_count.1 == 0 {
        0
    } else {
        blobs.gen_range(spec.cloud_count.0..=spec.cloud_count.1)
    };
    let weights = blob_class_weights(&spec.mixture);
    let mut cloudy = vec![false; NUM_LAYERS * h * w];
    for _ in 0..count {
        let pick: f64 = blobs.gen();
        let class_idx = if pick < weights[0] {
            0
        } else if pick < weights[0] + weights[1] {
            1
        } else {
            2
        };
        let (_, alt_band, ra_band, rh_band) = BLOB_BANDS[class_idx];
        let cy: f64 = blobs.gen_range(0.0..h as f64);
        let cx: f64 = blobs.gen_range(0.0..w as f64);
        let ca: f64 = blobs.gen_range(alt_band[0]..alt_band[1]);
        let ra: f64 = blobs.gen_range(ra_band[0]..ra_band[1]);
        let ry: f64 = blobs.gen_range(rh_band[0]..rh_band[1]);
        let rx: f64 = blobs.gen_range(rh_band[0]..rh_band[1]);
        let y_lo = (cy - ry).floor().max(0.0) as usize;
        let y_hi = ((cy + ry).ceil() as usize).min(h - 1);
        let x_lo = (cx - rx).floor().max(0.0) as usize;
        let x_hi = ((cx + rx).ceil() as usize).min(w - 1);
        for d in 0..NUM_LAYERS {
            let alt = LAYER_KM * d as f64 + LAYER_KM / 2.0;
            let za = (alt - ca) / ra;
            if za.abs() > 1.0 {
                continue;
            }
            let remaining = 1.0 - za * za;
            for y in y_lo..=y_hi {
                let dy = (y as f64 - cy) / ry;
                let lead = dy * dy;
                if lead > remaining {
                    continue;
                }
                for x in x_lo..=x_hi {
                    let dx = (x as f64 - cx) / rx;
                    if lead + dx * dx <= remaining {
                        cloudy[(d * h + y) * w + x] = true;
                    }
                }
            }
        }
    }

    // phase each contiguous cloudy run by its top altitude
    let mut dense = vec![0u8; NUM_LAYERS * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut d = 0;
            while d < NUM_LAYERS {
                if !cloudy[(d * h + y) * w + x] {
                    d += 1;
                    continue;
                }
                let start = d;
                while d < NUM_LAYERS && cloudy[(d * h + y) * w + x] {
                    d += 1;
                }
                let top_km = LAYER_KM * d as f64;
                let phase = if top_km > ICE_TOP_KM {
                    1
                } else if top_km < WATER_TOP_KM {
                    3
                } else {
                    2
                };
                for di in start..d {
                    dense[(di * h + y) * w + x] = phase;
                }
            }
        }
    }

    // channel synthesis from the per-column proxy
    let mut noise_rng = rng_stream(spec.seed, 3);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("finite sigma");
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        if spec.noise_sigma == 0.0 {
            0.0
        } else {
            normal.sample(rng)
        }
    };
    let mut channels = vec![0.0f32; SPECTRAL_CHANNELS * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut top: Option<f64> = None;
            let mut cloudy_layers = 0usize;
            for d in 0..NUM_LAYERS {
                if dense[(d * h + y) * w + x] != 0 {
                    cloudy_layers += 1;
                    top = Some(LAYER_KM * (d + 1) as f64);
                }
            }
            let thickness_km = LAYER_KM * cloudy_layers as f64;
            let is_night = night[y * w + x];
            for band in 0..SPECTRAL_CHANNELS {
                let value = if band < 6 {
                    let factor = 0.75 + 0.05 * band as f64;
                    let refl = ((thickness_km / 4.0).min(1.0) * factor
                        + noise(&mut noise_rng))
                    .clamp(0.0, 1.0);
                    if is_night {
                        0.0
                    } else {
                        refl
                    }
                } else {
                    let offset = (band as f64 - 10.5) * 0.3;
                    tir_bt(top, offset) + noise(&mut noise_rng)
                };
                channels[(band * h + y) * w + x] = value as f32;
            }
        }
    }

    let scene = ImagerScene {
        timestamp: spec.timestamp,
        lat_axis,
        lon_axis,
        channels,
        sat_zenith,
        sol_zenith,
        night,
    };
    scene
        .validate()
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(SynthScene { scene, dense })
}

/// Samples a straight cross-scene track: a random line entering one edge
/// and exiting the opposite one, walked at unit arc steps with each
/// sample snapped to the nearest pixel.
pub fn sample_track(h: usize, w: usize, seed: u64) -> (Vec<bool>, Vec<(usize, usize)>) {
    let mut rng = rng_stream(seed, 4);
    let horizontal: bool = rng.gen();
    let (p0, p1) = if horizontal {
        (
            (rng.gen_range(0..h) as f64, 0.0),
            (rng.gen_range(0..h) as f64, (w - 1) as f64),
        )
    } else {
        (
            (0.0, rng.gen_range(0..w) as f64),
            ((h - 1) as f64, rng.gen_range(0..w) as f64),
        )
    };
    let length = ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt();
    let steps = (length.floor() as usize).max(1);
    let mut mask = vec![false; h * w];
    let mut path = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let y = ((p0.0 + t * (p1.0 - p0.0)).round() as usize).min(h - 1);
        let x = ((p0.1 + t * (p1.1 - p0.1)).round() as usize).min(w - 1);
        if !mask[y * w + x] {
            mask[y * w + x] = true;
            path.push((y, x));
        }
    }
    (mask, path)
}

/// Generates `count` labeled patches with sparse track labels and the
/// dense truth attached. Per-patch seeds derive from `base_seed`, so the
/// whole dataset is a pure function of the template spec.
pub fn synth_patches(template: &SceneSpec, count: usize) -> Result<Vec<LabeledPatch>> {
    template.validate()?;
    let specs: Vec<SceneSpec> = (0..count)
        .map(|i| {
            let mut spec = template.clone();
            spec.seed = template
                .seed
                .wrapping_add(1 + (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            spec.timestamp = template.timestamp + (i as i64) * 600;
            spec
        })
        .collect();
    let results = crate::threads::parallel_map(specs.len(), |i| synth_patch(&specs[i]));
    results.into_iter().collect()
}

fn synth_patch(spec: &SceneSpec) -> Result<LabeledPatch> {
    let SynthScene { scene, dense } = generate_scene(spec)?;
    let (h, w) = (spec.height, spec.width);
    let (mask, _) = sample_track(h, w, spec.seed);
    let mut labels = vec![SENTINEL; NUM_LAYERS * h * w];
    for p in 0..h * w {
        if mask[p] {
            for d in 0..NUM_LAYERS {
                labels[d * h * w + p] = dense[d * h * w + p];
            }
        }
    }
    let patch = LabeledPatch {
        channels: window_channels(&scene, 0, 0, h, w),
        num_channels: SPECTRAL_CHANNELS + AUX_PLANES,
        height: h,
        width: w,
        labels,
        mask,
        dense: Some(dense),
    };
    patch
        .validate()
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(patch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_scene_bitwise() {
        let spec = SceneSpec {
            seed: 99,
            height: 32,
            width: 32,
            cloud_count: (4, 8),
            ..SceneSpec::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.dense, b.dense);
        assert!(a
            .scene
            .channels
            .iter()
            .zip(b.scene.channels.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.scene.lat_axis, b.scene.lat_axis);
    }

    #[test]
    fn different_seeds_differ() {
        let mut spec = SceneSpec {
            height: 32,
            width: 32,
            ..SceneSpec::default()
        };
        spec.seed = 1;
        let a = generate_scene(&spec).unwrap();
        spec.seed = 2;
        let b = generate_scene(&spec).unwrap();
        assert_ne!(a.dense, b.dense);
    }

    #[test]
    fn zero_clouds_means_clear_labels_and_warm_tir() {
        let spec = SceneSpec {
            seed: 5,
            height: 16,
            width: 16,
            cloud_count: (0, 0),
            noise_sigma: 0.0,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec).unwrap();
        assert!(s.dense.iter().all(|&v| v == 0));
        // TIR bands sit at 288 K plus the small per-band offset
        for band in 6..SPECTRAL_CHANNELS {
            let offset = (band as f64 - 10.5) * 0.3;
            for &v in &s.scene.channels[band * 256..(band + 1) * 256] {
                assert!((v as f64 - (CLEAR_BT_K + offset)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn cloudy_runs_obey_the_altitude_phase_rule() {
        let spec = SceneSpec {
            seed: 1234,
            height: 48,
            width: 48,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec).unwrap();
        let (h, w) = (48, 48);
        let mut saw_cloud = false;
        for y in 0..h {
            for x in 0..w {
                let mut d = 0;
                while d < NUM_LAYERS {
                    if s.dense[(d * h + y) * w + x] == 0 {
                        d += 1;
                        continue;
                    }
                    let start = d;
                    let phase = s.dense[(d * h + y) * w + x];
                    while d < NUM_LAYERS && s.dense[(d * h + y) * w + x] != 0 {
                        assert_eq!(s.dense[(d * h + y) * w + x], phase, "run phase mixed");
                        d += 1;
                    }
                    saw_cloud = true;
                    let top_km = LAYER_KM * d as f64;
                    let expect = if top_km > ICE_TOP_KM {
                        1
                    } else if top_km < WATER_TOP_KM {
                        3
                    } else {
                        2
                    };
                    assert_eq!(phase, expect, "run ending at {top_km} km (start {start})");
                }
            }
        }
        assert!(saw_cloud);
    }

    #[test]
    fn tir_proxy_is_strictly_monotone_until_floor() {
        let mut prev = tir_bt(None, 0.0);
        for k in 1..=38 {
            let bt = tir_bt(Some(0.5 * k as f64), 0.0);
            assert!(bt < prev, "top {} km: {bt} !< {prev}", 0.5 * k as f64);
            assert!(bt >= BT_FLOOR_K);
            prev = bt;
        }
    }

    #[test]
    fn mixture_over_many_scenes_tracks_the_spec() {
        let mut counts = [0u64; 4];
        for i in 0..100 {
            let spec = SceneSpec {
                seed: 1000 + i,
                ..SceneSpec::default()
            };
            let s = generate_scene(&spec).unwrap();
            for &v in &s.dense {
                counts[v as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        for (k, &target) in DEFAULT_MIXTURE.iter().enumerate() {
            let got = counts[k] as f64 / total as f64;
            assert!(
                (got - target).abs() < 0.05,
                "class {k}: realized {got:.4}, target {target:.4}"
            );
        }
    }

    #[test]
    fn track_mask_count_stays_in_the_line_bounds() {
        for seed in 0..30 {
            let (mask, path) = sample_track(128, 128, seed);
            let count = mask.iter().filter(|m| **m).count();
            assert!(
                (128..=182).contains(&count),
                "seed {seed}: {count} pixels"
            );
            assert_eq!(count, path.len());
        }
    }

    #[test]
    fn track_lines_differ_between_seeds() {
        let (a, _) = sample_track(64, 64, 1);
        let (b, _) = sample_track(64, 64, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn patch_labels_copy_dense_truth_on_the_track() {
        let spec = SceneSpec {
            seed: 7,
            height: 32,
            width: 32,
            ..SceneSpec::default()
        };
        let patches = synth_patches(&spec, 2).unwrap();
        assert_eq!(patches.len(), 2);
        for patch in &patches {
            let dense = patch.dense.as_ref().unwrap();
            for p in 0..32 * 32 {
                for d in 0..NUM_LAYERS {
                    let label = patch.labels[d * 32 * 32 + p];
                    if patch.mask[p] {
                        assert_eq!(label, dense[d * 32 * 32 + p]);
                    } else {
                        assert_eq!(label, SENTINEL);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_meets_the_throughput_floor() {
        let spec = SceneSpec::default(); // 128x128, 38 layers
        let start = std::time::Instant::now();
        let _ = generate_scene(&spec).unwrap();
        assert!(start.elapsed() < std::time::Duration::from_secs(1));
    }

    #[test]
    fn spec_validation_rejects_bad_mixtures() {
        let mut spec = SceneSpec::default();
        spec.mixture = [0.5, 0.5, 0.5, 0.0];
        assert!(spec.validate().is_err());
        spec.mixture = [1.2, -0.2, 0.0, 0.0];
        assert!(spec.validate().is_err());
        spec.mixture = DEFAULT_MIXTURE;
        spec.cloud_count = (5, 2);
        assert!(spec.validate().is_err());
    }
}
