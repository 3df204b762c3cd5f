//! Collocation of profiler shots with imager scenes.
//!
//! A shot is matched to the temporally closest scene inside a +/-5 minute
//! window, then to the nearest pixel by great-circle distance. Its
//! base/top/phase layer triples are binned onto the fixed 38-layer
//! half-kilometre grid, shots landing on one pixel are merged by
//! plurality vote, and 128x128 patches with sparse label masks are cut
//! around the track.

mod binning;
mod matching;
mod patches;
mod pipeline;

pub use binning::{aggregate_continuous, aggregate_shots, bin_profile};
pub use matching::{haversine_m, match_spatial, match_temporal};
pub use patches::extract_patches;
pub(crate) use patches::window_channels;
pub use pipeline::{collocate, CollocStats};

use thiserror::Error;

/// Vertical layers of every phase profile: 0-19 km at 500 m.
pub const NUM_LAYERS: usize = 38;
/// Layer thickness in km.
pub const LAYER_KM: f64 = 0.5;
/// Top of the profiled column in km.
pub const MAX_ALT_KM: f64 = 19.0;
/// Phase classes: 0 no cloud, 1 ice, 2 mixed, 3 liquid.
pub const NUM_CLASSES: usize = 4;
/// Label value marking an unlabeled voxel.
pub const SENTINEL: u8 = 255;
/// Spectral channels of an imager scene.
pub const SPECTRAL_CHANNELS: usize = 16;
/// Auxiliary planes appended to patches: lat, lon, cos solar zenith, night.
pub const AUX_PLANES: usize = 4;

#[derive(Debug, Error)]
pub enum CollocError {
    #[error("cloud layer base {base} must satisfy 0 <= base < top <= {MAX_ALT_KM} (top {top})")]
    InvalidLayer { base: f64, top: f64 },
    #[error("phase code {0} outside 1..=3")]
    InvalidPhase(u8),
    #[error("cloud layers overlap after sorting by base")]
    OverlappingLayers,
    #[error("label value {0} outside 0..=3")]
    InvalidLabel(u8),
    #[error("no shots to aggregate")]
    EmptyShots,
    #[error("scene {h}x{w} smaller than patch size {patch}")]
    SceneTooSmall { h: usize, w: usize, patch: usize },
    #[error("stride {stride} must be in 1..={patch}")]
    InvalidStride { stride: usize, patch: usize },
    #[error("pixel ({0}, {1}) appears twice in the matched list")]
    DuplicatePixel(usize, usize),
    #[error("scene validation failed: {0}")]
    InvalidScene(String),
    #[error("patch validation failed: {0}")]
    InvalidPatch(String),
}

pub type Result<T> = std::result::Result<T, CollocError>;

/// One reported cloud layer of a profiler shot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudLayer {
    pub base_km: f64,
    pub top_km: f64,
    pub phase: u8,
}

impl CloudLayer {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_km >= 0.0 && self.base_km < self.top_km && self.top_km <= MAX_ALT_KM) {
            return Err(CollocError::InvalidLayer {
                base: self.base_km,
                top: self.top_km,
            });
        }
        if !(1..=3).contains(&self.phase) {
            return Err(CollocError::InvalidPhase(self.phase));
        }
        Ok(())
    }
}

/// One active-sensor footprint: time, position, layer triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilerShot {
    /// UTC seconds.
    pub time: i64,
    pub lat: f64,
    pub lon: f64,
    pub layers: Vec<CloudLayer>,
}

impl ProfilerShot {
    /// Checks layer bounds and that the layers are non-overlapping once
    /// sorted by base (touching boundaries are fine).
    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            layer.validate()?;
        }
        let mut sorted: Vec<&CloudLayer> = self.layers.iter().collect();
        sorted.sort_by(|a, b| a.base_km.total_cmp(&b.base_km));
        for pair in sorted.windows(2) {
            if pair[1].base_km < pair[0].top_km {
                return Err(CollocError::OverlappingLayers);
            }
        }
        Ok(())
    }
}

/// Per-pixel vertical label vector: 38 phase codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLabelVector(pub [u8; NUM_LAYERS]);

impl LayerLabelVector {
    pub fn clear() -> Self {
        LayerLabelVector([0; NUM_LAYERS])
    }

    pub fn from_array(values: [u8; NUM_LAYERS]) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|v| **v > 3) {
            return Err(CollocError::InvalidLabel(bad));
        }
        Ok(LayerLabelVector(values))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

/// A regular-grid imager scene: 16 spectral channels plus viewing
/// geometry. Latitude varies along rows, longitude along columns; both
/// axes are strictly monotone.
#[derive(Debug, Clone)]
pub struct ImagerScene {
    /// UTC seconds.
    pub timestamp: i64,
    /// Per-row latitude, degrees in [-90, 90].
    pub lat_axis: Vec<f64>,
    /// Per-column longitude, degrees in [-180, 180].
    pub lon_axis: Vec<f64>,
    /// Row-major `[16, H, W]`: reflectance for VIS bands, brightness
    /// temperature (K) for TIR bands.
    pub channels: Vec<f32>,
    /// Degrees, `[H, W]`.
    pub sat_zenith: Vec<f32>,
    /// Degrees, `[H, W]`.
    pub sol_zenith: Vec<f32>,
    /// Per-pixel nighttime flag, `[H, W]`.
    pub night: Vec<bool>,
}

impl ImagerScene {
    pub fn height(&self) -> usize {
        self.lat_axis.len()
    }

    pub fn width(&self) -> usize {
        self.lon_axis.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CollocError::InvalidScene(m));
        let (h, w) = (self.height(), self.width());
        if h == 0 || w == 0 {
            return fail("empty grid".into());
        }
        if self.lat_axis.iter().any(|v| !(-90.0..=90.0).contains(v)) {
            return fail("latitude outside [-90, 90]".into());
        }
        if self.lon_axis.iter().any(|v| !(-180.0..=180.0).contains(v)) {
            return fail("longitude outside [-180, 180]".into());
        }
        if !strictly_monotone(&self.lat_axis) || !strictly_monotone(&self.lon_axis) {
            return fail("geo axes must be strictly monotone".into());
        }
        if self.channels.len() != SPECTRAL_CHANNELS * h * w {
            return fail(format!(
                "expected {} channel values, got {}",
                SPECTRAL_CHANNELS * h * w,
                self.channels.len()
            ));
        }
        for (name, len) in [
            ("sat_zenith", self.sat_zenith.len()),
            ("sol_zenith", self.sol_zenith.len()),
            ("night", self.night.len()),
        ] {
            if len != h * w {
                return fail(format!("{name} has {len} values, expected {}", h * w));
            }
        }
        Ok(())
    }
}

fn strictly_monotone(axis: &[f64]) -> bool {
    axis.len() < 2
        || axis.windows(2).all(|p| p[0] < p[1])
        || axis.windows(2).all(|p| p[0] > p[1])
}

/// A labeled training patch: imager channels + aux planes, sparse 38-layer
/// labels and the pixel mask saying where labels exist.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    /// Row-major `[C, H, W]`.
    pub channels: Vec<f32>,
    pub num_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `[NUM_LAYERS, H, W]`; 255 where no label exists.
    pub labels: Vec<u8>,
    /// Row-major `[H, W]`.
    pub mask: Vec<bool>,
    /// Optional dense truth `[NUM_LAYERS, H, W]` (synthetic scenes).
    pub dense: Option<Vec<u8>>,
}

impl LabeledPatch {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CollocError::InvalidPatch(m));
        let (h, w) = (self.height, self.width);
        if self.channels.len() != self.num_channels * h * w {
            return fail("channel buffer size mismatch".into());
        }
        if self.labels.len() != NUM_LAYERS * h * w || self.mask.len() != h * w {
            return fail("label/mask buffer size mismatch".into());
        }
        for p in 0..h * w {
            for d in 0..NUM_LAYERS {
                let v = self.labels[d * h * w + p];
                if self.mask[p] {
                    if v > 3 {
                        return fail(format!("labeled voxel holds {v}"));
                    }
                } else if v != SENTINEL {
                    return fail("unmasked voxel not set to the sentinel".into());
                }
            }
        }
        if let Some(dense) = &self.dense {
            if dense.len() != NUM_LAYERS * h * w {
                return fail("dense truth size mismatch".into());
            }
            if dense.iter().any(|&v| v > 3) {
                return fail("dense truth holds a value outside 0..=3".into());
            }
        }
        Ok(())
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_validation_catches_bad_bounds() {
        assert!(CloudLayer { base_km: 1.0, top_km: 1.0, phase: 1 }.validate().is_err());
        assert!(CloudLayer { base_km: 2.0, top_km: 1.0, phase: 1 }.validate().is_err());
        assert!(CloudLayer { base_km: -0.5, top_km: 1.0, phase: 1 }.validate().is_err());
        assert!(CloudLayer { base_km: 1.0, top_km: 19.5, phase: 1 }.validate().is_err());
        assert!(CloudLayer { base_km: 1.0, top_km: 2.0, phase: 0 }.validate().is_err());
        assert!(CloudLayer { base_km: 1.0, top_km: 2.0, phase: 4 }.validate().is_err());
        assert!(CloudLayer { base_km: 1.0, top_km: 2.0, phase: 2 }.validate().is_ok());
    }

    #[test]
    fn shot_validation_allows_touching_layers() {
        let shot = ProfilerShot {
            time: 0,
            lat: 0.0,
            lon: 0.0,
            layers: vec![
                CloudLayer { base_km: 2.0, top_km: 3.0, phase: 2 },
                CloudLayer { base_km: 0.5, top_km: 2.0, phase: 3 },
            ],
        };
        assert!(shot.validate().is_ok());
        let overlapping = ProfilerShot {
            layers: vec![
                CloudLayer { base_km: 0.5, top_km: 2.1, phase: 3 },
                CloudLayer { base_km: 2.0, top_km: 3.0, phase: 2 },
            ],
            ..shot
        };
        assert!(matches!(
            overlapping.validate(),
            Err(CollocError::OverlappingLayers)
        ));
    }

    #[test]
    fn label_vector_rejects_out_of_range_codes() {
        let mut values = [0u8; NUM_LAYERS];
        values[5] = 4;
        assert!(LayerLabelVector::from_array(values).is_err());
    }

    #[test]
    fn patch_validation_enforces_sentinel_off_mask() {
        let mut patch = LabeledPatch {
            channels: vec![0.0; 2 * 4],
            num_channels: 2,
            height: 2,
            width: 2,
            labels: vec![SENTINEL; NUM_LAYERS * 4],
            mask: vec![false; 4],
            dense: None,
        };
        assert!(patch.validate().is_ok());
        patch.mask[1] = true;
        assert!(patch.validate().is_err()); // masked pixel still sentinel
        for d in 0..NUM_LAYERS {
            patch.labels[d * 4 + 1] = 2;
        }
        assert!(patch.validate().is_ok());
        patch.labels[3] = 1; // unmasked pixel 0 labeled
        assert!(patch.validate().is_err());
    }
}
