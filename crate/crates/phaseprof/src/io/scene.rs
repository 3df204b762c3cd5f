//! Imager scene files: a flat binary payload with a JSON sidecar header.
//!
//! `<name>.json` describes dims, channel names, timestamp and the regular
//! geo grid; `<name>.bin` holds, little-endian: the f32 channel block
//! `[16,H,W]`, f32 satellite zenith `[H,W]`, f32 solar zenith `[H,W]`,
//! and the u8 night-flag plane `[H,W]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{corrupt, io_err, Cursor, IoError, Result};
use crate::colloc::{ImagerScene, SPECTRAL_CHANNELS};

pub const LAYOUT: &str = "channels_f32le[16,H,W];sat_zenith_f32le[H,W];sol_zenith_f32le[H,W];night_u8[H,W]";

#[derive(Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneHeader {
    pub version: u16,
    pub timestamp_utc: i64,
    pub height: usize,
    pub width: usize,
    pub channel_names: Vec<String>,
    pub grid: GridSpec,
    pub layout: String,
}

fn default_channel_names() -> Vec<String> {
    (1..=SPECTRAL_CHANNELS).map(|i| format!("B{i:02}")).collect()
}

/// Writes `<stem>.json` + `<stem>.bin`. The scene's geo axes must be
/// regular (constant step) since the sidecar stores origin + step.
pub fn save_scene(stem: &Path, scene: &ImagerScene) -> Result<()> {
    scene
        .validate()
        .map_err(|e| IoError::Invalid {
            path: stem.display().to_string(),
            detail: e.to_string(),
        })?;
    let (h, w) = (scene.height(), scene.width());
    let dlat = if h > 1 { scene.lat_axis[1] - scene.lat_axis[0] } else { -0.02 };
    let dlon = if w > 1 { scene.lon_axis[1] - scene.lon_axis[0] } else { 0.02 };
    let header = SceneHeader {
        version: 1,
        timestamp_utc: scene.timestamp,
        height: h,
        width: w,
        channel_names: default_channel_names(),
        grid: GridSpec {
            lat0: scene.lat_axis[0],
            dlat,
            lon0: scene.lon_axis[0],
            dlon,
        },
        layout: LAYOUT.to_string(),
    };
    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    super::write_atomic(&json_path, |wr| {
        wr.write_all(text.as_bytes()).map_err(|e| io_err(&json_path, e))
    })?;
    let bin_path = stem.with_extension("bin");
    super::write_atomic(&bin_path, |wr| {
        let mut put = |bytes: &[u8]| wr.write_all(bytes).map_err(|e| io_err(&bin_path, e));
        for &v in &scene.channels {
            put(&v.to_le_bytes())?;
        }
        for &v in &scene.sat_zenith {
            put(&v.to_le_bytes())?;
        }
        for &v in &scene.sol_zenith {
            put(&v.to_le_bytes())?;
        }
        let night: Vec<u8> = scene.night.iter().map(|&b| b as u8).collect();
        put(&night)?;
        Ok(())
    })
}

/// Loads a scene from its `.json` sidecar path (or the shared stem).
pub fn load_scene(sidecar: &Path) -> Result<ImagerScene> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| io_err(sidecar, e))?;
    let header: SceneHeader = serde_json::from_str(&text).map_err(|e| IoError::Invalid {
        path: sidecar.display().to_string(),
        detail: e.to_string(),
    })?;
    if header.version != 1 {
        return Err(IoError::UnsupportedVersion {
            path: sidecar.display().to_string(),
            version: header.version,
        });
    }
    if header.channel_names.len() != SPECTRAL_CHANNELS {
        return Err(IoError::Invalid {
            path: sidecar.display().to_string(),
            detail: format!(
                "expected {SPECTRAL_CHANNELS} channel names, got {}",
                header.channel_names.len()
            ),
        });
    }
    let (h, w) = (header.height, header.width);
    let bin_path = sidecar.with_extension("bin");
    let buf = std::fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut cur = Cursor::new(&buf, &bin_path);
    let channels = cur.f32_vec(SPECTRAL_CHANNELS * h * w)?;
    let sat_zenith = cur.f32_vec(h * w)?;
    let sol_zenith = cur.f32_vec(h * w)?;
    let night: Vec<bool> = cur.take(h * w)?.iter().map(|&b| b != 0).collect();
    if cur.remaining() != 0 {
        return Err(corrupt(&bin_path, "trailing bytes"));
    }
    let scene = ImagerScene {
        timestamp: header.timestamp_utc,
        lat_axis: (0..h).map(|r| header.grid.lat0 + header.grid.dlat * r as f64).collect(),
        lon_axis: (0..w).map(|c| header.grid.lon0 + header.grid.dlon * c as f64).collect(),
        channels,
        sat_zenith,
        sol_zenith,
        night,
    };
    scene.validate().map_err(|e| IoError::Invalid {
        path: sidecar.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(scene)
}

/// Discovers every `.json` sidecar in a directory and loads the scenes,
/// sorted by timestamp (ties by filename).
pub fn load_scene_dir(dir: &Path) -> Result<Vec<ImagerScene>> {
    let mut sidecars: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    sidecars.sort();
    let mut scenes = Vec::with_capacity(sidecars.len());
    for sidecar in sidecars {
        scenes.push(load_scene(&sidecar)?);
    }
    scenes.sort_by_key(|s| s.timestamp);
    Ok(scenes)
}
