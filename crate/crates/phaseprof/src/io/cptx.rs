//! CPTX labeled-patch containers.
//!
//! Layout: magic `CPTX`, version u16, then zero or more patch records
//! until EOF. Record: C,H,W,D as u32, a flags byte (bit 0 = dense truth
//! present), the f32 channel block `[C,H,W]`, the u8 label volume
//! `[D,H,W]` (255 = unlabeled), the u8 mask plane `[H,W]`, and, when
//! flagged, the dense truth `[D,H,W]`. Little-endian throughout.

use std::io::Write;
use std::path::Path;

use super::{corrupt, io_err, Cursor, IoError, Result};
use crate::colloc::{LabeledPatch, NUM_LAYERS};

const MAGIC: &[u8; 4] = b"CPTX";
const VERSION: u16 = 1;
const FLAG_DENSE: u8 = 1;

/// Serializes one patch record.
fn write_patch(w: &mut dyn Write, path: &Path, patch: &LabeledPatch) -> Result<()> {
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    put(&(patch.num_channels as u32).to_le_bytes())?;
    put(&(patch.height as u32).to_le_bytes())?;
    put(&(patch.width as u32).to_le_bytes())?;
    put(&(NUM_LAYERS as u32).to_le_bytes())?;
    let flags = if patch.dense.is_some() { FLAG_DENSE } else { 0 };
    put(&[flags])?;
    for &v in &patch.channels {
        put(&v.to_le_bytes())?;
    }
    put(&patch.labels)?;
    let mask_bytes: Vec<u8> = patch.mask.iter().map(|&m| m as u8).collect();
    put(&mask_bytes)?;
    if let Some(dense) = &patch.dense {
        put(dense)?;
    }
    Ok(())
}

/// Writes a whole container atomically. `patches` may be empty; the
/// result is still a valid container.
pub fn save_patches(path: &Path, patches: &[LabeledPatch]) -> Result<()> {
    super::write_atomic(path, |w| {
        w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
        w.write_all(&VERSION.to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        for patch in patches {
            write_patch(w, path, patch)?;
        }
        Ok(())
    })
}

pub fn load_patches(path: &Path) -> Result<Vec<LabeledPatch>> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor::new(&buf, path);
    if cur.take(4)? != MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: "CPTX",
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let mut patches = Vec::new();
    while cur.remaining() > 0 {
        let c = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        if d != NUM_LAYERS {
            return Err(corrupt(path, format!("record has {d} layers, expected {NUM_LAYERS}")));
        }
        if h == 0 || w == 0 {
            return Err(corrupt(path, "zero patch dimension"));
        }
        let flags = cur.u8()?;
        if flags & !FLAG_DENSE != 0 {
            return Err(corrupt(path, format!("unknown flags 0x{flags:02x}")));
        }
        let channels = cur.f32_vec(c * h * w)?;
        let labels = cur.take(d * h * w)?.to_vec();
        let mask: Vec<bool> = cur.take(h * w)?.iter().map(|&b| b != 0).collect();
        let dense = if flags & FLAG_DENSE != 0 {
            Some(cur.take(d * h * w)?.to_vec())
        } else {
            None
        };
        let patch = LabeledPatch {
            channels,
            num_channels: c,
            height: h,
            width: w,
            labels,
            mask,
            dense,
        };
        patch
            .validate()
            .map_err(|e| corrupt(path, format!("record {}: {e}", patches.len())))?;
        patches.push(patch);
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_patches, SceneSpec};

    fn sample() -> Vec<LabeledPatch> {
        let spec = SceneSpec {
            seed: 3,
            height: 16,
            width: 16,
            cloud_count: (2, 4),
            ..SceneSpec::default()
        };
        synth_patches(&spec, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patches.cptx");
        let patches = sample();
        save_patches(&path, &patches).unwrap();
        let loaded = load_patches(&path).unwrap();
        assert_eq!(loaded.len(), patches.len());
        for (a, b) in loaded.iter().zip(patches.iter()) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.dense, b.dense);
            assert!(a
                .channels
                .iter()
                .zip(b.channels.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn empty_container_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cptx");
        save_patches(&path, &[]).unwrap();
        assert!(load_patches(&path).unwrap().is_empty());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 6);
    }

    #[test]
    fn same_patches_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.cptx");
        let b = dir.path().join("b.cptx");
        save_patches(&a, &sample()).unwrap();
        save_patches(&b, &sample()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cptx");
        std::fs::write(&path, b"XXXX\x01\x00").unwrap();
        assert!(matches!(load_patches(&path), Err(IoError::BadMagic { .. })));
        let good = dir.path().join("good.cptx");
        save_patches(&good, &sample()).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_patches(&good), Err(IoError::Corrupt { .. })));
    }
}
