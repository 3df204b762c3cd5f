//! CPCK checkpoint files.
//!
//! Layout: magic `CPCK`, version u16, record count u32, then per record:
//! name length u16 + UTF-8 name, rank u8, one u32 per dimension, and the
//! float64 payload. Everything little-endian. Optimizer state rides along
//! as records named `<param>.m` / `<param>.v` plus a rank-0 scalar `t`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{corrupt, io_err, Cursor, IoError, Result};
use crate::tensor::{AdamState, Tensor};

const MAGIC: &[u8; 4] = b"CPCK";
const VERSION: u16 = 1;

struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn write_record(w: &mut dyn Write, path: &Path, rec: &Record) -> Result<()> {
    let name = rec.name.as_bytes();
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    put(&(name.len() as u16).to_le_bytes())?;
    put(name)?;
    put(&[rec.dims.len() as u8])?;
    for &d in &rec.dims {
        put(&(d as u32).to_le_bytes())?;
    }
    for &x in &rec.data {
        put(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Saves parameters and, optionally, Adam state to a checkpoint.
pub fn save_checkpoint(
    path: &Path,
    params: &BTreeMap<String, Tensor>,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut records: Vec<Record> = params
        .iter()
        .map(|(name, t)| Record {
            name: name.clone(),
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    if let Some(state) = adam {
        for (name, m) in &state.m {
            let dims = params
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![m.len()]);
            records.push(Record {
                name: format!("{name}.m"),
                dims,
                data: m.clone(),
            });
        }
        for (name, v) in &state.v {
            let dims = params
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![v.len()]);
            records.push(Record {
                name: format!("{name}.v"),
                dims,
                data: v.clone(),
            });
        }
        records.push(Record {
            name: "t".to_string(),
            dims: Vec::new(),
            data: vec![state.t as f64],
        });
    }
    super::write_atomic(path, |w| {
        w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
        w.write_all(&VERSION.to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        w.write_all(&(records.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        for rec in &records {
            write_record(w, path, rec)?;
        }
        Ok(())
    })
}

/// Parameters plus optional optimizer state, as loaded from a checkpoint.
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor::new(&buf, path);
    if cur.take(4)? != MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: "CPCK",
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let count = cur.u32()? as usize;
    let mut params = BTreeMap::new();
    let mut moments_m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut moments_v: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut step: Option<u64> = None;
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| corrupt(path, "record name is not UTF-8"))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = cur.f64_vec(n)?;
        if name == "t" {
            step = Some(data.first().copied().unwrap_or(0.0) as u64);
        } else if let Some(base) = name.strip_suffix(".m") {
            moments_m.insert(base.to_string(), data);
        } else if let Some(base) = name.strip_suffix(".v") {
            moments_v.insert(base.to_string(), data);
        } else {
            let t = Tensor::from_vec(dims, data)
                .map_err(|e| corrupt(path, format!("record '{name}': {e}")))?
                .with_grad();
            params.insert(name, t);
        }
    }
    if cur.remaining() != 0 {
        return Err(corrupt(path, "trailing bytes after final record"));
    }
    let adam = if step.is_some() || !moments_m.is_empty() {
        let mut state = AdamState::new(&params);
        for (name, m) in moments_m {
            if let Some(slot) = state.m.get_mut(&name) {
                *slot = m;
            }
        }
        for (name, v) in moments_v {
            if let Some(slot) = state.v.get_mut(&name) {
                *slot = v;
            }
        }
        state.t = step.unwrap_or(0);
        Some(state)
    } else {
        None
    };
    Ok(Checkpoint { params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> BTreeMap<String, Tensor> {
        let mut p = BTreeMap::new();
        p.insert(
            "enc0.weight".to_string(),
            Tensor::from_vec(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125])
                .unwrap()
                .with_grad(),
        );
        p.insert(
            "enc0.bias".to_string(),
            Tensor::from_vec(vec![2], vec![0.1, -0.2]).unwrap().with_grad(),
        );
        p
    }

    #[test]
    fn roundtrip_params_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpck");
        let params = sample_params();
        save_checkpoint(&path, &params, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.adam.is_none());
        assert_eq!(loaded.params.len(), 2);
        for (name, t) in &params {
            let l = &loaded.params[name];
            assert_eq!(l.shape(), t.shape());
            assert!(l
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(l.requires_grad());
        }
    }

    #[test]
    fn roundtrip_with_adam_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpck");
        let mut params = sample_params();
        let mut state = AdamState::new(&params);
        let grads: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.25; t.numel()]))
            .collect();
        state.step(&mut params, &grads, 1e-3).unwrap();
        state.step(&mut params, &grads, 1e-3).unwrap();
        save_checkpoint(&path, &params, Some(&state)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let restored = loaded.adam.unwrap();
        assert_eq!(restored.t, 2);
        assert_eq!(restored.m, state.m);
        assert_eq!(restored.v, state.v);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpck");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(IoError::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpck");
        let params = sample_params();
        save_checkpoint(&path, &params, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(IoError::Corrupt { .. })));
    }
}
