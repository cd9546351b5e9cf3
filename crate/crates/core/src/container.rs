//! Binary container shared by model checkpoints and datasets:
//! `b"SBGC"`, a little-endian `u32` version, a little-endian `u64` metadata
//! length, the JSON metadata, then a little-endian payload.

use std::io::{Read, Write};

use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SBGC";
pub const VERSION: u32 = 1;

/// Upper bound on the metadata block, to reject garbage lengths early.
const MAX_META_LEN: u64 = 1 << 24;

pub fn write_container(mut w: impl Write, meta: &Value, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(meta)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads a container whose metadata `"container"` field equals `kind`.
pub fn read_container(mut r: impl Read, kind: &str) -> Result<(Value, Vec<u8>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l)?;
    let len = u64::from_le_bytes(l);
    if len > MAX_META_LEN {
        return Err(Error::Format(format!("metadata length {len} too large")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let meta: Value = serde_json::from_slice(&json)?;
    match meta.get("container").and_then(Value::as_str) {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Format(format!(
                "expected a {kind} container, found {other:?}"
            )))
        }
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((meta, payload))
}

pub fn f64s_to_le(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub fn le_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip() {
        let meta = json!({"container": "model", "x": 3});
        let payload = f64s_to_le([1.5, -2.0]);
        let mut buf = Vec::new();
        write_container(&mut buf, &meta, &payload).unwrap();
        assert_eq!(&buf[..4], b"SBGC");
        let (m, p) = read_container(&buf[..], "model").unwrap();
        assert_eq!(m, meta);
        assert_eq!(le_to_f64s(&p).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_wrong_kind_and_magic() {
        let mut buf = Vec::new();
        write_container(&mut buf, &json!({"container": "dataset"}), &[]).unwrap();
        assert!(read_container(&buf[..], "model").is_err());
        buf[0] = b'X';
        assert!(matches!(read_container(&buf[..], "dataset"), Err(Error::Format(_))));
        assert!(read_container(&b"SB"[..], "dataset").is_err());
    }
}
