//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `RATLABCK`, `u32` format version, `u64` header
//! length, a JSON header (tensor names, shapes, freeze flags and caller
//! metadata), then every tensor's data as little-endian `f64` in header
//! order. Floats are stored as raw bits, so save/load is bit-exact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"RATLABCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &ParamStore,
    metadata: &serde_json::Value,
) -> Result<()> {
    let header = Header {
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                frozen: params.is_frozen(name),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header.len() + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("<checkpoint writer>", e))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint reader>", e))?;
    let bad = |offset: usize, msg: &str| Error::Parse {
        offset,
        message: msg.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(0, "not a ratlab checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(8, &format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(12, "header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend])?;

    let mut store = ParamStore::new();
    let mut pos = hend;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = pos + n * 8;
        if end > bytes.len() {
            return Err(bad(pos, &format!("truncated data for `{}`", entry.name)));
        }
        let data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos = end;
        store.insert(entry.name.clone(), Tensor::new(entry.shape, data)?)?;
        store.set_frozen(&entry.name, entry.frozen)?;
    }
    if pos != bytes.len() {
        return Err(bad(pos, "trailing bytes after tensor data"));
    }
    Ok((store, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(-1e12f64..1e12, 1..40),
            frozen in any::<bool>(),
        ) {
            let mut ps = ParamStore::new();
            ps.insert("a", Tensor::vector(vals.clone()).unwrap()).unwrap();
            ps.insert("b.w", Tensor::matrix(1, 1, vec![-0.0]).unwrap()).unwrap();
            ps.set_frozen("a", frozen).unwrap();
            let meta = serde_json::json!({"seed": 7});
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ps, &meta).unwrap();
            let (back, m) = read_checkpoint(&buf[..]).unwrap();
            prop_assert!(back.bit_eq(&ps));
            prop_assert_eq!(back.freeze_mask(), ps.freeze_mask());
            prop_assert_eq!(&m, &meta);
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back, &meta).unwrap();
            prop_assert_eq!(again, buf);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(read_checkpoint(&b"nope"[..]).is_err());
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ps, &serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Parse { .. })));
    }
}
