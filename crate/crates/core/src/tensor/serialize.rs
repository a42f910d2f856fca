//! Binary tensor and checkpoint formats (see `docs/formats.md`).
//!
//! A tensor stream is: magic `BFT1`, u32 rank, `rank` u64 dims, then the
//! row-major f64 payload — all little-endian. A checkpoint is: magic
//! `BFC1`, u64 record count, then per record a u32-length-prefixed UTF-8
//! name followed by a tensor stream. Records are written in name order so
//! identical parameter sets serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::init::Parameter;
use super::Tensor;
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"BFT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"BFC1";
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 32;

fn fmt_err(what: &'static str, details: impl Into<String>) -> Error {
    Error::Format {
        what,
        details: details.into(),
    }
}

fn read_exact(what: &'static str, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| fmt_err(what, format!("read failed: {e}")))
}

fn write_all(what: &'static str, w: &mut impl Write, buf: &[u8]) -> Result<()> {
    w.write_all(buf)
        .map_err(|e| fmt_err(what, format!("write failed: {e}")))
}

/// Serialize one tensor to a stream.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_all("tensor", w, TENSOR_MAGIC)?;
    write_all("tensor", w, &(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        write_all("tensor", w, &(d as u64).to_le_bytes())?;
    }
    for v in t.values().iter() {
        write_all("tensor", w, &v.to_le_bytes())?;
    }
    Ok(())
}

/// Deserialize one tensor from a stream (gradient tracking off).
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact("tensor", r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt_err("tensor", format!("bad magic {magic:?}")));
    }
    let mut rank_buf = [0u8; 4];
    read_exact("tensor", r, &mut rank_buf)?;
    let rank = u32::from_le_bytes(rank_buf);
    if rank == 0 || rank > MAX_RANK {
        return Err(fmt_err("tensor", format!("unreasonable rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let mut dim_buf = [0u8; 8];
        read_exact("tensor", r, &mut dim_buf)?;
        let d = u64::from_le_bytes(dim_buf);
        if d == 0 {
            return Err(fmt_err("tensor", "zero-sized dimension"));
        }
        total = total.saturating_mul(d);
        if total > MAX_ELEMENTS {
            return Err(fmt_err("tensor", format!("element count {total} too large")));
        }
        shape.push(d as usize);
    }
    let mut values = Vec::with_capacity(total as usize);
    let mut val_buf = [0u8; 8];
    for _ in 0..total {
        read_exact("tensor", r, &mut val_buf)?;
        values.push(f64::from_le_bytes(val_buf));
    }
    Tensor::new(&shape, values)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)?;
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor(&mut BufReader::new(f))
}

/// Write all parameters as one checkpoint stream. Records are sorted by
/// name, so the same parameter values always produce the same bytes.
pub fn write_checkpoint(w: &mut impl Write, params: &[Parameter]) -> Result<()> {
    let mut sorted: Vec<&Parameter> = params.iter().collect();
    sorted.sort_by(|a, b| a.name().cmp(b.name()));

    write_all("checkpoint", w, CHECKPOINT_MAGIC)?;
    write_all("checkpoint", w, &(sorted.len() as u64).to_le_bytes())?;
    for p in sorted {
        let name = p.name().as_bytes();
        write_all("checkpoint", w, &(name.len() as u32).to_le_bytes())?;
        write_all("checkpoint", w, name)?;
        write_tensor(w, p.tensor())?;
    }
    Ok(())
}

/// Serialize a checkpoint into memory.
pub fn checkpoint_bytes(params: &[Parameter]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, params: &[Parameter]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, params)?;
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a checkpoint back as a name → tensor map.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    read_exact("checkpoint", &mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err("checkpoint", format!("bad magic {magic:?}")));
    }
    let mut count_buf = [0u8; 8];
    read_exact("checkpoint", &mut r, &mut count_buf)?;
    let count = u64::from_le_bytes(count_buf);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let mut len_buf = [0u8; 4];
        read_exact("checkpoint", &mut r, &mut len_buf)?;
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact("checkpoint", &mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| fmt_err("checkpoint", "non-UTF-8 parameter name"))?;
        let tensor = read_tensor(&mut r)?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(fmt_err("checkpoint", format!("duplicate record `{name}`")));
        }
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamInit, Registry};

    #[test]
    fn tensor_roundtrip_preserves_bits() {
        let t = Tensor::new(&[2, 3], vec![0.1, -2.5, 1e-300, 3.7, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        let (a, b) = (t.to_vec(), back.to_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_magic_rejected() {
        let t = Tensor::scalar(1.0).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_stream_rejected() {
        let t = Tensor::new(&[4], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn nan_payload_rejected_on_load() {
        let t = Tensor::scalar(1.0).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let n = buf.len();
        buf[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_byte_determinism() {
        let dir = std::env::temp_dir().join(format!("bft-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut r = Registry::new(11);
        r.param("b.weight", &[3], ParamInit::XavierUniform { fan_in: 3, fan_out: 1 }).unwrap();
        r.param("a.weight", &[2, 2], ParamInit::XavierUniform { fan_in: 2, fan_out: 2 }).unwrap();

        let p1 = dir.join("one.ckpt");
        let p2 = dir.join("two.ckpt");
        save_checkpoint(&p1, &r.parameters()).unwrap();
        save_checkpoint(&p2, &r.parameters()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(
            loaded["a.weight"].to_vec(),
            r.get("a.weight").unwrap().tensor().to_vec()
        );

        let mut fresh = Registry::new(99);
        fresh.param("b.weight", &[3], ParamInit::Zeros).unwrap();
        fresh.param("a.weight", &[2, 2], ParamInit::Zeros).unwrap();
        fresh.load_values(&loaded).unwrap();
        assert_eq!(
            fresh.get("b.weight").unwrap().tensor().to_vec(),
            r.get("b.weight").unwrap().tensor().to_vec()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
