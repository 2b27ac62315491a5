//! Parameter checkpoint file.
//!
//! Layout: magic "BLPV", u32 version, u32 block count, then per block
//! u16 name length, name bytes, u8 rank, u64 dims..., f32 little-endian
//! payload. Values are stored in f32; loading widens back to f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::vector::ParamVector;
use crate::error::{BlissError, Result};

const MAGIC: &[u8; 4] = b"BLPV";
const VERSION: u32 = 1;

pub fn save(path: &Path, pv: &ParamVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(pv.num_blocks() as u32).to_le_bytes())?;
    for (name, tensor) in pv.blocks() {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "block name too long");
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = tensor.shape().len();
        assert!(rank <= u8::MAX as usize);
        w.write_all(&[rank as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamVector> {
    let err = |detail: &str| BlissError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut pv = ParamVector::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| err("block name not utf-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        pv.push(name, Tensor::new(shape, data))?;
    }
    Ok(pv)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push("embed", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 2.0, -3.0])).unwrap();
        pv.push("head.b", Tensor::scalar(0.25)).unwrap();
        pv.push("v", Tensor::new(vec![4], vec![1e-7, -1e7, 0.0, 1.5])).unwrap();
        pv
    }

    #[test]
    fn roundtrip_preserves_layout_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.blpv");
        let pv = sample();
        save(&path, &pv).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, pv.quantize_f32());
        // Saving the loaded vector again is byte-stable.
        let path2 = dir.path().join("m2.blpv");
        save(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.blpv");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load(&path), Err(BlissError::Format { .. })));
    }
}
