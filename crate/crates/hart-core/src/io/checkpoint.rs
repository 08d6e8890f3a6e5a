//! Checkpoint container: named f32 tensors in a single binary file.
//!
//! Layout (all integers little-endian):
//!   magic "HARTCKPT" | version u32 | entry count u32
//!   per entry: name_len u32 | name bytes | dtype u8 | ndim u32 | dims u32...
//!              | payload offset u64 | payload byte length u64
//!   payload region: raw little-endian f32 at the recorded offsets
//!
//! Saving is deterministic, so save -> load -> save reproduces the file
//! byte for byte. Loading validates magic, version, dtype, and that payload
//! ranges are in-bounds and non-overlapping before touching any data.

use std::fs;
use std::path::Path;

use crate::error::{HartError, Result};
use crate::num::Tensor;

pub const MAGIC: &[u8; 8] = b"HARTCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn save_checkpoint(named: &[(String, Tensor)], path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(named)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn encode_checkpoint(named: &[(String, Tensor)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in named.iter().enumerate() {
        if named[..i].iter().any(|(n, _)| n == name) {
            return Err(HartError::format("checkpoint", format!("duplicate entry name `{name}`")));
        }
    }
    // First pass: header size.
    let mut header_len = 8 + 4 + 4;
    for (name, t) in named {
        header_len += 4 + name.len() + 1 + 4 + 4 * t.shape().len() + 8 + 8;
    }
    let mut out = Vec::with_capacity(header_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let shape = t.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in &shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let byte_len = (t.numel() * 4) as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&byte_len.to_le_bytes());
        offset += byte_len;
    }
    debug_assert_eq!(out.len(), header_len);
    for (_, t) in named {
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HartError::format("checkpoint", "truncated file".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(HartError::format("checkpoint", "bad magic; not a checkpoint container".to_string()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(HartError::format(
            "checkpoint",
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let count = c.u32()? as usize;
    struct Meta {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        byte_len: u64,
    }
    let mut metas = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| HartError::format("checkpoint", "entry name is not UTF-8".to_string()))?;
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(HartError::format("checkpoint", format!("unknown dtype tag {dtype}")));
        }
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let offset = c.u64()?;
        let byte_len = c.u64()?;
        let expect = shape.iter().product::<usize>() as u64 * 4;
        if byte_len != expect {
            return Err(HartError::format(
                "checkpoint",
                format!("entry `{name}`: payload length {byte_len} != shape size {expect}"),
            ));
        }
        metas.push(Meta { name, shape, offset, byte_len });
    }
    // Offsets must be in-bounds and non-overlapping.
    let mut ranges: Vec<(u64, u64, usize)> = metas
        .iter()
        .enumerate()
        .map(|(i, m)| (m.offset, m.offset + m.byte_len, i))
        .collect();
    ranges.sort();
    let file_len = bytes.len() as u64;
    let mut prev_end = c.pos as u64;
    for &(start, end, i) in &ranges {
        if start < prev_end {
            return Err(HartError::format(
                "checkpoint",
                format!("entry `{}`: payload overlaps a previous region", metas[i].name),
            ));
        }
        if end > file_len {
            return Err(HartError::format(
                "checkpoint",
                format!("entry `{}`: payload extends past end of file", metas[i].name),
            ));
        }
        prev_end = end;
    }
    let mut out = Vec::with_capacity(count);
    for m in metas {
        let raw = &bytes[m.offset as usize..(m.offset + m.byte_len) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((m.name, Tensor::from_vec(data, &m.shape)));
    }
    Ok(out)
}

/// Find one entry by name in a loaded checkpoint.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| HartError::format("checkpoint", format!("missing entry `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".to_string(), Tensor::from_vec(vec![1.5, -2.25, 3.0], &[3])),
            ("b.bias".to_string(), Tensor::from_vec(vec![0.0625; 6], &[2, 3])),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let entries = sample();
        let bytes1 = encode_checkpoint(&entries).unwrap();
        let loaded = decode_checkpoint(&bytes1).unwrap();
        let bytes2 = encode_checkpoint(&loaded).unwrap();
        assert_eq!(bytes1, bytes2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&loaded) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.to_vec(), t2.to_vec());
        }
    }

    #[test]
    fn corrupted_magic_is_a_typed_error() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[0] = b'X';
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, HartError::Format { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[8] = 99;
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(decode_checkpoint(cut).is_err());
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let entries = vec![
            ("x".to_string(), Tensor::from_vec(vec![1.0, 2.0], &[2])),
            ("y".to_string(), Tensor::from_vec(vec![3.0, 4.0], &[2])),
        ];
        let mut bytes = encode_checkpoint(&entries).unwrap();
        // Entry layout for a 1-char name with one dim:
        //   name_len(4) + name(1) + dtype(1) + ndim(4) + dim(4) + offset(8) + len(8)
        let preamble = 8 + 4 + 4;
        let entry_len = 4 + 1 + 1 + 4 + 4 + 8 + 8;
        let x_off_pos = preamble + 4 + 1 + 1 + 4 + 4;
        let y_off_pos = preamble + entry_len + 4 + 1 + 1 + 4 + 4;
        let x_offset = u64::from_le_bytes(bytes[x_off_pos..x_off_pos + 8].try_into().unwrap());
        bytes[y_off_pos..y_off_pos + 8].copy_from_slice(&x_offset.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let entries = vec![
            ("same".to_string(), Tensor::zeros(&[1])),
            ("same".to_string(), Tensor::zeros(&[1])),
        ];
        assert!(encode_checkpoint(&entries).is_err());
    }

    #[test]
    fn fuzz_many_tensors_round_trip_exactly() {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let mut entries = Vec::new();
        for i in 0..1000 {
            let ndim = r.gen_range(1..=3);
            let shape: Vec<usize> = (0..ndim).map(|_| r.gen_range(1..5)).collect();
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.gen::<u32>() & 0x7f7f_ffff)).collect();
            entries.push((format!("t{i}"), Tensor::from_vec(data, &shape)));
        }
        let bytes = encode_checkpoint(&entries).unwrap();
        let loaded = decode_checkpoint(&bytes).unwrap();
        for ((_, a), (_, b)) in entries.iter().zip(&loaded) {
            let (av, bv) = (a.to_vec(), b.to_vec());
            assert_eq!(av.len(), bv.len());
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
