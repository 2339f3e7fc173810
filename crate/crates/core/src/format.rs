//! Binary tensor container (`XT01`) and the named-tensor archive built on it.
//!
//! Record layout, all integers little-endian:
//!
//! ```text
//! "XT01" | dtype: u8 (0 = f32) | rank: u8 | rank x u32 extents | payload
//! ```
//!
//! An archive is a `u32` entry count followed by, per entry, a `u16` name
//! length, the UTF-8 name and one embedded record. Entries are in strictly
//! increasing name order, so every archive has exactly one encoding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"XT01";
pub const DTYPE_F32: u8 = 0;

pub type Archive = BTreeMap<String, Tensor>;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    encode_tensor(t, &mut out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(format!(
                "truncated {what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_record(r: &mut Reader<'_>) -> Result<Tensor> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:02x?}, expected XT01")));
    }
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(format!("unsupported dtype code {dtype}")));
    }
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::format("rank 0 record"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = r.u32("extent")? as usize;
        if d == 0 {
            return Err(Error::format("zero extent"));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format("element count overflows"))?;
        dims.push(d);
    }
    let bytes = count
        .checked_mul(4)
        .filter(|&b| b <= r.remaining())
        .ok_or_else(|| {
            Error::format(format!(
                "truncated payload: {count} f32 values declared, {} bytes available",
                r.remaining()
            ))
        })?;
    let payload = r.take(bytes, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

/// Decodes exactly one record; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = decode_record(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after record", r.remaining())));
    }
    Ok(t)
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&(archive.len() as u32).to_le_bytes());
    for (name, t) in archive {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format(format!("entry name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n = r.u32("entry count")?;
    let mut archive = Archive::new();
    for i in 0..n {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let t = decode_record(&mut r).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("entry `{name}`: {m}")),
            other => other,
        })?;
        if let Some((last, _)) = archive.last_key_value() {
            if *last == name {
                return Err(Error::format(format!("duplicate entry `{name}`")));
            }
            if *last > name {
                return Err(Error::format(format!("entry `{name}` follows `{last}`; names must be sorted")));
            }
        }
        archive.insert(name, t);
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after archive", r.remaining())));
    }
    Ok(archive)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn write_archive(path: impl AsRef<Path>, archive: &Archive) -> Result<()> {
    std::fs::write(path, encode_archive(archive)?)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Archive> {
    decode_archive(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"XT01");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::zeros(&[4, 4]);
        let b = tensor_to_bytes(&t);
        let err = decode_tensor(&b[..b.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn huge_declared_extent_does_not_allocate() {
        let mut b = b"XT01".to_vec();
        b.extend_from_slice(&[0, 2]);
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tensor(&b).is_err());
    }

    #[test]
    fn duplicate_archive_entries_are_rejected() {
        let t = tensor_to_bytes(&Tensor::scalar(1.0));
        let mut b = 2u32.to_le_bytes().to_vec();
        for _ in 0..2 {
            b.extend_from_slice(&1u16.to_le_bytes());
            b.push(b'a');
            b.extend_from_slice(&t);
        }
        assert!(decode_archive(&b).unwrap_err().to_string().contains("duplicate"));
    }

    proptest! {
        #[test]
        fn archive_round_trip_is_bit_exact(
            entries in prop::collection::btree_map(
                "[a-z][a-z0-9._]{0,12}",
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    prop::collection::vec(any::<f32>(), r * c)
                        .prop_map(move |v| Tensor::new(vec![r, c], v).unwrap())
                }),
                0..5,
            )
        ) {
            let bytes = encode_archive(&entries).unwrap();
            let back = decode_archive(&bytes).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for (k, v) in &entries {
                let w = &back[k];
                prop_assert_eq!(v.dims(), w.dims());
                let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = w.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_tensor(&bytes);
            let _ = decode_archive(&bytes);
        }
    }
}
