//! AEGW weight checkpoints.
//!
//! Layout (little-endian): magic `AEGW`, version u32, parameter count u32,
//! then per parameter: u16 name length, UTF-8 name, u8 rank, u32 per
//! dimension, and the values as raw `f32`.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AEGW";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.get(&name).is_some() {
            return Err(Error::usage(format!("duplicate checkpoint entry {name}")));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::dim("rank exceeds 255"));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose name starts with `prefix`.
    pub fn section<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a (String, Tensor)> + 'a {
        self.entries.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.raw(MAGIC);
        w.u32(VERSION);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.string(name)?;
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u32(u32::try_from(d).map_err(|_| Error::dim("dimension exceeds u32"))?);
            }
            for &v in t.data() {
                w.f32(v as f32);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u32("parameter count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let at = r.offset();
            let name = r.string("parameter name")?;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return Err(Error::format(at, format!("parameter {name} has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let d = r.u32("dimension")?;
                if d == 0 {
                    return r.fail(format!("parameter {name} has a zero dimension"));
                }
                n = n.saturating_mul(d as u64);
                shape.push(d as usize);
            }
            if n.saturating_mul(4) > (bytes.len() as u64).saturating_sub(r.offset()) {
                return r.fail(format!("truncated values for parameter {name}"));
            }
            let raw = r.bytes(n as usize * 4, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::format(at, format!("parameter {name} holds non-finite values")));
            }
            ckpt.push(name, t).map_err(|_| Error::format(at, "duplicate parameter name"))?;
        }
        r.finish()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("encoder.b1.w".into(), Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap())
            .unwrap();
        c.push("embed.vlad.fc".into(), Tensor::scalar(2.5)).unwrap();
        c
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"AEGW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 12);
    }

    #[test]
    fn truncation_fails_closed() {
        let b = sample().to_bytes().unwrap();
        for cut in 0..b.len() {
            let err = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'X';
        match Checkpoint::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exact(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let mut c = Checkpoint::new();
            let t = Tensor::vector(vals.iter().map(|&v| v as f64).collect()).unwrap();
            c.push("p".into(), t).unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
