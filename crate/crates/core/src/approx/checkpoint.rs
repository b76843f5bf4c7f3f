//! Parameter checkpoint file format, version 1.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic     8 bytes   "CPDCKPT\0"
//! version   u32       1
//! count     u32       number of tensors
//! tensor*   count times:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rank      u32     (at most 8)
//!   dims      rank x u64
//!   values    prod(dims) x f64
//! ```
//!
//! Tensor names are unique within a file.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;

use super::nn::Mlp;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CPDCKPT\0";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            values: m.iter().copied().collect(),
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.tensors.push(NamedTensor { name: name.into(), shape: vec![], values: vec![v] });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        if t.shape.len() != 2 {
            return Err(bad(format!("tensor `{name}` has rank {}, expected 2", t.shape.len())));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.values.clone()).map_err(|e| bad(e.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        match t.values.as_slice() {
            [v] => Ok(*v),
            _ => Err(bad(format!("tensor `{name}` is not a scalar"))),
        }
    }

    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp) {
        for p in net.params() {
            self.push_matrix(format!("{prefix}.{}", p.name), &p.value);
        }
    }

    /// Overwrite `net`'s parameters; shapes must match exactly.
    pub fn load_mlp(&self, prefix: &str, net: &mut Mlp) -> Result<()> {
        for p in net.params_mut() {
            let name = format!("{prefix}.{}", p.name);
            let m = self.matrix(&name)?;
            if m.dim() != p.value.dim() {
                return Err(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", m.dim(), p.value.dim())));
            }
            p.value = m;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut names = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("name is not UTF-8"))?.to_owned();
            if !names.insert(name.clone()) {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?;
                n = n.checked_mul(d).ok_or_else(|| bad("element count overflow"))?;
                shape.push(d);
            }
            if n.checked_mul(8).map_or(true, |b| b > r.remaining()) {
                return Err(bad("truncated"));
            }
            let values = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::nn::MlpSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let net = Mlp::new(MlpSpec::q(5, vec![7, 3]), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut ck = Checkpoint::default();
        ck.push_mlp("q1", &net);
        ck.push_scalar("log_alpha", -0.25);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        let mut other = Mlp::new(MlpSpec::q(5, vec![7, 3]), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        back.load_mlp("q1", &mut other).unwrap();
        assert_eq!(net, other);
        assert_eq!(back.scalar("log_alpha").unwrap(), -0.25);
    }

    #[test]
    fn shape_mismatch_on_load() {
        let net = Mlp::new(MlpSpec::q(5, vec![7]), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut ck = Checkpoint::default();
        ck.push_mlp("q", &net);
        let mut other = Mlp::new(MlpSpec::q(4, vec![7]), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(ck.load_mlp("q", &mut other).is_err());
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(Checkpoint::decode(b"").is_err());
        assert!(Checkpoint::decode(b"NOTACKPT\x01\0\0\0\0\0\0\0").is_err());
        let mut v = Checkpoint::default().encode();
        v[8] = 2;
        assert!(Checkpoint::decode(&v).is_err());
        let mut v = Checkpoint::default().encode();
        v.push(0);
        assert!(Checkpoint::decode(&v).is_err());
    }

    #[test]
    fn rejects_huge_claimed_sizes() {
        let mut v = Vec::new();
        v.extend_from_slice(MAGIC);
        v.extend_from_slice(&1u32.to_le_bytes());
        v.extend_from_slice(&1u32.to_le_bytes());
        v.extend_from_slice(&1u32.to_le_bytes());
        v.push(b'x');
        v.extend_from_slice(&2u32.to_le_bytes());
        v.extend_from_slice(&u64::MAX.to_le_bytes());
        v.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&v).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            tensors in proptest::collection::vec(
                ("[a-z]{1,6}", proptest::collection::vec(-1e6f64..1e6, 0..12)), 0..5)
        ) {
            let mut ck = Checkpoint::default();
            let mut seen = HashSet::new();
            for (name, values) in tensors {
                if seen.insert(name.clone()) {
                    ck.tensors.push(NamedTensor { name, shape: vec![values.len()], values });
                }
            }
            prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
