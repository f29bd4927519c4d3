//! Parameter checkpoint files. The layout is described in `docs/checkpoint-format.md`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RVNTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let d = t.shape().dims();
            out.extend_from_slice(&(d.len() as u32).to_le_bytes());
            for v in d {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(Error::Checkpoint(format!("file stores {width}-byte floats, expected {}", T::BYTES)));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            if ndim != 4 {
                return Err(Error::Checkpoint(format!("{name}: expected 4 dims, found {ndim}")));
            }
            let mut d = [0usize; 4];
            for v in &mut d {
                *v = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint(format!("{name}: dimension too large")))?;
            }
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let raw = r.take(
                shape
                    .numel()
                    .checked_mul(T::BYTES)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?,
            )?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            params.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            step: 42,
            params: vec![
                ("a".into(), Tensor::from_f64_slice(Shape::vector(2), &[1.5, -2.0]).unwrap()),
                (
                    "conv.weight".into(),
                    Tensor::from_f64_slice(Shape::new(1, 1, 1, 1), &[0.25]).unwrap(),
                ),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn exact_layout() {
        let c = Checkpoint::<f32> {
            step: 3,
            params: vec![("w".into(), Tensor::from_f64_slice(Shape::vector(1), &[1.0]).unwrap())],
        };
        let mut want = b"RVNTCKPT".to_vec();
        want.extend([1, 0, 0, 0]);
        want.push(4);
        want.extend([3, 0, 0, 0, 0, 0, 0, 0]);
        want.extend([1, 0, 0, 0]);
        want.extend([1, 0, 0, 0, b'w']);
        want.extend([4, 0, 0, 0]);
        for d in [1u64, 1, 1, 1] {
            want.extend(d.to_le_bytes());
        }
        want.extend(1.0f32.to_le_bytes());
        assert_eq!(c.to_bytes(), want);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&long).is_err());
    }
}
