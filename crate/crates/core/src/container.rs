//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "SSLB" | version u32 | seed u64 | config digest [u8; 32]
//! meta count u32 | { key len u32, key utf8, value len u32, value utf8 }*
//! tensor count u32 | { name len u32, name utf8, dtype u8, rank u32, dims u64 × rank, payload }*
//! sha256 of every preceding byte [u8; 32]
//! ```
//!
//! Payloads are row-major in the tensor's own precision (dtype 1 = f32, 2 = f64).

use std::path::Path;

use diffarray::{DType, Real, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSLB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub seed: u64,
    pub config_digest: [u8; 32],
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    pub fn new(seed: u64, config_digest: [u8; 32]) -> Self {
        Self {
            seed,
            config_digest,
            ..Self::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks metadata `{key}`")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata `{key}` is malformed")))
    }

    pub fn push<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        self.tensors.push(StoredTensor {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        });
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let st = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if st.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor `{name}` stored as {:?}, requested {:?}",
                st.dtype,
                T::DTYPE
            )));
        }
        let data = st.payload.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        Ok(Tensor::new(st.shape.clone(), data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        let sum = digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Format(format!("checkpoint {what}"));
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("has a bad magic header"));
        }
        if bytes.len() < 8 {
            return Err(corrupt("is truncated"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 8 + 8 + 32 + 32 {
            return Err(corrupt("is truncated"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if digest(body) != sum {
            return Err(corrupt("failed its integrity check"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > body.len() {
                return Err(corrupt("is truncated"));
            }
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let config_digest: [u8; 32] = take(32)?.try_into().unwrap();
        let mut out = Self::new(seed, config_digest);
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let text = |s: &[u8]| String::from_utf8(s.to_vec()).map_err(|_| corrupt("has non-utf8 text"));
        let meta_count = u32_at(take(4)?);
        for _ in 0..meta_count {
            let kl = u32_at(take(4)?);
            let k = text(take(kl)?)?;
            let vl = u32_at(take(4)?);
            let v = text(take(vl)?)?;
            out.meta.push((k, v));
        }
        let count = u32_at(take(4)?);
        for _ in 0..count {
            let nl = u32_at(take(4)?);
            let name = text(take(nl)?)?;
            let dtype = DType::from_tag(take(1)?[0]).ok_or_else(|| corrupt("has an unknown dtype tag"))?;
            let rank = u32_at(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
                numel = numel.checked_mul(d).ok_or_else(|| corrupt("has an absurd tensor shape"))?;
                shape.push(d);
            }
            let bytes_len = numel.checked_mul(dtype.size_of()).ok_or_else(|| corrupt("has an absurd tensor shape"))?;
            let payload = take(bytes_len)?.to_vec();
            out.tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if pos != body.len() {
            return Err(corrupt("has trailing bytes"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(42, digest(b"config"));
        c.set_meta("kind", "stage1");
        c.set_meta("strategy", "full");
        c.push("a", &Tensor::<f32>::from_fn([2, 3], |i| i as f32 * 0.1 - 0.3));
        c.push("b", &Tensor::<f64>::from_fn([4], |i| (i as f64).sin()));
        c.push("s", &Tensor::<f64>::scalar(f64::MIN_POSITIVE));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get::<f32>("a").unwrap(), c.get::<f32>("a").unwrap());
        assert_eq!(back.meta("strategy").unwrap(), "full");
        assert!(back.get::<f64>("a").is_err());
        assert!(back.get::<f32>("missing").is_err());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(Container::from_bytes(&v), Err(Error::Version { found: 2, expected: 1 })));
        let mut v = bytes.clone();
        v[60] ^= 1;
        assert!(matches!(Container::from_bytes(&v), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(b"NOPE"), Err(Error::Format(_))));
    }
}
