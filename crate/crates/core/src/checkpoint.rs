//! Binary parameter container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic    8 bytes  "AFTK0001"
//! count    u32      number of blocks
//! block*   u32 name length, UTF-8 name,
//!          u32 rank, rank × u64 dims,
//!          prod(dims) × f64 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AFTK0001";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.blocks.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing block {name:?}")))
    }

    pub fn blocks(&self) -> &[(String, Tensor)] {
        &self.blocks
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic header"));
        }
        let count = read_u32(&mut r)?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(Error::format("checkpoint", "truncated block name"));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "block name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::format("checkpoint", format!("truncated block {name:?}")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
            blocks.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("checkpoint", "unexpected end of data"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"AFTK0001");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(&b[21..29], &1u64.to_le_bytes());
        assert_eq!(&b[37..45], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 8 + 4 + 4 + 1 + 4 + 16 + 16);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Checkpoint::from_bytes(b"NOTMAGIC\0\0\0\0").is_err());
        let mut c = Checkpoint::new();
        c.push("x", Tensor::zeros(&[3]));
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.aftk");
        let mut c = Checkpoint::new();
        c.push("a.weight", Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(c.require("missing").is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            blocks in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(-1e6f64..1e6, 1..20)),
                0..5,
            )
        ) {
            let mut c = Checkpoint::new();
            for (name, data) in blocks {
                let n = data.len();
                c.push(name, Tensor::new(&[n], data).unwrap());
            }
            prop_assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }
}
