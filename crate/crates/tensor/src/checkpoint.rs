//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MIST1" | header_len | header (UTF-8 JSON) | count
//!   count x ( name_len | name | rank | dims[rank] | f32 data )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MIST1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON header (architecture and training configuration).
    pub header: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TensorError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_string(r: &mut impl Read, len: usize, what: &str) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| TensorError::Format(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, self.header.len())?;
        w.write_all(self.header.as_bytes())?;
        write_u32(w, self.entries.len())?;
        for (name, t) in &self.entries {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.rank())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let header_len = read_u32(r)?;
        let header = read_string(r, header_len, "header")?;
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(r)?;
            let name = read_string(r, name_len, "entry name")?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| TensorError::Format(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_fixed() {
        let ck = Checkpoint {
            header: "{}".into(),
            entries: vec![("w".into(), Tensor::new(&[2], vec![1.0, -2.0]).unwrap())],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut expected = b"MIST1".to_vec();
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"{}");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = Checkpoint::read_from(&mut &b"NOPE1\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, TensorError::Format(_)));
    }

    #[test]
    fn scalars_have_rank_zero() {
        let ck = Checkpoint {
            header: String::new(),
            entries: vec![("g/adam_t".into(), Tensor::scalar(12.0))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
    }
}
