//! Flat binary format for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LAMOLCKP"
//! version  u32      1
//! count    u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 × rank
//!   values   f64 × product(dims)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAMOLCKP";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_tensors<R: Read>(mut r: R) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err("bad magic".into());
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| e.to_string())?;
        let name = String::from_utf8(name).map_err(|e| e.to_string())?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw).map_err(|e| format!("tensor {name}: {e}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = fs::File::create(path)?;
    write_tensors(io::BufWriter::new(file), tensors)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    read_tensors(bytes.as_slice()).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), t)]).unwrap();
        assert_eq!(&buf[..8], b"LAMOLCKP");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1u32.to_le_bytes());
        assert_eq!(buf[20], b'w');
        assert_eq!(&buf[21..25], &2u32.to_le_bytes());
        assert_eq!(&buf[25..33], &1u64.to_le_bytes());
        assert_eq!(&buf[33..41], &2u64.to_le_bytes());
        assert_eq!(&buf[41..49], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 57);
    }

    #[test]
    fn round_trip_and_corruption() {
        let tensors = vec![
            (
                "a".to_string(),
                Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ),
            ("bias".to_string(), Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0])),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        assert_eq!(read_tensors(buf.as_slice()).unwrap(), tensors);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensors(bad.as_slice()).is_err());
        assert!(read_tensors(&buf[..buf.len() - 3]).is_err());
    }
}
