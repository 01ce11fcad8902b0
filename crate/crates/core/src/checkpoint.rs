//! Binary containers.
//!
//! Weights (`PXFW`), little-endian:
//!
//! ```text
//! "PXFW" | u32 version | u32 n | n bytes of JSON config
//! then until EOF: u32 name_len | name | u32 rank | rank × u32 dims | f32 data
//! ```
//!
//! Embedding matrices (`PXFE`): `"PXFE" | u32 rank (= 2) | dims | f32 data`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Array2<f32>)>,
}

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

/// Reads a u32, or `None` at a clean end of input.
fn try_u32(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::Format("truncated integer".into()))
            };
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    try_u32(r)?.ok_or_else(|| Error::Format("unexpected end of file".into()))
}

fn put_tensor(w: &mut impl Write, t: &Array2<f32>) -> Result<()> {
    put_u32(w, 2)?;
    put_u32(w, t.nrows() as u32)?;
    put_u32(w, t.ncols() as u32)?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_tensor(r: &mut impl Read) -> Result<Array2<f32>> {
    let rank = get_u32(r)?;
    let dims: Vec<usize> = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
    let (rows, cols) = match dims.as_slice() {
        [n] => (1, *n),
        [a, b] => (*a, *b),
        _ => return Err(Error::Format(format!("unsupported tensor rank {rank}"))),
    };
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"PXFW")?;
        put_u32(w, VERSION)?;
        let cfg = serde_json::to_vec(&self.config)?;
        put_u32(w, cfg.len() as u32)?;
        w.write_all(&cfg)?;
        for (name, t) in &self.tensors {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PXFW" {
            return Err(Error::Format("not a PXFW checkpoint".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let n = get_u32(r)? as usize;
        let mut cfg = vec![0u8; n];
        r.read_exact(&mut cfg)?;
        let config = serde_json::from_slice(&cfg)?;
        let mut tensors = Vec::new();
        while let Some(len) = try_u32(r)? {
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            tensors.push((name, get_tensor(r)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> crate::nn::ParamStore<f32> {
        let mut store = crate::nn::ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone());
            }
        }
        store
    }
}

pub fn write_embeddings(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"PXFE")?;
    put_tensor(&mut f, m)?;
    f.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Array2<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != b"PXFE" {
        return Err(Error::Format("not a PXFE embeddings file".into()));
    }
    get_tensor(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ck = Checkpoint {
            config: serde_json::json!({"kind": "encoder", "d": 4}),
            tensors: vec![
                ("a.w".into(), ndarray::arr2(&[[1.0, -2.5], [3.0, 0.125]])),
                ("b".into(), Array2::zeros((1, 3))),
            ],
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PXFW");
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.group("a.").expect("w"), &ck.tensors[0].1);
        assert!(Checkpoint::read(&mut &buf[..buf.len() - 2]).is_err());
        assert!(Checkpoint::read(&mut &b"NOPE"[..]).is_err());
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = std::env::temp_dir().join(format!("pxfe-{}", std::process::id()));
        let m = ndarray::arr2(&[[1.0f32, 2.0, 3.0]]);
        write_embeddings(&dir, &m).unwrap();
        assert_eq!(read_embeddings(&dir).unwrap(), m);
        std::fs::remove_file(&dir).unwrap();
    }
}
