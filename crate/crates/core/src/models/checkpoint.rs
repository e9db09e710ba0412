//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"TDRCKPT\0"
//! version u32
//! hlen    u32, followed by hlen bytes of JSON header
//!         {n_users, n_items, dim, seed, hyper}
//! theta   u64 count + count × f64
//! phi     u64 count + count × f64
//! xi      u64 count + count × f64
//! omega   u64 count + count × f64   (empty when no targeting state)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LogisticHead, MfModel, ModelBundle, ModelHyper};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TDRCKPT\0";

#[derive(Serialize, Deserialize)]
struct Header {
    n_users: usize,
    n_items: usize,
    dim: usize,
    seed: u64,
    hyper: ModelHyper,
}

fn write_array<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 34 {
        return Err(Error::Format(format!("implausible array length {len}")));
    }
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_checkpoint<W: Write>(w: &mut W, bundle: &ModelBundle, omega: &[f64]) -> Result<()> {
    let header = Header {
        n_users: bundle.theta.n_users(),
        n_items: bundle.theta.n_items(),
        dim: bundle.theta.dim(),
        seed: bundle.seed,
        hyper: bundle.hyper.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    write_array(w, bundle.theta.data())?;
    write_array(w, bundle.phi.data())?;
    write_array(w, bundle.xi.data())?;
    write_array(w, omega)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelBundle, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let h: Header = serde_json::from_slice(&header)?;
    let theta = MfModel::from_parts(h.n_users, h.n_items, h.dim, read_array(r)?)?;
    let phi = MfModel::from_parts(h.n_users, h.n_items, h.dim, read_array(r)?)?;
    let xi = LogisticHead::from_parts(read_array(r)?)?;
    if xi.dim_in() != 2 * h.dim {
        return Err(Error::Format("propensity head width does not match dim".into()));
    }
    let omega = read_array(r)?;
    Ok((
        ModelBundle {
            theta,
            phi,
            xi,
            seed: h.seed,
            hyper: h.hyper,
        },
        omega,
    ))
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, omega: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, bundle, omega)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, Vec<f64>)> {
    let mut f = std::io::BufReader::new(crate::error::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PairSpace, SeededRng, Stream};

    #[test]
    fn round_trip_is_exact() {
        let space = PairSpace::new(3, 5).unwrap();
        let hyper = ModelHyper {
            dim: 4,
            ..ModelHyper::default()
        };
        let mut bundle = ModelBundle::init(space, hyper, 17, &mut SeededRng::new(17).stream(Stream::Init, 0));
        bundle.xi.data_mut()[2] = -0.25;
        let omega: Vec<f64> = (0..15).map(|k| k as f64 * 0.1 - 0.7).collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &bundle, &omega).unwrap();
        let (back, omega_back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(omega_back, omega);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = b"NOTACKPT".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Format(_))));

        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&99u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
