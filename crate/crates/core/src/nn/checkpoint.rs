//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SPOSCKPT"
//! version  u32
//! config   u32 byte length, then UTF-8 JSON
//! count    u32 number of parameter blobs
//! blob*    u32 name length, name bytes, u32 rank, u64 extent per axis,
//!          f32 values in row-major order
//! ```
//!
//! Values are stored as raw bit patterns, so a save/load round-trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::tensor::{ParamStore, Tensor};
use super::NnError;

pub const MAGIC: [u8; 8] = *b"SPOSCKPT";
pub const VERSION: u32 = 1;

/// Upper bound on any single length field; guards allocation on corrupt files.
const MAX_FIELD: u64 = 1 << 32;

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write, C: Serialize>(
    mut w: W,
    config: &C,
    params: &ParamStore<f32>,
) -> Result<(), NnError> {
    let len32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| corrupt(format!("{what} too large to store: {n}")))
    };
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(config).map_err(|e| corrupt(format!("config: {e}")))?;
    w.write_all(&len32(json.len(), "config")?.to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&len32(params.len(), "parameter count")?.to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&len32(name.len(), "name")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len32(tensor.shape().len(), "rank")?.to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, NnError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                ErrorKind::UnexpectedEof => corrupt(format!("truncated while reading {what}")),
                _ => NnError::Io(e),
            })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NnError> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read, C: DeserializeOwned>(
    r: R,
) -> Result<(C, ParamStore<f32>), NnError> {
    let mut r = Reader { inner: r };
    if r.bytes(MAGIC.len(), "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(corrupt(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n = r.u32("config length")? as usize;
    let json = r.bytes(n, "config")?;
    let config = serde_json::from_slice(&json).map_err(|e| corrupt(format!("config: {e}")))?;

    let count = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name =
            String::from_utf8(r.bytes(n, "name")?).map_err(|_| corrupt("name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(corrupt(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = r.u64("extent")?;
            numel = numel.saturating_mul(e);
            shape.push(e as usize);
        }
        if numel == 0 || numel > MAX_FIELD {
            return Err(corrupt(format!("{name}: implausible shape {shape:?}")));
        }
        let raw = r.bytes(numel as usize * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if params.contains(&name) {
            return Err(corrupt(format!("duplicate parameter {name:?}")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    let mut tail = [0u8; 1];
    if r.inner.read(&mut tail)? != 0 {
        return Err(corrupt("trailing bytes after last parameter"));
    }
    Ok((config, params))
}

pub fn save<C: Serialize>(
    path: &Path,
    config: &C,
    params: &ParamStore<f32>,
) -> Result<(), NnError> {
    write_checkpoint(BufWriter::new(File::create(path)?), config, params)
}

pub fn load<C: DeserializeOwned>(path: &Path) -> Result<(C, ParamStore<f32>), NnError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Encoder, EncoderConfig};

    fn encoded(config: &EncoderConfig, params: &ParamStore<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, config, params).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let enc = Encoder::<f32>::new(EncoderConfig::default(), 3).unwrap();
        let mut params = enc.params.clone();
        // Values without a short decimal form, plus signed zero and subnormals.
        params.get_mut("fusion.bias").unwrap().data_mut()[..3].copy_from_slice(&[
            -0.0,
            1e-40,
            f32::MAX,
        ]);
        let buf = encoded(&enc.config, &params);
        let (config, back): (EncoderConfig, ParamStore<f32>) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(config, enc.config);
        assert_eq!(back.len(), params.len());
        for ((n1, t1), (n2, t2)) in params.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2), "{n1}");
        }
    }

    #[test]
    fn rejects_corruption() {
        let enc = Encoder::<f32>::new(
            EncoderConfig {
                d_model: 8,
                d_ffn: 8,
                vocab_size: 5,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let buf = encoded(&enc.config, &enc.params);
        let read = |b: &[u8]| read_checkpoint::<_, EncoderConfig>(b).map(|_| ());

        let mut bad_magic = buf.clone();
        bad_magic[0] ^= 0xff;
        assert!(matches!(read(&bad_magic), Err(NnError::Checkpoint(m)) if m.contains("magic")));

        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(matches!(read(&bad_version), Err(NnError::Checkpoint(m)) if m.contains("version")));

        assert!(
            matches!(read(&buf[..buf.len() - 1]), Err(NnError::Checkpoint(m)) if m.contains("truncated"))
        );

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read(&trailing), Err(NnError::Checkpoint(m)) if m.contains("trailing")));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let enc = Encoder::<f32>::new(EncoderConfig::default(), 11).unwrap();
        save(&path, &enc.config, &enc.params).unwrap();
        let (config, params): (EncoderConfig, _) = load(&path).unwrap();
        assert_eq!(Encoder { config, params }, enc);
        assert!(matches!(
            load::<EncoderConfig>(&dir.path().join("missing")),
            Err(NnError::Io(_))
        ));
    }
}
