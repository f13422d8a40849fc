//! Binary parameter snapshots.
//!
//! Layout: magic `WTFG`, format version (u32 LE), a count-prefixed list of
//! metadata strings (key/value, each length-prefixed UTF-8), then a
//! count-prefixed list of named arrays: name, rank (u32), dims (u64 each),
//! and a little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::{Arena, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WTFG";
pub const FORMAT_VERSION: u32 = 1;

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    /// Snapshot every parameter collection as `set/param` named arrays.
    pub fn from_arena(arena: &Arena, metadata: Vec<(String, String)>) -> Self {
        let arrays = arena
            .sets()
            .iter()
            .flat_map(|set| {
                set.params
                    .iter()
                    .map(move |p| (format!("{}/{}", set.name, p.name), p.value.clone()))
            })
            .collect();
        Checkpoint { metadata, arrays }
    }

    /// Writes parameter values back into a freshly-built arena. Every
    /// parameter must be present with an identical shape.
    pub fn load_into_arena(&self, arena: &mut Arena) -> Result<()> {
        for si in 0..arena.sets().len() {
            let set_name = arena.sets()[si].name.clone();
            for pi in 0..arena.sets()[si].params.len() {
                let full = format!("{}/{}", set_name, arena.sets()[si].params[pi].name);
                let stored = self
                    .arrays
                    .iter()
                    .find(|(n, _)| *n == full)
                    .map(|(_, t)| t)
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("checkpoint is missing array {full:?}"))
                    })?;
                let slot =
                    &mut arena.set_mut(crate::nn::SetId::from_index(si)).params[pi];
                if stored.shape() != slot.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "array {full:?} has shape {:?}, expected {:?}",
                        stored.shape(),
                        slot.value.shape()
                    )));
                }
                slot.value = stored.clone();
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path.display().to_string(), e);

        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;

        w.write_all(&(self.metadata.len() as u32).to_le_bytes()).map_err(io)?;
        for (k, v) in &self.metadata {
            write_string(&mut w, k).map_err(io)?;
            write_string(&mut w, v).map_err(io)?;
        }

        w.write_all(&(self.arrays.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, tensor) in &self.arrays {
            write_string(&mut w, name).map_err(io)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path.display().to_string(), e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?} in {}",
                magic,
                path.display()
            )));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }

        let meta_count = read_u32(&mut r).map_err(io)? as usize;
        let mut metadata = Vec::with_capacity(meta_count.min(1024));
        for _ in 0..meta_count {
            let k = read_string(&mut r, path)?;
            let v = read_string(&mut r, path)?;
            metadata.push((k, v));
        }

        let array_count = read_u32(&mut r).map_err(io)? as usize;
        let mut arrays = Vec::with_capacity(array_count.min(1024));
        for _ in 0..array_count {
            let name = read_string(&mut r, path)?;
            let rank = read_u32(&mut r).map_err(io)? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} claims rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(io)?;
                let d = u64::from_le_bytes(buf) as usize;
                len = len.checked_mul(d).ok_or_else(|| {
                    Error::Checkpoint(format!("array {name:?} dimensions overflow"))
                })?;
                shape.push(d);
            }
            if len > (1 << 30) {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} is implausibly large ({len} elements)"
                )));
            }
            let mut data = vec![0.0f64; len];
            for v in &mut data {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
            arrays.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint { metadata, arrays })
    }
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, path: &Path) -> Result<String> {
    let io = |e| Error::io(path.display().to_string(), e);
    let len = read_u32(r).map_err(io)? as usize;
    if len > (1 << 20) {
        return Err(Error::Checkpoint(format!("string of {len} bytes refused")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_metadata_and_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.wtfg");
        let ck = Checkpoint {
            metadata: vec![("arch".into(), "classic".into()), ("k".into(), "5".into())],
            arrays: vec![
                (
                    "alice/fc0.w".into(),
                    Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-12, -7.25]).unwrap(),
                ),
                ("alice/fc0.b".into(), Tensor::from_vec(&[3], vec![0.0; 3]).unwrap()),
                ("scalar".into(), Tensor::scalar(42.0)),
            ],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.arrays.len(), 3);
        for ((n1, t1), (n2, t2)) in back.arrays.iter().zip(&ck.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert_eq!(back.meta("k"), Some("5"));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wtfg");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn arena_round_trip_restores_every_parameter() {
        let mut arena = Arena::new();
        let s1 = arena.add_set("alice");
        arena.add_param(s1, "w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s2 = arena.add_set("bob");
        arena.add_param(s2, "b", Tensor::from_vec(&[2], vec![-1.0, 5.0]).unwrap());

        let ck = Checkpoint::from_arena(&arena, vec![("seed".into(), "7".into())]);

        let mut fresh = Arena::new();
        let f1 = fresh.add_set("alice");
        fresh.add_param(f1, "w", Tensor::zeros(&[2, 2]));
        let f2 = fresh.add_set("bob");
        fresh.add_param(f2, "b", Tensor::zeros(&[2]));
        ck.load_into_arena(&mut fresh).unwrap();
        assert_eq!(fresh.set(f1).params[0].value.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fresh.set(f2).params[0].value.data(), &[-1.0, 5.0]);

        // Shape mismatch is caught.
        let mut wrong = Arena::new();
        let w1 = wrong.add_set("alice");
        wrong.add_param(w1, "w", Tensor::zeros(&[4]));
        assert!(ck.load_into_arena(&mut wrong).is_err());
    }
}
