//! Flat binary parameter checkpoints.
//!
//! Layout: the magic bytes `SALG`, one version byte `0x01`, then one record
//! per parameter in registration order. Each record is
//! `name_len (u64 LE) | name bytes | rank (u64 LE) | dims (u64 LE each) |
//! data (f64 LE each)`.

use std::io::{Read, Write};

use crate::error::{Result, SalgError};

use super::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SALG";
pub const CHECKPOINT_VERSION: u8 = 0x01;

pub fn save_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        let shape = store.shape(id);
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in store.value(id) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u64::from_le_bytes(buf))),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Loads a checkpoint into an already-built store. Every record must match a
/// registered parameter's name and shape, and every parameter must be
/// covered.
pub fn load_checkpoint(store: &mut ParamStore, mut r: impl Read) -> Result<()> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)
        .map_err(|e| SalgError::CheckpointFormat(format!("truncated header: {e}")))?;
    if head[..4] != CHECKPOINT_MAGIC {
        return Err(SalgError::CheckpointFormat("bad magic bytes".into()));
    }
    if head[4] != CHECKPOINT_VERSION {
        return Err(SalgError::CheckpointFormat(format!(
            "unsupported version {}, expected {CHECKPOINT_VERSION}",
            head[4]
        )));
    }
    let mut loaded = vec![false; store.len()];
    while let Some(name_len) = read_u64(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)
            .map_err(|e| SalgError::CheckpointFormat(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| SalgError::CheckpointFormat("non-UTF8 parameter name".into()))?;
        let rank = read_u64(&mut r)?
            .ok_or_else(|| SalgError::CheckpointFormat(format!("{name}: missing rank")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u64(&mut r)?
                .ok_or_else(|| SalgError::CheckpointFormat(format!("{name}: truncated dims")))?;
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|e| SalgError::CheckpointFormat(format!("{name}: truncated data: {e}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        let id = store
            .lookup(&name)
            .ok_or_else(|| SalgError::CheckpointFormat(format!("unknown parameter {name}")))?;
        if store.shape(id) != shape.as_slice() {
            return Err(SalgError::CheckpointFormat(format!(
                "{name}: shape {:?} in file, {:?} in model",
                shape,
                store.shape(id)
            )));
        }
        if std::mem::replace(&mut loaded[id.0], true) {
            return Err(SalgError::CheckpointFormat(format!("duplicate record for {name}")));
        }
        store.set_value(id, data)?;
    }
    if let Some(missing) = loaded.iter().position(|l| !l) {
        return Err(SalgError::CheckpointFormat(format!(
            "checkpoint missing parameter {}",
            store.name(super::ParamId(missing))
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_preserves_bits() {
        let store = {
            let mut s = ParamStore::new();
            s.register("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.25]).unwrap())
                .unwrap();
            s.register("a.b", Tensor::new(vec![3], vec![0.5, -0.5, 9.0]).unwrap()).unwrap();
            s
        };
        let mut bytes = Vec::new();
        save_checkpoint(&store, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SALG");
        assert_eq!(bytes[4], 0x01);

        let mut other = ParamStore::new();
        other.register("a.w", Tensor::zeros(vec![2, 3])).unwrap();
        other.register("a.b", Tensor::zeros(vec![3])).unwrap();
        load_checkpoint(&mut other, bytes.as_slice()).unwrap();
        let a = other.lookup("a.w").unwrap();
        assert_eq!(other.value(a), store.value(store.lookup("a.w").unwrap()));
    }

    #[test]
    fn shape_mismatch_and_missing_params_are_errors() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(vec![4])).unwrap();
        let mut bytes = Vec::new();
        save_checkpoint(&store, &mut bytes).unwrap();

        let mut wrong_shape = ParamStore::new();
        wrong_shape.register("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(load_checkpoint(&mut wrong_shape, bytes.as_slice()).is_err());

        let mut extra = ParamStore::new();
        extra.register("w", Tensor::zeros(vec![4])).unwrap();
        extra.register("v", Tensor::zeros(vec![1])).unwrap();
        assert!(load_checkpoint(&mut extra, bytes.as_slice()).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(vec![1])).unwrap();
        assert!(load_checkpoint(&mut store, b"GLAS\x01".as_slice()).is_err());
    }
}
