//! Versioned binary checkpoints: a JSON config echo plus named f64 tensors.
//!
//! Layout (little-endian): 8-byte magic, u32 version, kind string, config
//! JSON string, tensor count, then per tensor: name, trainable flag, dims,
//! raw f64 data. Strings are u64 length + UTF-8 bytes.

use crate::error::{Error, Result};
use crate::tensor::{Arr, ParamStore};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CXGCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    /// Stage tag, e.g. "vae", "ldm", "predictor".
    pub kind: String,
    /// Exact JSON echo of the stage configuration.
    pub config_json: String,
    pub params: ParamStore,
}

pub fn save(path: &Path, kind: &str, config_json: &str, params: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    write_str(&mut w, kind).map_err(io)?;
    write_str(&mut w, config_json).map_err(io)?;
    w.write_u64::<LittleEndian>(params.len() as u64).map_err(io)?;
    for (id, name, value) in params.iter() {
        write_str(&mut w, name).map_err(io)?;
        w.write_u8(params.is_trainable(id) as u8).map_err(io)?;
        w.write_u64::<LittleEndian>(value.ndim() as u64).map_err(io)?;
        for &d in value.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &x in value.iter() {
            w.write_f64::<LittleEndian>(x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let kind = read_str(&mut r).map_err(io)?;
    let config_json = read_str(&mut r).map_err(io)?;
    let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = read_str(&mut r).map_err(io)?;
        let trainable = r.read_u8().map_err(io)? != 0;
        let ndim = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        let value: Arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::data(format!("{}: bad tensor {name}: {e}", path.display())))?;
        if trainable {
            params.add(name, value);
        } else {
            params.add_frozen(name, value);
        }
    }
    Ok(Checkpoint {
        kind,
        config_json,
        params,
    })
}

/// Load and require a specific stage kind, for clear stage-dependency errors.
pub fn load_expecting(path: &Path, kind: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::data(format!(
            "missing {kind} checkpoint: {} (run the corresponding training stage first)",
            path.display()
        )));
    }
    let ck = load(path)?;
    if ck.kind != kind {
        return Err(Error::data(format!(
            "{} is a '{}' checkpoint, expected '{kind}'",
            path.display(),
            ck.kind
        )));
    }
    Ok(ck)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use crate::tensor::randn;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut store = ParamStore::new();
        let mut r = rng(3);
        store.add("layer.w", randn(&[3, 4], &mut r));
        store.add_frozen("frozen.table", randn(&[2, 2, 2], &mut r));
        let config = r#"{"lr":0.001,"epochs":5}"#;
        save(&path, "vae", config, &store).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.kind, "vae");
        assert_eq!(ck.config_json, config);
        assert_eq!(ck.params.len(), 2);
        let id = ck.params.id_by_name("layer.w").unwrap();
        assert_eq!(ck.params.value(id), store.value(store.id_by_name("layer.w").unwrap()));
        let fid = ck.params.id_by_name("frozen.table").unwrap();
        assert!(!ck.params.is_trainable(fid));
    }

    #[test]
    fn wrong_kind_is_a_clear_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, "vae", "{}", &ParamStore::new()).unwrap();
        let err = load_expecting(&path, "ldm").unwrap_err();
        assert!(err.to_string().contains("expected 'ldm'"));
        assert!(load_expecting(&dir.path().join("nope.ckpt"), "vae").is_err());
    }
}
