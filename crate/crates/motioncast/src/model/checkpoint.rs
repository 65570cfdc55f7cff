//! Checkpoint container: the model configuration as JSON plus every
//! parameter group as raw little-endian f64, so weights round-trip
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;

const MAGIC: &[u8; 8] = b"MCCKPT1\n";

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    w.write_u32::<LittleEndian>(config_json.len() as u32)
        .map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;

    let groups = params.groups();
    w.write_u32::<LittleEndian>(groups.len() as u32)
        .map_err(io_err)?;
    for (name, view) in groups {
        let bytes = name.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)
            .map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        w.write_u64::<LittleEndian>(view.len() as u64).map_err(io_err)?;
        for &v in view.iter() {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let config_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json).map_err(io_err)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    config.validate()?;

    let mut params = ParamSet::zeros(&config);
    let n_groups = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    {
        let mut groups = params.groups_mut();
        if n_groups != groups.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter groups, config implies {}",
                n_groups,
                groups.len()
            )));
        }
        for (name, view) in groups.iter_mut() {
            let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io_err)?;
            let stored = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("group name is not UTF-8".into()))?;
            if &stored != name {
                return Err(Error::Format(format!(
                    "group order mismatch: found {stored:?}, expected {name:?}"
                )));
            }
            let count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
            if count != view.len() {
                return Err(Error::Format(format!(
                    "group {name} stores {count} values, expected {}",
                    view.len()
                )));
            }
            for v in view.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
        }
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("trailing bytes after checkpoint".into())),
        Err(e) => return Err(io_err(e)),
    }
    Ok((config, params))
}

/// Field-by-field differences between two configurations, as
/// `name: left vs right` lines. Empty when compatible.
pub fn config_diff(left: &ModelConfig, right: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(left).expect("config serializes");
    let b = serde_json::to_value(right).expect("config serializes");
    let (a, b) = match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => (a, b),
        _ => unreachable!("configs are objects"),
    };
    let mut out = Vec::new();
    for (key, va) in &a {
        let vb = &b[key];
        if va != vb {
            out.push(format!("{key}: {va} vs {vb}"));
        }
    }
    out
}
