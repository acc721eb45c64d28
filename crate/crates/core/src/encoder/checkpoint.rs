//! Binary checkpoint: little-endian, fixed field order.
//!
//! ```text
//! magic "CMCK" | version u32 | meta_len u32 | meta utf8 | config_len u32 | config json
//! | n_segments u32 | { name_len u32 | name | rows u32 | cols u32 }* | f64 data
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{param_layout, EncoderConfig, ModelParams};
use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CMCK";

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Serialize `params` with an opaque metadata string (provenance JSON).
pub fn write_checkpoint(w: &mut impl Write, params: &ModelParams, meta: &str) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    put_str(w, meta)?;
    put_str(w, &serde_json::to_string(&params.config).expect("config serializes"))?;
    let layout = params.theta.layout();
    w.write_u32::<LittleEndian>(layout.segments().len() as u32)?;
    for s in layout.segments() {
        put_str(w, &s.name)?;
        w.write_u32::<LittleEndian>(s.rows as u32)?;
        w.write_u32::<LittleEndian>(s.cols as u32)?;
    }
    for &x in params.theta.data() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read, what: &Path) -> Result<(ModelParams, String)> {
    let io = |e| Error::io(what, e);
    let bad = |reason: String| Error::Parse { path: what.to_path_buf(), line: 0, reason };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { what: "checkpoint", expected: CHECKPOINT_VERSION, found: version });
    }
    let meta = get_str(r).map_err(io)?;
    let config: EncoderConfig = serde_json::from_str(&get_str(r).map_err(io)?).map_err(|e| bad(e.to_string()))?;
    config.validate()?;
    let layout = param_layout(&config);
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if n != layout.segments().len() {
        return Err(bad(format!("{n} segments, config implies {}", layout.segments().len())));
    }
    for s in layout.segments() {
        let name = get_str(r).map_err(io)?;
        let rows = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if name != s.name || rows != s.rows || cols != s.cols {
            return Err(bad(format!("segment {name} {rows}x{cols} does not match {} {}x{}", s.name, s.rows, s.cols)));
        }
    }
    let mut data = vec![0.0; layout.len()];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let theta = ParamVector::from_data(Arc::new(layout), data)?;
    Ok((ModelParams { config, theta }, meta))
}

pub fn save_checkpoint(params: &ModelParams, meta: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, meta).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn round_trip_and_byte_stability() {
        let c = EncoderConfig { d: 4, layers: 1, heads: 2, ..EncoderConfig::new(10, 6) };
        let p = init_params(&c, 3).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &p, "{}").unwrap();
        let mut b = Vec::new();
        write_checkpoint(&mut b, &p, "{}").unwrap();
        assert_eq!(a, b);
        let (q, meta) = read_checkpoint(&mut a.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(q, p);
        assert_eq!(meta, "{}");
        assert_eq!(&a[..4], b"CMCK");
    }

    #[test]
    fn wrong_version_and_truncation_fail() {
        let c = EncoderConfig { d: 4, layers: 1, heads: 2, ..EncoderConfig::new(10, 6) };
        let p = init_params(&c, 3).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &p, "").unwrap();
        let mut v = a.clone();
        v[4] = 9;
        assert!(matches!(read_checkpoint(&mut v.as_slice(), Path::new("m")), Err(Error::Version { found: 9, .. })));
        let cut = &a[..a.len() - 3];
        assert!(read_checkpoint(&mut &cut[..], Path::new("m")).is_err());
    }
}
