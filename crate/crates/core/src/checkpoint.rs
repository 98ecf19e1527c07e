//! Versioned binary checkpoints: a header carrying the run configuration
//! followed by the flat parameter vector.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PRIMCKPT"
//! version u32      currently 1
//! cfg_len u32      byte length of the UTF-8 config text
//! config  cfg_len  canonical RunConfig text
//! count   u64      number of f64 parameters
//! params  count*8  parameters in the documented flat order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{PrimeError, Result};
use crate::net::Net;

const MAGIC: &[u8; 8] = b"PRIMCKPT";
const VERSION: u32 = 1;

pub fn save(path: &Path, cfg: &RunConfig, net: &Net) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let cfg_text = cfg.to_text();
    let cfg_bytes = cfg_text.as_bytes();
    f.write_all(&(cfg_bytes.len() as u32).to_le_bytes())?;
    f.write_all(cfg_bytes)?;
    let flat = net.to_flat();
    f.write_all(&(flat.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, Net)> {
    let mut f = fs::File::open(path).map_err(|e| {
        PrimeError::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| PrimeError::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(PrimeError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(PrimeError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let cfg_len = read_u32(&mut f)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_bytes)
        .map_err(|_| PrimeError::Checkpoint("truncated config".into()))?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| PrimeError::Checkpoint("config is not UTF-8".into()))?;
    let cfg = RunConfig::from_text(&cfg_text)?;

    let count = read_u64(&mut f)? as usize;
    let codec = cfg.codec()?;
    let net_cfg = cfg.net_config(codec.base());
    if count != net_cfg.param_count() {
        return Err(PrimeError::Checkpoint(format!(
            "parameter count {count} does not match config ({} expected)",
            net_cfg.param_count()
        )));
    }
    let mut buf = vec![0u8; count * 8];
    f.read_exact(&mut buf)
        .map_err(|_| PrimeError::Checkpoint("truncated parameters".into()))?;
    let flat: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(PrimeError::Checkpoint("non-finite parameter".into()));
    }
    let net = Net::from_flat(net_cfg, &flat)?;
    Ok((cfg, net))
}

fn read_u32(f: &mut fs::File) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| PrimeError::Checkpoint("truncated field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut fs::File) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)
        .map_err(|_| PrimeError::Checkpoint("truncated field".into()))?;
    Ok(u64::from_le_bytes(b))
}
