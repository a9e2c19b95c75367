//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "MDMLABCK"
//! version  u32
//! config   u32 vocab_size, d_model, n_layers, n_heads, d_ff, max_len; f64 init_std
//! count    u32 number of tensors
//! tensors  (u32 ndim, u32 dims[ndim], f32 data[prod(dims)]) in declaration order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::{DenoiserConfig, DenoiserParams, Params};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MDMLABCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &DenoiserParams) -> Vec<u8> {
    let c = params.config();
    let layout = c.layout();
    let mut out = Vec::with_capacity(64 + 4 * params.len() + 16 * layout.tensors.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.init_std.to_le_bytes());
    out.extend_from_slice(&(layout.tensors.len() as u32).to_le_bytes());
    let data = params.as_slice();
    for spec in &layout.tensors {
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &dim in &spec.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for x in &data[spec.range()] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err("truncated file".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<DenoiserParams> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8).map_err(fail)?;
    if magic != MAGIC {
        return Err(fail("bad magic bytes".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32().map_err(fail)? as usize;
    }
    let config = DenoiserConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_len: dims[5],
        init_std: r.f64().map_err(fail)?,
    };
    config
        .validate()
        .map_err(|e| fail(format!("invalid config: {e}")))?;
    let layout = config.layout();
    let count = r.u32().map_err(fail)? as usize;
    if count != layout.tensors.len() {
        return Err(fail(format!(
            "shape mismatch: {count} tensors, config implies {}",
            layout.tensors.len()
        )));
    }
    let mut data = Vec::with_capacity(layout.total);
    for spec in &layout.tensors {
        let ndim = r.u32().map_err(fail)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim.min(8) {
            shape.push(r.u32().map_err(fail)? as usize);
        }
        if shape != spec.shape {
            return Err(fail(format!(
                "shape mismatch for {}: file {:?}, expected {:?}",
                spec.name, shape, spec.shape
            )));
        }
        let raw = r.take(4 * spec.len()).map_err(fail)?;
        data.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Params::from_vec(config, data)
}

/// Write atomically: the file is either absent, the previous version, or complete.
pub fn save_checkpoint(params: &DenoiserParams, path: &Path) -> Result<()> {
    let bytes = encode(params);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}
