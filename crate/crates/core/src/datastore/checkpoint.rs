use std::path::Path;

use super::binary::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::probes::{DenseProbe, ProbeConfig};
use crate::tensorcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"P3DC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Layout: `"P3DC"`, version u16, probe config as JSON (u32 byte length +
/// UTF-8), parameter count u32, then per parameter: ndim u8, ndim × u32
/// dims, f32 payload. Parameters follow [`DenseProbe::params`] order.
pub fn probe_to_bytes(probe: &DenseProbe<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(probe.config()).map_err(|e| Error::invalid(e.to_string()))?;
    let params = probe.params();
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(dim_u32(json.len(), "config length")?);
    w.bytes(&json);
    w.u32(dim_u32(params.len(), "parameter count")?);
    for p in params {
        let ndim = u8::try_from(p.shape().len()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
        w.u8(ndim);
        for &d in p.shape() {
            w.u32(dim_u32(d, "dimension")?);
        }
        w.f32s(p.data());
    }
    Ok(w.buf)
}

pub fn probe_from_bytes(bytes: &[u8], path: &Path) -> Result<DenseProbe<f32>> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format_error(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let config: ProbeConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| r.corrupt(format!("probe config: {e}")))?;
    config.validate().map_err(|e| r.corrupt(e.to_string()))?;
    let mut probe = DenseProbe::zeros(config)?;
    let expected = probe.params().len();
    let count = r.u32("parameter count")? as usize;
    if count != expected {
        return Err(r.corrupt(format!("{count} parameters stored, config implies {expected}")));
    }
    let mut values = Vec::with_capacity(count);
    for slot in probe.params() {
        let ndim = r.u8("rank")? as usize;
        let dims: Vec<u32> = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<_>>()?;
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        if shape != slot.shape() {
            return Err(r.corrupt(format!("parameter shape {shape:?}, config implies {:?}", slot.shape())));
        }
        let n = r.count(&dims, "parameter")?;
        values.push(Tensor::new(shape, r.f32s(n, "parameter payload")?)?);
    }
    r.finish()?;
    probe.set_params(values)?;
    Ok(probe)
}

pub fn checkpoint_probe(path: &Path, probe: &DenseProbe<f32>) -> Result<()> {
    write_file(path, &probe_to_bytes(probe)?)
}

/// Loads a checkpoint with whatever configuration it stores.
pub fn load_probe(path: &Path) -> Result<DenseProbe<f32>> {
    probe_from_bytes(&read_file(path)?, path)
}

/// Loads a checkpoint that must match `expected`.
pub fn restore_probe(path: &Path, expected: &ProbeConfig) -> Result<DenseProbe<f32>> {
    let probe = load_probe(path)?;
    if probe.config() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "checkpoint holds a {} probe {:?}, expected a {} probe {:?}",
                probe.config().task().name(),
                probe.config(),
                expected.task().name(),
                expected
            ),
        });
    }
    Ok(probe)
}
