use std::path::Path;

use super::binary::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const DENSE_MAP_MAGIC: &[u8; 4] = b"P3DM";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// meters, 0 = invalid
    Depth,
    /// interleaved unit vectors, 3 channels
    Normal3,
    /// 0 or 1
    Mask,
}

impl MapKind {
    pub fn code(self) -> u8 {
        match self {
            MapKind::Depth => 0,
            MapKind::Normal3 => 1,
            MapKind::Mask => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MapKind::Depth,
            1 => MapKind::Normal3,
            2 => MapKind::Mask,
            _ => return None,
        })
    }

    pub fn channels(self) -> usize {
        if self == MapKind::Normal3 {
            3
        } else {
            1
        }
    }
}

/// Layout: `"P3DM"`, kind u8 (0 depth, 1 normal3, 2 mask), H u32, W u32,
/// then H·W·channels little-endian f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    pub kind: MapKind,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DenseMap {
    pub fn new(kind: MapKind, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self {
            kind,
            height,
            width,
            data,
        };
        m.validate().map_err(Error::invalid)?;
        Ok(m)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let want = self.height * self.width * self.kind.channels();
        if self.data.len() != want {
            return Err(format!(
                "{:?} map has {} values, expected {want}",
                self.kind,
                self.data.len()
            ));
        }
        let bad = match self.kind {
            MapKind::Depth => self.data.iter().position(|d| !(d.is_finite() && *d >= 0.0)),
            MapKind::Normal3 => self.data.iter().position(|v| !v.is_finite()),
            MapKind::Mask => self.data.iter().position(|v| *v != 0.0 && *v != 1.0),
        };
        match bad {
            Some(i) => Err(format!(
                "{:?} map value {} at index {i} is invalid",
                self.kind, self.data[i]
            )),
            None => Ok(()),
        }
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v != 0.0).collect()
    }

    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        Self::new(
            MapKind::Mask,
            height,
            width,
            mask.iter().map(|&m| m as u8 as f32).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate().map_err(Error::invalid)?;
        let mut w = Writer::default();
        w.bytes(DENSE_MAP_MAGIC);
        w.u8(self.kind.code());
        w.u32(dim_u32(self.height, "height")?);
        w.u32(dim_u32(self.width, "width")?);
        w.f32s(&self.data);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(DENSE_MAP_MAGIC)?;
        let code = r.u8("kind")?;
        let kind = MapKind::from_code(code).ok_or_else(|| r.format_error(format!("unknown map kind {code}")))?;
        let dims = [r.u32("height")?, r.u32("width")?, kind.channels() as u32];
        let n = r.count(&dims, "map")?;
        let data = r.f32s(n, "map payload")?;
        r.finish()?;
        let m = Self {
            kind,
            height: dims[0] as usize,
            width: dims[1] as usize,
            data,
        };
        m.validate().map_err(|msg| r.corrupt(msg))?;
        Ok(m)
    }
}

pub fn write_dense_map(path: &Path, map: &DenseMap) -> Result<()> {
    write_file(path, &map.to_bytes()?)
}

pub fn read_dense_map(path: &Path) -> Result<DenseMap> {
    DenseMap::from_bytes(&read_file(path)?, path)
}
