use std::path::Path;

use super::binary::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::matching::FeatureGrid;

pub const FEATURE_MAGIC: &[u8; 4] = b"P3DF";
pub const FEATURE_VERSION: u16 = 1;

/// One block of a feature file: a row-major H×W×C payload.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub block_id: u8,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// All extracted blocks of one image for one model.
///
/// Layout: `"P3DF"`, version u16, model id (u16 byte length + UTF-8),
/// block count u8, then per block: id u8, H u32, W u32, C u32 and H·W·C
/// f32 values. All integers and floats are little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub model_id: String,
    pub blocks: Vec<FeatureBlock>,
}

impl FeatureFile {
    pub fn from_grids(grids: &[FeatureGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::invalid("feature file needs at least one block"))?;
        if grids.iter().any(|g| g.model_id != first.model_id) {
            return Err(Error::invalid("feature grids come from different models"));
        }
        Ok(Self {
            model_id: first.model_id.clone(),
            blocks: grids
                .iter()
                .map(|g| FeatureBlock {
                    block_id: g.block_id,
                    height: g.height(),
                    width: g.width(),
                    channels: g.channels(),
                    data: g.data().to_vec(),
                })
                .collect(),
        })
    }

    pub fn block(&self, block_id: u8) -> Option<&FeatureBlock> {
        self.blocks.iter().find(|b| b.block_id == block_id)
    }

    /// The block as a grid over an image of `image_size` (width, height).
    pub fn grid(&self, block_id: u8, image_size: (usize, usize)) -> Result<FeatureGrid> {
        let b = self
            .block(block_id)
            .ok_or_else(|| Error::invalid(format!("model `{}` has no block {block_id}", self.model_id)))?;
        FeatureGrid::new(
            self.model_id.clone(),
            b.block_id,
            (b.height, b.width, b.channels),
            b.data.clone(),
            image_size,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let id = self.model_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::invalid("model id longer than 65535 bytes"))?;
        let count = u8::try_from(self.blocks.len()).map_err(|_| Error::invalid("more than 255 blocks"))?;
        let mut w = Writer::default();
        w.bytes(FEATURE_MAGIC);
        w.u16(FEATURE_VERSION);
        w.u16(id_len);
        w.bytes(id);
        w.u8(count);
        for b in &self.blocks {
            if b.data.len() != b.height * b.width * b.channels {
                return Err(Error::shape(
                    "feature block",
                    &[b.height, b.width, b.channels],
                    &[b.data.len()],
                ));
            }
            w.u8(b.block_id);
            w.u32(dim_u32(b.height, "height")?);
            w.u32(dim_u32(b.width, "width")?);
            w.u32(dim_u32(b.channels, "channels")?);
            w.f32s(&b.data);
        }
        Ok(w.buf)
    }

    /// Parses a feature file; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(FEATURE_MAGIC)?;
        let version = r.u16("version")?;
        if version != FEATURE_VERSION {
            return Err(r.format_error(format!("unsupported feature file version {version}")));
        }
        let id_len = r.u16("model id length")? as usize;
        let model_id = std::str::from_utf8(r.take(id_len, "model id")?)
            .map_err(|_| r.corrupt("model id is not UTF-8"))?
            .to_string();
        let count = r.u8("block count")?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let block_id = r.u8("block id")?;
            let dims = [r.u32("height")?, r.u32("width")?, r.u32("channels")?];
            let n = r.count(&dims, "block")?;
            if blocks.iter().any(|b: &FeatureBlock| b.block_id == block_id) {
                return Err(r.corrupt(format!("duplicate block {block_id}")));
            }
            blocks.push(FeatureBlock {
                block_id,
                height: dims[0] as usize,
                width: dims[1] as usize,
                channels: dims[2] as usize,
                data: r.f32s(n, "block payload")?,
            });
        }
        r.finish()?;
        Ok(Self { model_id, blocks })
    }
}

pub fn write_feature_file(path: &Path, file: &FeatureFile) -> Result<()> {
    write_file(path, &file.to_bytes()?)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    FeatureFile::from_bytes(&read_file(path)?, path)
}
