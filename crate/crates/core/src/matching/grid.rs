use crate::error::{Error, Result};
use crate::tensorcore::{Real, Tensor};

/// Dense H×W×C feature map of one image at one network block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub model_id: String,
    pub block_id: u8,
    height: usize,
    width: usize,
    channels: usize,
    /// row-major H×W×C
    data: Vec<f32>,
    /// source image (width, height) in pixels
    image_size: (usize, usize),
}

impl FeatureGrid {
    pub fn new(
        model_id: impl Into<String>,
        block_id: u8,
        (height, width, channels): (usize, usize, usize),
        data: Vec<f32>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature grid dimensions must be nonzero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("feature grid", &[height, width, channels], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid payload".into()));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("feature grid source image size must be nonzero"));
        }
        Ok(Self {
            model_id: model_id.into(),
            block_id,
            height,
            width,
            channels,
            data,
            image_size,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn with_image_size(mut self, image_size: (usize, usize)) -> Self {
        self.image_size = image_size;
        self
    }

    /// Feature vector of cell `(x, y)`.
    pub fn vector(&self, x: usize, y: usize) -> &[f32] {
        &self.data[(y * self.width + x) * self.channels..][..self.channels]
    }

    pub fn vector_at(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.channels..][..self.channels]
    }

    /// Image pixel (u, v) of the center of cell `(x, y)`. Integer pixel
    /// coordinates address pixel centers.
    pub fn cell_center(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = self.image_size.0 as f64 / self.width as f64;
        let sy = self.image_size.1 as f64 / self.height as f64;
        ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5)
    }

    /// Continuous grid position of image pixel `(u, v)`; inverse of
    /// [`FeatureGrid::cell_center`].
    pub fn grid_position(&self, u: f64, v: f64) -> (f64, f64) {
        let sx = self.image_size.0 as f64 / self.width as f64;
        let sy = self.image_size.1 as f64 / self.height as f64;
        ((u + 0.5) / sx - 0.5, (v + 0.5) / sy - 0.5)
    }

    /// Pixel extent of one cell along x and y.
    pub fn cell_extent(&self) -> (f64, f64) {
        (
            self.image_size.0 as f64 / self.width as f64,
            self.image_size.1 as f64 / self.height as f64,
        )
    }

    /// 1×C×H×W tensor view for the probes.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![T::zero(); h * w * c];
        for cell in 0..h * w {
            for k in 0..c {
                out[k * h * w + cell] = T::cast(self.data[cell * c + k] as f64);
            }
        }
        Tensor::new(vec![1, c, h, w], out).expect("sizes checked at construction")
    }
}
