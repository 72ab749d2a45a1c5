use crate::{Error, Result};

/// Row-major image with interleaved channels in linear radiometric units.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!("{channels} channels, expected 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Checks that `mask` is a single-channel image of the same size.
    pub fn check_mask(&self, mask: &Image) -> Result<()> {
        if mask.channels != 1 || mask.width != self.width || mask.height != self.height {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{}x{} for image {}x{}",
                mask.width, mask.height, mask.channels, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Crops a `w`x`h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = self.index(x0, y, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::from_vec(w, h, c, data)
    }

    /// 2x box-filter downsample; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Image {
        let (w, h, c) = (self.width / 2, self.height / 2, self.channels);
        let mut out = Image::zeros(w.max(1), h.max(1), c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let s = self.get(2 * x, 2 * y, ch)
                        + self.get(2 * x + 1, 2 * y, ch)
                        + self.get(2 * x, 2 * y + 1, ch)
                        + self.get(2 * x + 1, 2 * y + 1, ch);
                    out.set(x, y, ch, 0.25 * s);
                }
            }
        }
        out
    }

    /// Number of nonzero pixels of a single-channel mask.
    pub fn mask_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Accumulates `weight * other` into `self` (same shape).
    pub fn add_scaled(&mut self, other: &Image, weight: f32) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += weight * b;
        }
        Ok(())
    }
}
