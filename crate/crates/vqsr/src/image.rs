//! Planar float image type and PNG I/O. Pixels live in [0, 1] as f32,
//! channel-major (CHW), which is the layout every network input expects;
//! 8-bit quantization happens only at the file boundary.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    /// CHW planar, values nominally in [0, 1].
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Image::from_planar",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Luma plane by the BT.601 weighting used for filtering and metrics.
    /// Grayscale images pass through, anything else must be RGB.
    pub fn luma_bt601(&self) -> Result<Vec<f32>> {
        match self.channels {
            1 => Ok(self.plane(0).to_vec()),
            3 => {
                let hw = self.height * self.width;
                let (r, g, b) = (self.plane(0), &self.data[hw..2 * hw], &self.data[2 * hw..]);
                Ok((0..hw)
                    .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                    .collect())
            }
            c => Err(Error::Input(format!("luma needs 1 or 3 channels, image has {c}"))),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Input(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Image::new(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    /// Stack images of identical shape into an NCHW tensor.
    pub fn batch_tensor(images: &[Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::shape(
                    "batch_tensor",
                    format!("{c}x{h}x{w}"),
                    format!("{}x{}x{}", img.channels, img.height, img.width),
                ));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Slice sample `n` out of an NCHW tensor.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Image> {
        let (nn, c, h, w) = t.dims4()?;
        if n >= nn {
            return Err(Error::Input(format!("sample {n} out of batch of {nn}")));
        }
        let chw = c * h * w;
        Image::from_planar(c, h, w, t.data()[n * chw..(n + 1) * chw].to_vec())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::ImageReader::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
            .decode()
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Image::new(3, h, w);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
            }
        }
        Ok(img)
    }

    /// Write as 8-bit PNG (RGB for 3 channels, grayscale for 1), clamping
    /// and rounding.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            3 => {
                let mut buf = image::RgbImage::new(w, h);
                for (x, y, p) in buf.enumerate_pixels_mut() {
                    for c in 0..3 {
                        p.0[c] = to_u8(self.get(c, y as usize, x as usize));
                    }
                }
                buf.save(path)
            }
            1 => {
                let mut buf = image::GrayImage::new(w, h);
                for (x, y, p) in buf.enumerate_pixels_mut() {
                    p.0[0] = to_u8(self.get(0, y as usize, x as usize));
                }
                buf.save(path)
            }
            c => {
                return Err(Error::Input(format!(
                    "PNG output supports 1 or 3 channels, image has {c}"
                )))
            }
        };
        res.map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}
