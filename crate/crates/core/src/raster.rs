//! Interleaved RGB float rasters and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H x W x 3` grid of `f32` values. The value range is a property
/// of the owner (scene pixels live in `[0, 1]`, conditioning images in `[-1, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Start offset of a `size`-long box centered on `center`, shifted inward so
/// the whole box fits in `[0, extent)`. Requires `size <= extent`.
pub fn clamp_box_start(center: i64, size: usize, extent: usize) -> usize {
    debug_assert!(size <= extent);
    let start = center - (size / 2) as i64;
    start.clamp(0, (extent - size) as i64) as usize
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x3 image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
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
    fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Square crop centered on `(cx, cy)` with the inward clamp rule.
    pub fn crop_centered(&self, cx: i64, cy: i64, size: usize) -> Result<RgbImage> {
        if size == 0 || size > self.width || size > self.height {
            return Err(Error::Invalid(format!(
                "crop size {size} does not fit a {}x{} image",
                self.width, self.height
            )));
        }
        let x0 = clamp_box_start(cx, size, self.width);
        let y0 = clamp_box_start(cy, size, self.height);
        Ok(self.crop(x0, y0, size, size))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = self.idx(x0, y);
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage { width: w, height: h, data }
    }

    /// Overwrite the region at `(x0, y0)` with `src`. The region must fit.
    pub fn paste(&mut self, src: &RgbImage, x0: usize, y0: usize) {
        assert!(x0 + src.width <= self.width && y0 + src.height <= self.height, "paste out of bounds");
        for y in 0..src.height {
            let d = self.idx(x0, y0 + y);
            let s = src.idx(0, y);
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }

    /// Planar `3 x H x W` copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; hw * 3];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, chw: &[f32]) -> Result<Self> {
        let hw = width * height;
        if chw.len() != hw * 3 {
            return Err(Error::Shape(format!("{} planar values for {width}x{height}x3", chw.len())));
        }
        let mut data = vec![0.0; hw * 3];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * hw + p];
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> RgbImage {
        RgbImage { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Quantize from the value range `[lo, hi]` to 8-bit RGB.
    pub fn to_rgb8(&self, lo: f32, hi: f32) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                (t * 255.0).round() as u8
            })
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8], lo: f32, hi: f32) -> Result<Self> {
        let data = bytes.iter().map(|&b| lo + (hi - lo) * b as f32 / 255.0).collect();
        Self::new(width, height, data)
    }

    /// Write a lossless 8-bit PNG, mapping `[lo, hi]` to `[0, 255]`.
    pub fn save_png(&self, path: &Path, lo: f32, hi: f32) -> Result<()> {
        let bytes = self.to_rgb8(lo, hi);
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path, lo: f32, hi: f32) -> Result<Self> {
        let (w, h, bytes) = load_rgb8(path)?;
        Self::from_rgb8(w, h, &bytes, lo, hi)
    }
}

/// Read a PNG as raw 8-bit RGB: `(width, height, bytes)`.
pub fn load_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}
