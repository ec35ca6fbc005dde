//! Image tensors, bilinear resampling and encoder input normalization.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Per-channel means used to standardize encoder inputs (RGB order).
pub const NORM_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
/// Per-channel standard deviations used to standardize encoder inputs.
pub const NORM_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

/// Smallest side accepted by [`preprocess_image`].
pub const MIN_SIDE: usize = 16;

/// A decoded image, `height × width × channels`, stored as `f64`.
///
/// Decoded images hold values in `[0, 1]`; preprocessed images hold
/// standardized values and are no longer bounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
    source_path: Option<PathBuf>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {h}x{w}x{c}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite pixels".into()));
        }
        Ok(Self {
            pixels,
            source_path: None,
        })
    }

    /// Constant image with the given per-channel value.
    pub fn filled(height: usize, width: usize, value: [f64; 3]) -> Result<Self> {
        let pixels = Array3::from_shape_fn((height, width, 3), |(_, _, c)| value[c]);
        Self::new(pixels)
    }

    pub fn with_source_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = Some(path.into());
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    /// Loads a PNG or JPEG file, converting to RGB in `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory(&bytes)?.to_rgb8();
        Ok(Self::from_rgb8(&decoded)?.with_source_path(path))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self::new(pixels)
    }

    /// Quantizes to 8-bit RGB. Single-channel images are replicated.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, c) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.pixels[[y as usize, x as usize, ch.min(c - 1)]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    /// Mean over channels, useful for grayscale display.
    pub fn luminance(&self) -> Array2<f64> {
        let c = self.channels() as f64;
        self.pixels.sum_axis(ndarray::Axis(2)).mapv(|v| v / c)
    }
}

/// Maps an output coordinate to the source grid with half-pixel centers.
#[inline]
fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        a + (b - a) * t
    }
}

/// Bilinear resize of a 2-D map (half-pixel centers, edge clamping).
pub fn resize_bilinear_2d(src: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let rows: Vec<_> = (0..height).map(|y| source_coord(y, height, sh)).collect();
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, width, sw)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, wy) = rows[y];
        let (x0, x1, wx) = cols[x];
        let top = lerp(src[[y0, x0]], src[[y0, x1]], wx);
        let bottom = lerp(src[[y1, x0]], src[[y1, x1]], wx);
        lerp(top, bottom, wy)
    })
}

/// Bilinear resize of every channel of an `H × W × C` array.
pub fn resize_bilinear(src: ArrayView3<'_, f64>, height: usize, width: usize) -> Array3<f64> {
    let (_, _, c) = src.dim();
    let mut out = Array3::zeros((height, width, c));
    for ch in 0..c {
        let plane = resize_bilinear_2d(src.index_axis(ndarray::Axis(2), ch), height, width);
        out.index_axis_mut(ndarray::Axis(2), ch).assign(&plane);
    }
    out
}

/// Resizes to `side × side` and standardizes each channel with
/// [`NORM_MEAN`] / [`NORM_STD`].
pub fn preprocess_image(raw: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if raw.channels() != 3 {
        return Err(Error::ChannelMismatch(raw.channels()));
    }
    if side < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "side must be at least {MIN_SIDE}, got {side}"
        )));
    }
    let mut pixels = if raw.height() == side && raw.width() == side {
        raw.pixels.clone()
    } else {
        resize_bilinear(raw.pixels(), side, side)
    };
    for ((_, _, c), v) in pixels.indexed_iter_mut() {
        *v = (*v - NORM_MEAN[c]) / NORM_STD[c];
    }
    let mut out = ImageTensor::new(pixels)?;
    out.source_path = raw.source_path.clone();
    Ok(out)
}

/// Inverse of the channel standardization applied by [`preprocess_image`].
pub fn destandardize(pixel: [f64; 3]) -> [f64; 3] {
    [
        pixel[0] * NORM_STD[0] + NORM_MEAN[0],
        pixel[1] * NORM_STD[1] + NORM_MEAN[1],
        pixel[2] * NORM_STD[2] + NORM_MEAN[2],
    ]
}
