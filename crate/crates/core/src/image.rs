//! Planar floating-point images and 8-bit file I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// A channels × height × width image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
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
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Input(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.dims(),
                other.dims()
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

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the `h × w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Input(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Mirror-pads bottom and right edges (edge pixel not repeated) up to `h × w`.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> Result<Self> {
        if h < self.height || w < self.width {
            return Err(Error::Input("reflect_pad_to cannot shrink".into()));
        }
        Ok(Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, reflect_index(y, self.height), reflect_index(x, self.width))
        }))
    }

    /// Luma plane (Rec. 601 weights) for single-channel processing.
    pub fn to_gray(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i]
            })
            .collect()
    }

    /// `1 × C × H × W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks same-shaped images into a `B × C × H × W` tensor.
    pub fn stack(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("cannot stack an empty image list".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.check_same_shape(img, "stack")?;
            data.extend_from_slice(&img.data);
        }
        let (c, h, w) = first.dims();
        let t = Tensor::from_vec(data, (images.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits a `B × C × H × W` (or `C × H × W`) tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t.clone(),
            r => return Err(Error::Input(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (b, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = c * h * w;
        (0..b)
            .map(|i| ImageTensor::new(c, h, w, flat[i * n..(i + 1) * n].to_vec()))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = rgb.as_raw();
        Ok(Self::from_fn(3, h, w, |c, y, x| {
            raw[(y * w + x) * 3 + c] as f32 / 255.0
        }))
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.channels {
            3 => {
                let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                        let (x, y) = (x as usize, y as usize);
                        Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
                    });
                buf.save(path)
            }
            1 => {
                let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    image::Luma([q(self.get(0, y as usize, x as usize))])
                });
                buf.save(path)
            }
            c => {
                return Err(Error::Input(format!(
                    "cannot encode a {c}-channel image"
                )))
            }
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Round-trips values through 8-bit quantization.
    pub fn quantize_u8(mut self) -> Self {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }
}

/// Whole-sample symmetric reflection (`d c b | a b c d | c b a`).
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Signed variant of [`reflect_index`] for offsets that may be negative.
pub(crate) fn reflect_signed(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period) as usize;
    reflect_index(m, n)
}

/// Image files (PNG/JPEG) directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && is_image_path(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}
