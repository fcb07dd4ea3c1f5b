//! Image and mask containers, PNG I/O, resizing and the valid-pixel
//! compositing rule.
//!
//! Images are HxWx3 (or HxWx1 for derived maps) with values in [0, 1];
//! masks are HxW binary maps where 1 marks a missing pixel. PNG files are
//! 8-bit; a mask byte >= 128 decodes to 1 and masks are written as 0/255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ops, Tensor};

/// Real-valued image, channel-major (c, then rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f64) -> Self {
        let mut img = Self::new(height, width, channels);
        img.data.fill(v);
        img
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(height, width, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(y, x, c);
                    img.data[(c * height + y) * width + x] = v;
                }
            }
        }
        img
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

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// View as a [1, C, H, W] network tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.data.clone(),
        )
    }

    /// Back from a [1, C, H, W] tensor.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4();
        assert_eq!(n, 1, "from_tensor expects a single-sample tensor");
        ImageTensor {
            height: h,
            width: w,
            channels: c,
            data: t.data().to_vec(),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// Binary mask; 1 = missing/hole, 0 = valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize) -> Self {
        MaskTensor {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width);
        assert!(data.iter().all(|&v| v <= 1), "mask values must be 0/1");
        MaskTensor {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// View as a [1, 1, H, W] network tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Decode an 8-bit PNG. Grayscale replicates to 3 channels, alpha is
/// stripped, anything deeper than 8 bits is rejected.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    use image::DynamicImage::*;
    let rgb = match decoded {
        ImageLuma8(_) | ImageLumaA8(_) | ImageRgb8(_) | ImageRgba8(_) => decoded.to_rgb8(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel format {:?} (8-bit gray or RGB expected)",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ImageTensor::new(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                img.set(y, x, c, px[c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Quantization used when writing PNGs: round half away from zero.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height, img.width);
    let buf: Vec<u8> = match img.channels {
        3 => {
            let mut b = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        b.push(quantize8(img.get(y, x, c)));
                    }
                }
            }
            b
        }
        1 => {
            let mut b = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let v = quantize8(img.get(y, x, 0));
                    b.extend_from_slice(&[v, v, v]);
                }
            }
            b
        }
        _ => unreachable!(),
    };
    let rgb: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })
}

/// Load a single-channel mask PNG: any byte >= 128 decodes to a hole pixel.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<MaskTensor> {
    let img = load_png(path)?;
    let mut m = MaskTensor::new(img.height(), img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            m.set(y, x, if img.get(y, x, 0) >= 128.0 / 255.0 { 1 } else { 0 });
        }
    }
    Ok(m)
}

pub fn save_mask_png(mask: &MaskTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let gray: image::GrayImage =
        image::ImageBuffer::from_raw(mask.width as u32, mask.height as u32, buf)
            .expect("buffer size");
    gray.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })
}

/// Bilinear resize, align-corners-false. Same-size calls return the input
/// unchanged.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    Ok(ImageTensor::from_tensor(&ops::bilinear_resize(
        &img.to_tensor(),
        out_h,
        out_w,
    )))
}

/// Valid-pixel replacement: `m . i_out + (1 - m) . i_gt`, the mask broadcast
/// over channels. Hole pixels keep the prediction, valid pixels are copied
/// bit-exactly from the ground truth.
pub fn composite(i_out: &ImageTensor, i_gt: &ImageTensor, m: &MaskTensor) -> Result<ImageTensor> {
    if i_out.height != i_gt.height
        || i_out.width != i_gt.width
        || i_out.height != m.height
        || i_out.width != m.width
        || i_out.channels != i_gt.channels
    {
        return Err(Error::InvalidArgument(format!(
            "composite size mismatch: out {}x{}x{}, gt {}x{}x{}, mask {}x{}",
            i_out.height, i_out.width, i_out.channels, i_gt.height, i_gt.width, i_gt.channels,
            m.height, m.width
        )));
    }
    let mut out = i_out.clone();
    for c in 0..out.channels {
        for y in 0..out.height {
            for x in 0..out.width {
                if m.get(y, x) == 0 {
                    out.set(y, x, c, i_gt.get(y, x, c));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    Down,
    Up,
}

/// Fixed x4 rescale: down is 4x4 mean pooling, up is bilinear.
pub fn scale4(img: &ImageTensor, direction: ScaleDirection) -> Result<ImageTensor> {
    match direction {
        ScaleDirection::Down => {
            if img.height % 4 != 0 || img.width % 4 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "scale4 down needs dims divisible by 4, got {}x{}",
                    img.height, img.width
                )));
            }
            Ok(ImageTensor::from_tensor(&ops::avg_pool(&img.to_tensor(), 4)))
        }
        ScaleDirection::Up => Ok(ImageTensor::from_tensor(&ops::bilinear_resize(
            &img.to_tensor(),
            img.height * 4,
            img.width * 4,
        ))),
    }
}
