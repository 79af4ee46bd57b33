//! Image and binary-mask containers plus the resampling used on them.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::kernels::{nearest_index, resize_bilinear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB image with channel-planar `f32` storage in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `3 x height x width`, planar.
    pub data: Vec<f32>,
}

/// Binary mask; every value is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage { height, width, data: vec![0.0; 3 * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = RgbImage::new(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::image(path, e))
    }

    /// Bilinear resize to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let t = Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone()).expect("planar rgb");
        let r = resize_bilinear(&t, height, width);
        RgbImage { height, width, data: r.into_data() }
    }

    /// Per-channel `(v - mean) / std` as a `[3, h, w]` tensor.
    pub fn normalized<T: Scalar>(&self, mean: [f32; 3], std: [f32; 3]) -> Tensor<T> {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let c = i / hw;
            T::lit(((self.data[i] - mean[c]) / std[c]) as f64)
        })
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Loads an 8-bit mask, foreground where the value exceeds 127.
    pub fn load_binary(path: &Path) -> Result<Self> {
        Self::load_with(path, |v| v > 127)
    }

    /// Loads an 8-bit label map, foreground where the label equals `class_id`.
    pub fn load_label(path: &Path, class_id: u32) -> Result<Self> {
        Self::load_with(path, |v| v as u32 == class_id)
    }

    fn load_with(path: &Path, fg: impl Fn(u8) -> bool) -> Result<Self> {
        let (height, width, raw) = read_label_map(path)?;
        Ok(Mask { height, width, data: raw.iter().map(|&v| fg(v) as u8).collect() })
    }

    /// 8-bit PNG with 0 background and 255 foreground.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| Error::image(path, e))
    }

    /// Nearest-neighbour resize; the result stays binary.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Mask::from_fn(height, width, |y, x| {
            self.get(
                nearest_index(y, self.height, height),
                nearest_index(x, self.width, width),
            )
        })
    }

    pub fn flipped_horizontal(&self) -> Self {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Mask as a `[h, w]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| T::from_u8(self.data[i]).unwrap())
    }

    /// Foreground from a score map thresholded strictly above `0.5`.
    pub fn from_scores<T: Scalar>(height: usize, width: usize, scores: &[T]) -> Result<Self> {
        ensure!(scores.len() == height * width, Contract, "score map size mismatch");
        let half = T::lit(0.5);
        Ok(Mask {
            height,
            width,
            data: scores.iter().map(|&s| (s > half) as u8).collect(),
        })
    }
}

/// Reads an 8-bit single-channel map as `(height, width, values)`.
/// Palette PNGs yield their palette indices rather than colours.
pub fn read_label_map(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let info = reader.info();
        let indexed = info.color_type == png::ColorType::Indexed || info.color_type == png::ColorType::Grayscale;
        if indexed && info.bit_depth == png::BitDepth::Eight {
            let mut buf = vec![0; reader.output_buffer_size()];
            let frame = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            buf.truncate(frame.buffer_size());
            return Ok((frame.height as usize, frame.width as usize, buf));
        }
    }
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

impl RgbImage {
    pub fn flipped_horizontal(&self) -> Self {
        let mut out = RgbImage::new(self.height, self.width);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}
