//! RGB images with values in `[0, 1]`.

use std::path::Path;

use ibr_tensor::bilinear_taps;

/// Row-major, interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at continuous coordinates (texel centres at `+0.5`).
    /// The flag is false when the 2×2 footprint leaves the image.
    pub fn sample(&self, u: f64, v: f64) -> ([f32; 3], bool) {
        let (taps, valid) = bilinear_taps::<f64>(self.height, self.width, u, v);
        let mut c = [0.0f64; 3];
        for (idx, w) in taps {
            for ch in 0..3 {
                c[ch] += w * self.data[idx * 3 + ch] as f64;
            }
        }
        ([c[0] as f32, c[1] as f32, c[2] as f32], valid)
    }

    /// Channel-first copy, `[3, H, W]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    /// Round every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)
    }

    pub fn load_png(path: &Path) -> image::ImageResult<Image> {
        Ok(Image::from_rgb8(&image::open(path)?.to_rgb8()))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
