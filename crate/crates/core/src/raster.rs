//! Single-channel rasters with intensities in `[0, 1]` and grayscale PNG I/O.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major grayscale raster. Pixel `(x, y)` covers the continuous square
/// `[x, x + 1) x [y, y + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("raster dimensions must be >= 1, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "raster data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// True when every value is within `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    /// Copies the integer pixel rectangle starting at `(x0, y0)`. Pixels
    /// outside the source are filled with zero.
    pub fn crop(&self, x0: isize, y0: isize, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            let sx = x0 + x as isize;
            let sy = y0 + y as isize;
            if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                self.get(sx as usize, sy as usize)
            } else {
                T::zero()
            }
        })
    }

    /// Bilinear sample at pixel-center coordinates (pixel `(i, j)` is sampled
    /// exactly at `(i, j)`); returns `fill` outside `[-0.5, size - 0.5]`.
    pub fn sample_bilinear(&self, x: T, y: T, fill: T) -> T {
        let half = T::lit(0.5);
        let (w, h) = (T::from_usize_lossy(self.width), T::from_usize_lossy(self.height));
        if x < -half || y < -half || x > w - half || y > h - half {
            return fill;
        }
        let xc = x.clamp_to(T::zero(), w - T::one());
        let yc = y.clamp_to(T::zero(), h - T::one());
        let x0 = xc.floor().as_f64() as usize;
        let y0 = yc.floor().as_f64() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - T::from_usize_lossy(x0);
        let fy = yc - T::from_usize_lossy(y0);
        let top = self.get(x0, y0) * (T::one() - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (T::one() - fx) + self.get(x1, y1) * fx;
        top * (T::one() - fy) + bottom * fy
    }

    pub fn cast<U: Scalar>(&self) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }
}

/// Source bit depth of a grayscale PNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }
}

/// Reads a grayscale PNG, normalizing 8-bit data by 1/255 and 16-bit data by
/// 1/65535. Color images are converted to luma.
pub fn read_png(path: &Path) -> std::result::Result<(Raster<f32>, BitDepth), String> {
    let img = ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    if sixteen {
        let buf = img.into_luma16();
        let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        Raster::from_vec(w, h, data).map(|r| (r, BitDepth::Sixteen)).map_err(|e| e.to_string())
    } else {
        let buf = img.into_luma8();
        let data = buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Raster::from_vec(w, h, data).map(|r| (r, BitDepth::Eight)).map_err(|e| e.to_string())
    }
}

pub fn write_png<T: Scalar>(raster: &Raster<T>, depth: BitDepth, path: &Path) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let res = match depth {
        BitDepth::Eight => {
            let data = raster.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, data).expect("buffer size").save(path)
        }
        BitDepth::Sixteen => {
            let data = raster.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, data).expect("buffer size").save(path)
        }
    };
    res.map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_pads_with_zero() {
        let r = Raster::<f32>::filled(4, 4, 1.0);
        let c = r.crop(2, 2, 4, 4);
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(2, 2), 0.0);
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let r = Raster::<f64>::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        assert_eq!(r.sample_bilinear(1.0, 1.0, -1.0), 11.0);
        assert_eq!(r.sample_bilinear(0.5, 0.0, -1.0), 0.5);
        assert_eq!(r.sample_bilinear(-0.6, 0.0, -1.0), -1.0);
    }

    #[test]
    fn png_round_trip_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::<f32>::from_fn(5, 3, |x, y| (x * 3 + y) as f32 / 16.0);
        for depth in [BitDepth::Eight, BitDepth::Sixteen] {
            let p = dir.path().join(format!("x{}.png", depth.bits()));
            write_png(&r, depth, &p).unwrap();
            let (back, d) = read_png(&p).unwrap();
            assert_eq!(d, depth);
            let tol = if depth == BitDepth::Eight { 1.0 / 255.0 } else { 1.0 / 65535.0 };
            for (a, b) in back.data().iter().zip(r.data()) {
                assert!((a - b).abs() <= tol);
            }
        }
    }

    #[test]
    fn empty_dims_rejected() {
        assert!(Raster::<f32>::from_vec(0, 3, vec![]).is_err());
    }
}
