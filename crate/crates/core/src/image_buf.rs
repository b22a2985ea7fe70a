//! Planar-agnostic image container shared by the renderer output, codecs,
//! perturbations, and metrics. Values live in [0,1] with HWC (interleaved)
//! layout; tensors on the tape use CHW, so converters live here too.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageBuf<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image data length {} vs {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: T) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Interleaved -> planar: `[C,H,W]` tensor for the conv stack.
    pub fn to_chw(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![T::zero(); w * h * c];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ci * h + y) * w + x] = self.data[(y * w + x) * c + ci];
                }
            }
        }
        Tensor::from_vec(&[c, h, w], data).expect("dims agree")
    }

    pub fn from_chw(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("from_chw expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut img = ImageBuf::new(w, h, c);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.data[(y * w + x) * c + ci] = t.data()[(ci * h + y) * w + x];
                }
            }
        }
        Ok(img)
    }

    /// Luma plane with the BT.601 weights used by the metrics.
    pub fn luma(&self) -> Result<Vec<T>> {
        match self.channels {
            1 => Ok(self.data.clone()),
            3 => {
                let (r, g, b) = (T::of(0.299), T::of(0.587), T::of(0.114));
                Ok(self
                    .data
                    .chunks_exact(3)
                    .map(|px| r * px[0] + g * px[1] + b * px[2])
                    .collect())
            }
            c => Err(Error::Shape(format!("luma of {c}-channel image"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageBuf<U> {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.widen())).collect(),
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = (*v).max(T::zero()).min(T::one());
        }
    }

    /// Bilinear resample with pixel-center alignment. Returns a clone when
    /// the size already matches.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImageBuf<T> {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = ImageBuf::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = T::of(fy - y0 as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = T::of(fx - x0 as f64);
                for c in 0..self.channels {
                    let p00 = self.get(x0, y0, c);
                    let p10 = self.get(x1, y0, c);
                    let p01 = self.get(x0, y1, c);
                    let p11 = self.get(x1, y1, c);
                    let top = p00 + (p10 - p00) * wx;
                    let bot = p01 + (p11 - p01) * wx;
                    out.set(x, y, c, top + (bot - top) * wy);
                }
            }
        }
        out
    }
}
