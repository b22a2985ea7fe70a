//! 8-bit PNG load/save for float images in `[0, 1]`.
//!
//! Loading maps byte `v` to `v / 255`; saving quantizes with round-half-up,
//! so 0.5 becomes byte 128 and 1.0 becomes 255. RGBA inputs load with the
//! alpha channel dropped.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::num::Scalar;

pub fn load_png<T: Scalar>(path: &Path) -> Result<ImageBuf<T>> {
    let dynimg = image::open(path)?;
    let rgb = match dynimg.color() {
        image::ColorType::Rgb8
        | image::ColorType::Rgba8
        | image::ColorType::L8
        | image::ColorType::La8 => dynimg.to_rgb8(),
        other => {
            return Err(Error::Format(format!(
                "unsupported PNG pixel layout {other:?} (only 8-bit channels)"
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = ImageBuf::new(w, h, 3);
    let scale = T::of(1.0 / 255.0);
    for (dst, src) in out.data_mut().iter_mut().zip(rgb.as_raw()) {
        *dst = T::of(*src as f64) * scale;
    }
    Ok(out)
}

pub fn save_png<T: Scalar>(img: &ImageBuf<T>, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "PNG save expects 3 channels, got {}",
            img.channels()
        )));
    }
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(*v)).collect();
    image::save_buffer(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Round-half-up quantization of a unit-interval value to a byte.
fn quantize<T: Scalar>(v: T) -> u8 {
    let clamped = v.max(T::zero()).min(T::one()).widen();
    (clamped * 255.0 + 0.5).floor() as u8
}
