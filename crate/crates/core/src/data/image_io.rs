use std::path::Path;

use image::{ColorType, ExtendedColorType, ImageError, ImageReader};

use crate::error::{Result, ScnError};
use crate::tensor::Tensor;

fn image_error(path: &Path, err: ImageError) -> ScnError {
    match err {
        ImageError::IoError(e) => ScnError::io(path, e),
        other => ScnError::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads an 8-bit grayscale or RGB PNG as a `(1, c, h, w)` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| ScnError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| ScnError::io(path, e))?;
    let img = reader.decode().map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img.color() {
        ColorType::L8 => (1, img.into_luma8().into_raw()),
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        other => {
            return Err(ScnError::Format(format!(
                "{}: unsupported pixel format {other:?} (need 8-bit gray or RGB)",
                path.display()
            )))
        }
    };
    let mut data = vec![0.0f32; channels * h * w];
    for (i, &b) in bytes.iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * h * w + pixel] = b as f32 / 255.0;
    }
    Tensor::from_vec([1, channels, h, w], data)
}

/// Clamp to `[0, 1]` and quantize to a byte, rounding halves away from zero.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-image tensor with 1 or 3 channels as an 8-bit PNG.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [b, c, h, w] = t.dims();
    if b != 1 || !matches!(c, 1 | 3) {
        return Err(ScnError::shape(format!("can only save (1, 1|3, h, w) images, got {:?}", t.dims())));
    }
    let plane = h * w;
    let mut bytes = vec![0u8; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            bytes[p * c + ch] = quantize(t.data()[ch * plane + p]);
        }
    }
    let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}
