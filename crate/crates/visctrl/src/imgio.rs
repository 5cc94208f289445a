//! PNG loading/saving and image <-> tensor conversion.
//!
//! Images are 8-bit RGB on disk and `[0, 1]` float tensors inside the
//! pipeline. Quantization rounds to nearest, so an untouched pixel survives
//! the u8 -> f32 -> u8 round trip bit-for-bit.

use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::process;

use image::{GrayImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor3;

/// Writes `bytes` to a temp file next to `path` and renames it into place;
/// on any failure the destination is left untouched.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp-{}", process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("cannot decode image {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("cannot decode image {}: {e}", path.display())))?;
    Ok(img.to_luma8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encode failed: {e}")))?;
    Ok(buf)
}

pub fn save_png_atomic(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encode failed: {e}")))?;
    Ok(buf)
}

/// u8 RGB image to an `(h, w, 3)` tensor of values in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor3 {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor3::from_vec(h as usize, w as usize, 3, data).expect("pixel values are finite")
}

/// `(h, w, 3)` tensor back to u8 RGB, clamping to `[0, 1]` and rounding.
pub fn tensor_to_image(t: &Tensor3) -> Result<RgbImage> {
    let (h, w, c) = t.shape();
    if c != 3 {
        return Err(Error::Shape(format!(
            "image tensor needs 3 channels, got {c}"
        )));
    }
    let data: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))
}
