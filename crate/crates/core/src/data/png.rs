use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb as Px, RgbImage};

use super::{quantize, Rgb};
use crate::error::{io_err, Error, Result};
use crate::plane::Plane;

fn to_u8(v: f64) -> u8 {
    (quantize(v) * 255.0).round() as u8
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn encode(path: &Path, save: impl FnOnce(&mut Vec<u8>) -> image::ImageResult<()>) -> Result<()> {
    let mut bytes = Vec::new();
    save(&mut bytes).map_err(|e| image_err(path, e))?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Writes an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, image: &Rgb) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Px([0, 1, 2].map(|c| to_u8(image.channels[c].at(y, x))))
    });
    encode(path, |out| buf.write_to(&mut std::io::Cursor::new(out), image::ImageFormat::Png))
}

/// Writes an 8-bit grayscale PNG of values in `[0, 1]`.
pub fn write_gray(path: &Path, plane: &Plane) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_fn(plane.width as u32, plane.height as u32, |x, y| {
        Luma([to_u8(plane.at(y as usize, x as usize))])
    });
    encode(path, |out| buf.write_to(&mut std::io::Cursor::new(out), image::ImageFormat::Png))
}

fn decode(path: &Path, bytes: &[u8]) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn decode_rgb(path: &Path, bytes: &[u8]) -> Result<Rgb> {
    let img = decode(path, bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = [0, 1, 2].map(|c| Plane::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0));
    Ok(Rgb { channels })
}

pub fn decode_gray(path: &Path, bytes: &[u8]) -> Result<Plane> {
    let img = decode(path, bytes)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Plane::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
}

pub fn read_gray(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_gray(path, &bytes)
}
