//! 8-bit PNG reading and writing.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::Image;

/// An 8-bit channel-major raster; the in-memory form of dataset images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Raster8 {
    pub fn from_image(img: &Image) -> Self {
        let (c, h, w) = img.dim();
        Raster8 {
            channels: c,
            height: h,
            width: w,
            data: img.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        self.crop(0, 0, self.height, self.width)
    }

    /// Window `[top, top + h) × [left, left + w)` as `[0, 1]` reals.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(top + h <= self.height && left + w <= self.width, "crop out of range");
        Array3::from_shape_fn((self.channels, h, w), |(c, y, x)| {
            let i = (c * self.height + top + y) * self.width + left + x;
            self.data[i] as f64 / 255.0
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// What happened to the colour layout while reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Coercion {
    None,
    GrayToRgb,
    DroppedAlpha,
}

pub fn read_raster(path: &Path) -> Result<(Raster8, Coercion)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let coercion = match img.color() {
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => Coercion::GrayToRgb,
        ColorType::Rgba8 | ColorType::Rgba16 | ColorType::Rgba32F => Coercion::DroppedAlpha,
        _ => Coercion::None,
    };
    let rgb = DynamicImage::from(img.to_rgb8());
    let buf = rgb.as_rgb8().expect("rgb8 buffer");
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut data = vec![0u8; 3 * h * w];
    for (x, y, px) in buf.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c];
        }
    }
    Ok((
        Raster8 {
            channels: 3,
            height: h,
            width: w,
            data,
        },
        coercion,
    ))
}

/// Reads a PNG as a 3-channel image in `[0, 1]`, reporting any colour
/// coercion that was applied.
pub fn load_image_with_note(path: &Path) -> Result<(Image, Coercion)> {
    let (r, c) = read_raster(path)?;
    Ok((r.to_image(), c))
}

/// Like [`load_image_with_note`], logging a warning on coercion.
pub fn load_image(path: &Path) -> Result<Image> {
    let (img, note) = load_image_with_note(path)?;
    match note {
        Coercion::GrayToRgb => log::warn!("{}: grayscale input replicated to 3 channels", path.display()),
        Coercion::DroppedAlpha => log::warn!("{}: alpha channel discarded", path.display()),
        Coercion::None => {}
    }
    Ok(img)
}

/// Writes a 1- or 3-channel image as 8-bit PNG after clamping to `[0, 1]`.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    save_raster(&Raster8::from_image(img), path)
}

pub fn save_raster(r: &Raster8, path: &Path) -> Result<()> {
    let (h, w) = (r.height, r.width);
    let at = |c: usize, y: u32, x: u32| r.data[(c * h + y as usize) * w + x as usize];
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let result = match r.channels {
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Rgb([at(0, y, x), at(1, y, x), at(2, y, x)])
        })
        .save_with_format(path, image::ImageFormat::Png),
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| Luma([at(0, y, x)]))
            .save_with_format(path, image::ImageFormat::Png),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
