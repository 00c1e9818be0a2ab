//! 8-bit raster interchange and the JPEG round trip.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use wmcloak_core::{Image, Watermark};

use crate::error::{io_err, Error, Result};

/// `round_half_up(255 * v)`; `v` must lie in `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor() as u8
}

pub fn to_rgb8(img: &Image) -> Result<RgbImage> {
    if !img.is_in_range() {
        return Err(wmcloak_core::Error::Argument("pixels outside [0, 1]; clamp before writing".into()).into());
    }
    let bytes: Vec<u8> = img.to_interleaved().into_iter().map(quantize).collect();
    Ok(RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches dimensions"))
}

pub fn from_rgb8(rgb: &RgbImage) -> Image {
    let values: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_interleaved(rgb.height() as usize, rgb.width() as usize, &values).expect("8-bit values are in range")
}

fn decode(path: &Path) -> Result<RgbImage> {
    Ok(image::ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|source| Error::Decode { path: path.to_path_buf(), source })?
        .to_rgb8())
}

/// Decodes `path` at its stored size.
pub fn read_image_native(path: &Path) -> Result<Image> {
    let mut img = from_rgb8(&decode(path)?);
    img.source_path = Some(path.display().to_string());
    Ok(img)
}

/// Decodes `path` and resizes it (antialiased bilinear) to `target` = `(H, W)`
/// unless it already has that size.
pub fn read_image(path: &Path, target: (usize, usize)) -> Result<Image> {
    if target.0 == 0 || target.1 == 0 {
        return Err(wmcloak_core::Error::Argument(format!("target size {target:?} has a zero dimension")).into());
    }
    let mut rgb = decode(path)?;
    if (rgb.height() as usize, rgb.width() as usize) != target {
        rgb = image::imageops::resize(&rgb, target.1 as u32, target.0 as u32, FilterType::Triangle);
    }
    let mut img = from_rgb8(&rgb);
    img.source_path = Some(path.display().to_string());
    Ok(img)
}

/// Writes an 8-bit image; the format follows the extension (PNG recommended).
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let rgb = to_rgb8(img)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    rgb.save(path).map_err(|source| Error::Decode { path: path.to_path_buf(), source })
}

pub fn write_mask(m: &Watermark, path: &Path) -> Result<()> {
    write_image(&m.to_image(), path)
}

/// Encodes at `quality` (1..=100) and decodes again.
pub fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let rgb = to_rgb8(img)?;
    let mut buf = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    rgb.write_with_encoder(encoder)?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8();
    let mut out = from_rgb8(&decoded);
    out.source_path = img.source_path.clone();
    Ok(out)
}

/// Image files directly inside `dir`, in lexicographic path order.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
