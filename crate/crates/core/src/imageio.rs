//! 8-bit RGB PNG storage with the linear `[-1, 1] ↔ [0, 255]` mapping.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// `[-1, 1] → [0, 255]`, rounding half away from zero, clamping outside.
pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn to_rgb8(img: &Image) -> Vec<u8> {
    img.as_slice().iter().map(|&v| to_u8(v)).collect()
}

pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
    Image::from_vec(height, width, bytes.iter().map(|&b| from_u8(b)).collect())
}

/// Round-trip an image through 8-bit quantisation.
pub fn quantize(img: &Image) -> Image {
    img.map(|v| from_u8(to_u8(v)))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(
        path,
        &to_rgb8(img),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    debug_assert_eq!(rgb.as_raw().len(), (w * h) as usize * CHANNELS);
    from_rgb8(h as usize, w as usize, rgb.as_raw())
}

/// Tile equally sized images into a `rows × cols` sheet with a 1-pixel
/// white gutter. `cells[r][c]` may be `None` for an empty (black) tile.
pub fn grid(cells: &[Vec<Option<&Image>>], tile_h: usize, tile_w: usize) -> Image {
    let rows = cells.len();
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let gutter = 1;
    let h = rows * (tile_h + gutter) + gutter;
    let w = cols * (tile_w + gutter) + gutter;
    let mut out = Image::filled(h, w, 1.0);
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (oy, ox) = (gutter + r * (tile_h + gutter), gutter + c * (tile_w + gutter));
            for y in 0..tile_h {
                for x in 0..tile_w {
                    let px = cell.map_or([-1.0; 3], |img| img.pixel(y, x));
                    out.set_pixel(oy + y, ox + x, px);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mapping_examples() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128); // 127.5 rounds away from zero
        assert_eq!(to_u8(7.0), 255);
        assert_eq!(from_u8(0), -1.0);
        assert_eq!(from_u8(255), 1.0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut rng = crate::util::rng_stream(0, 0);
        let img = quantize(&Image::randn(5, 7, &mut rng));
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn u8_values_survive_the_mapping(v in 0u8..=255) {
            prop_assert_eq!(to_u8(from_u8(v)), v);
        }
    }
}
