//! Windowed axial-slice rendering with optional mask overlays, for debugging.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

pub const DEFAULT_WINDOW_CENTER: f64 = 50.0;
pub const DEFAULT_WINDOW_WIDTH: f64 = 450.0;

pub const GT_COLOR: [u8; 3] = [255, 255, 0];
pub const PRED_COLOR: [u8; 3] = [0, 0, 255];

/// Map one HU value into [0, 255] for a window, rounding half up.
pub fn window_value(hu: f64, center: f64, width: f64) -> u8 {
    let lo = center - width / 2.0;
    let scaled = (hu - lo) / width * 255.0;
    if scaled.is_nan() {
        return 0;
    }
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Render axial slice `slice_z` through a linear window.
///
/// The image is `nx` wide and `ny` tall; pixel `(x, y)` is voxel `(x, y, slice_z)`.
pub fn window_render(grid: &VoxelGrid, center: f64, width: f64, slice_z: usize) -> Result<GrayImage> {
    let values = grid.require_intensities()?;
    let [nx, ny, nz] = grid.dims();
    if slice_z >= nz {
        return Err(Error::SliceOutOfRange { slice: slice_z, nz });
    }
    if !(width > 0.0) {
        return Err(Error::InvalidGrid(format!("window width must be positive, got {width}")));
    }
    let offset = grid.index(0, 0, slice_z);
    let slice = &values[offset..offset + nx * ny];
    Ok(GrayImage::from_fn(nx as u32, ny as u32, |x, y| {
        Luma([window_value(slice[x as usize + nx * y as usize] as f64, center, width)])
    }))
}

/// A label mask drawn over a rendered slice.
pub struct Overlay<'a> {
    pub mask: &'a VoxelGrid,
    pub label: u32,
    pub color: [u8; 3],
}

fn blend(base: u8, tint: u8) -> u8 {
    (base as u16 + tint as u16).div_ceil(2) as u8
}

/// Windowed slice with each overlay tinted at 50% where the mask equals its label.
/// Overlays are applied in order.
pub fn render_with_overlays(
    ct: &VoxelGrid,
    center: f64,
    width: f64,
    slice_z: usize,
    overlays: &[Overlay<'_>],
) -> Result<RgbImage> {
    let gray = window_render(ct, center, width, slice_z)?;
    for o in overlays {
        ct.same_dims(o.mask)?;
        o.mask.require_labels()?;
    }
    let [nx, _, _] = ct.dims();
    let mut out = RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let g = gray.get_pixel(x, y)[0];
        Rgb([g, g, g])
    });
    for o in overlays {
        let labels = o.mask.require_labels()?;
        let offset = o.mask.index(0, 0, slice_z);
        for (x, y, px) in out.enumerate_pixels_mut() {
            if labels.get(offset + x as usize + nx * y as usize) == o.label {
                for c in 0..3 {
                    px[c] = blend(px[c], o.color[c]);
                }
            }
        }
    }
    Ok(out)
}

pub fn save_png_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn save_png_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
