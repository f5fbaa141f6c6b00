use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

/// One color per category id; ids past the table wrap around.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
    [40, 40, 40],
];

pub fn label_image(labels: &[u8], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        Rgb(PALETTE[labels[y as usize * width + x as usize] as usize % PALETTE.len()])
    })
}

pub fn write_label_png(labels: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    label_image(labels, width, height)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}
