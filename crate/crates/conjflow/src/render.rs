//! PNG output of flow, prediction and feature images.

use std::path::Path;

use conjflow_core::evalkit::RgbImage;
use conjflow_core::Tensor;
use image::ImageFormat;

use crate::error::{format_err, Error, Result};

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| format_err(path, "image buffer does not match its size"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// First three channels of a feature map, each stretched to `[0, 255]`.
/// Maps with fewer channels repeat their last one.
pub fn feature_image(features: &Tensor) -> RgbImage {
    let (c, h, w) = features.chw();
    let planes: Vec<Vec<u8>> = (0..3)
        .map(|k| {
            let p = features.plane(k.min(c - 1));
            let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            p.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        data.extend(planes.iter().map(|p| p[i]));
    }
    RgbImage {
        width: w,
        height: h,
        data,
    }
}
