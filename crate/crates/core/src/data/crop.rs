use image::RgbImage;

use super::types::BBox;
use super::DataError;

// Absorbs float noise in box coordinates that are integral up to rounding.
const EDGE_EPS: f64 = 1e-6;

/// Integer pixel rectangle `(x, y, w, h)` covered by `bbox` grown by
/// `pad_ratio * max(w, h)` on every side and clamped to the image.
pub fn crop_region(bbox: &BBox, pad_ratio: f64, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    if !bbox.has_positive_size() || !bbox.x.is_finite() || !bbox.y.is_finite() {
        return None;
    }
    let pad = pad_ratio * bbox.w.max(bbox.h);
    let x0 = (bbox.x - pad + EDGE_EPS).floor().max(0.0);
    let y0 = (bbox.y - pad + EDGE_EPS).floor().max(0.0);
    let x1 = (bbox.x + bbox.w + pad - EDGE_EPS).ceil().min(width as f64);
    let y1 = (bbox.y + bbox.h + pad - EDGE_EPS).ceil().min(height as f64);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some((x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
}

/// Copy the (padded, clamped) box out of `image` without resampling.
pub fn extract_crop(image: &RgbImage, bbox: &BBox, pad_ratio: f64) -> Result<RgbImage, DataError> {
    if !(0.0..=1.0).contains(&pad_ratio) {
        return Err(DataError::InvalidConfig {
            what: "pad_ratio",
            message: format!("{pad_ratio} outside [0, 1]"),
        });
    }
    let (w, h) = image.dimensions();
    let empty = || DataError::EmptyCrop { bbox: bbox.to_array(), width: w, height: h };
    if w == 0 || h == 0 {
        return Err(empty());
    }
    let (x, y, cw, ch) = crop_region(bbox, pad_ratio, w, h).ok_or_else(empty)?;
    Ok(image::imageops::crop_imm(image, x, y, cw, ch).to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x * 7 + y * 13) as u8]))
    }

    #[test]
    fn inside_box_is_identity_subregion() {
        let img = gradient(40, 30);
        let crop = extract_crop(&img, &BBox::new(5.0, 7.0, 10.0, 6.0), 0.0).unwrap();
        assert_eq!(crop.dimensions(), (10, 6));
        assert_eq!(crop.get_pixel(0, 0), img.get_pixel(5, 7));
    }

    #[test]
    fn clamped_at_right_edge() {
        let img = gradient(40, 30);
        let crop = extract_crop(&img, &BBox::new(35.0, 0.0, 20.0, 10.0), 0.0).unwrap();
        assert_eq!(crop.width(), 40 - 35);
    }

    #[test]
    fn padded_box_matches_pixel_oracle() {
        let img = gradient(10, 10);
        let crop = extract_crop(&img, &BBox::new(2.0, 2.0, 4.0, 4.0), 0.25).unwrap();
        // pad = 0.25 * 4 = 1 → pixels [1, 7) on both axes
        assert_eq!(crop.dimensions(), (6, 6));
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(crop.get_pixel(x, y), img.get_pixel(x + 1, y + 1));
            }
        }
    }

    #[test]
    fn outside_box_is_empty_crop() {
        let img = gradient(10, 10);
        let err = extract_crop(&img, &BBox::new(20.0, 20.0, 4.0, 4.0), 0.0).unwrap_err();
        assert!(matches!(err, DataError::EmptyCrop { .. }));
        assert!(extract_crop(&img, &BBox::new(2.0, 2.0, 0.0, 4.0), 0.0).is_err());
        assert!(extract_crop(&img, &BBox::new(2.0, 2.0, 4.0, 4.0), 1.5).is_err());
    }
}
