//! Result overlays: boxes and captions burned into an RGB copy of the image.

use std::path::Path;

use image::{Rgb, RgbImage};
use recess_core::font;
use recess_core::imaging::{iou, BBox, GrayImage, LabeledBox};

pub const GT_COLOR: Rgb<u8> = Rgb([0, 200, 0]);
pub const MULTITASK_COLOR: Rgb<u8> = Rgb([230, 30, 30]);
pub const DETECTION_COLOR: Rgb<u8> = Rgb([40, 90, 255]);

/// One prediction to draw, with the color of the approach that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Drawn {
    pub pred: LabeledBox,
    pub color: Rgb<u8>,
}

/// Nearest-neighbour upscaling factor that makes small inputs readable.
fn zoom_for(img: &GrayImage) -> usize {
    (512 / img.width().max(img.height()).max(1)).clamp(1, 4)
}

fn draw_rect(out: &mut RgbImage, b: &BBox, zoom: usize, color: Rgb<u8>) {
    let (w, h) = (out.width() as i64, out.height() as i64);
    let z = zoom as f64;
    let x0 = (b.x_min * z).round() as i64;
    let y0 = (b.y_min * z).round() as i64;
    let x1 = ((b.x_max * z).round() as i64 - 1).max(x0);
    let y1 = ((b.y_max * z).round() as i64 - 1).max(y0);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..2 {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }
}

fn draw_text(out: &mut RgbImage, text: &str, x: usize, y: usize, color: Rgb<u8>) {
    let (w, h) = (out.width() as usize, out.height() as usize);
    let tw = font::text_width(text, 1);
    // dark backing so the caption stays legible on bright tissue
    for yy in y.saturating_sub(1)..(y + font::GLYPH_H + 1).min(h) {
        for xx in x.saturating_sub(1)..(x + tw + 1).min(w) {
            out.put_pixel(xx as u32, yy as u32, Rgb([0, 0, 0]));
        }
    }
    font::for_each_text_pixel(text, x, y, 1, |px, py| {
        if px < w && py < h {
            out.put_pixel(px as u32, py as u32, color);
        }
    });
}

/// Caption of a prediction: label, confidence and, with ground truth, IoU.
pub fn caption(pred: &LabeledBox, gt: Option<&BBox>) -> String {
    let mut s = format!("{} {:.2}", pred.label.to_string().to_uppercase(), pred.confidence);
    if let Some(g) = gt {
        s += &format!(" IOU {:.2}", iou(&pred.bbox, g));
    }
    s
}

/// Ground truth in green and each prediction in its own color, with captions.
pub fn render_overlay(image: &GrayImage, preds: &[Drawn], gt: Option<&BBox>) -> RgbImage {
    let zoom = zoom_for(image);
    let gray = image.to_luma8();
    let (w, h) = (gray.width() * zoom as u32, gray.height() * zoom as u32);
    let mut out = RgbImage::from_fn(w, h, |x, y| {
        let v = gray.get_pixel(x / zoom as u32, y / zoom as u32).0[0];
        Rgb([v, v, v])
    });
    if let Some(g) = gt {
        draw_rect(&mut out, g, zoom, GT_COLOR);
    }
    for d in preds {
        draw_rect(&mut out, &d.pred.bbox, zoom, d.color);
    }
    let line_h = font::GLYPH_H + 4;
    let mut y = 4;
    if gt.is_some() {
        draw_text(&mut out, "GROUND TRUTH", 4, y, GT_COLOR);
        y += line_h;
    }
    for d in preds {
        draw_text(&mut out, &caption(&d.pred, gt), 4, y, d.color);
        y += line_h;
    }
    out
}

pub fn save_overlay(
    path: &Path,
    image: &GrayImage,
    preds: &[Drawn],
    gt: Option<&BBox>,
) -> anyhow::Result<()> {
    render_overlay(image, preds, gt).save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use recess_core::imaging::Label;

    fn pred(b: BBox) -> LabeledBox {
        LabeledBox {
            bbox: b,
            label: Label::Distended,
            confidence: 0.87,
        }
    }

    #[test]
    fn coincident_boxes_report_full_iou() {
        let b = BBox::new(20.0, 30.0, 120.0, 60.0).unwrap();
        assert_eq!(caption(&pred(b), Some(&b)), "DISTENDED 0.87 IOU 1.00");
    }

    #[test]
    fn caption_without_ground_truth_has_no_iou() {
        let b = BBox::new(20.0, 30.0, 120.0, 60.0).unwrap();
        assert_eq!(caption(&pred(b), None), "DISTENDED 0.87");
    }

    #[test]
    fn colors_follow_the_legend() {
        let img = GrayImage::filled(128, 128, 0.5).unwrap();
        let gt = BBox::new(10.0, 40.0, 100.0, 60.0).unwrap();
        let p = BBox::new(20.0, 80.0, 110.0, 100.0).unwrap();
        let out = render_overlay(&img, &[Drawn { pred: pred(p), color: MULTITASK_COLOR }], Some(&gt));
        let z = 4;
        assert_eq!(out.width(), 128 * z);
        assert_eq!(*out.get_pixel(50 * z, 40 * z), GT_COLOR);
        assert_eq!(*out.get_pixel(50 * z, 80 * z), MULTITASK_COLOR);
        // inside both boxes the image is untouched
        assert_eq!(*out.get_pixel(50 * z, 50 * z), Rgb([128, 128, 128]));
    }

    #[test]
    fn without_ground_truth_only_prediction_is_drawn() {
        let img = GrayImage::filled(256, 256, 0.5).unwrap();
        let p = BBox::new(20.0, 80.0, 110.0, 100.0).unwrap();
        let out = render_overlay(&img, &[Drawn { pred: pred(p), color: DETECTION_COLOR }], None);
        assert!(out.pixels().all(|px| *px != GT_COLOR));
        assert!(out.pixels().any(|px| *px == DETECTION_COLOR));
    }
}
