//! Extraction of the ultrasound scan area from a raw device frame.
//!
//! The raw frame carries UI chrome and burned-in text around the scan. The
//! pipeline binarizes the intensity gradient, drops small connected
//! components, dilates to close gaps, opens to cut off attached clutter and
//! crops the raw image to what is left.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{resize, BBox, BinaryMask, GrayImage};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("no scan frame found; the image must be cropped manually")]
    NoFrameFound,
    #[error("raw image {0}x{1} is smaller than the 64x64 minimum")]
    TooSmall(usize, usize),
    #[error("invalid kernel {0}x{1}: sides must be odd and >= 1")]
    BadKernel(usize, usize),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

/// Crop of the raw frame, in raw-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelShape {
    Rect,
    Ellipse,
}

/// Structuring element centred on its middle pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphKernel {
    pub shape: KernelShape,
    pub width: usize,
    pub height: usize,
}

impl MorphKernel {
    pub fn new(shape: KernelShape, width: usize, height: usize) -> Result<Self, PreprocessError> {
        let k = Self { shape, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn rect(side: usize) -> Self {
        Self::new(KernelShape::Rect, side, side).expect("odd rect kernel")
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.width % 2 == 0 || self.height % 2 == 0 {
            return Err(PreprocessError::BadKernel(self.width, self.height));
        }
        Ok(())
    }

    /// Offsets `(dx, dy)` covered by the element.
    fn offsets(&self) -> Vec<(isize, isize)> {
        let rx = (self.width / 2) as isize;
        let ry = (self.height / 2) as isize;
        let mut out = Vec::new();
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let inside = match self.shape {
                    KernelShape::Rect => true,
                    KernelShape::Ellipse => {
                        let nx = if rx == 0 { 0.0 } else { dx as f64 / (rx as f64 + 0.5) };
                        let ny = if ry == 0 { 0.0 } else { dy as f64 / (ry as f64 + 0.5) };
                        nx * nx + ny * ny <= 1.0
                    }
                };
                if inside {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

/// Pixels whose central-difference gradient magnitude exceeds `threshold`.
/// Borders are replicated.
pub fn gradient_mask(img: &GrayImage, threshold: f64) -> BinaryMask {
    let (w, h) = (img.width(), img.height());
    BinaryMask::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let gx = (img.get_clamped(xi + 1, yi) as f64 - img.get_clamped(xi - 1, yi) as f64) / 2.0;
        let gy = (img.get_clamped(xi, yi + 1) as f64 - img.get_clamped(xi, yi - 1) as f64) / 2.0;
        (gx * gx + gy * gy).sqrt() > threshold
    })
    .expect("dimensions come from a valid image")
}

/// Labels 8-connected components of set pixels. Returns the per-pixel label
/// (`0` = background, components numbered from 1) and the size of each component.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits()[q] && labels[q] == 0 {
                        labels[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Clears every 8-connected component with fewer than `min_size` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_size: usize) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let l = labels[y * mask.width() + x] as usize;
        l != 0 && sizes[l] >= min_size
    })
    .expect("same dimensions")
}

// Inclusive window sums over a 2-D prefix table; out-of-bounds cells are ignored.
struct Prefix {
    w: usize,
    h: usize,
    sums: Vec<u32>,
}

impl Prefix {
    fn new(mask: &BinaryMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.get(x, y) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, sums }
    }

    // (set count, in-bounds count) in the window centred at (x, y)
    fn window(&self, x: usize, y: usize, rx: usize, ry: usize) -> (u32, u32) {
        let x0 = x.saturating_sub(rx);
        let y0 = y.saturating_sub(ry);
        let x1 = (x + rx + 1).min(self.w);
        let y1 = (y + ry + 1).min(self.h);
        let s = |xx: usize, yy: usize| self.sums[yy * (self.w + 1) + xx];
        let set = s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0);
        (set, ((x1 - x0) * (y1 - y0)) as u32)
    }
}

fn morph(mask: &BinaryMask, kernel: &MorphKernel, dilation: bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    match kernel.shape {
        KernelShape::Rect => {
            let prefix = Prefix::new(mask);
            let (rx, ry) = (kernel.width / 2, kernel.height / 2);
            BinaryMask::from_fn(w, h, |x, y| {
                let (set, total) = prefix.window(x, y, rx, ry);
                if dilation {
                    set > 0
                } else {
                    set == total
                }
            })
            .expect("same dimensions")
        }
        KernelShape::Ellipse => {
            let offsets = kernel.offsets();
            BinaryMask::from_fn(w, h, |x, y| {
                let mut hits = offsets.iter().filter_map(|&(dx, dy)| {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    (nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize)
                        .then(|| mask.get(nx as usize, ny as usize))
                });
                if dilation {
                    hits.any(|v| v)
                } else {
                    hits.all(|v| v)
                }
            })
            .expect("same dimensions")
        }
    }
}

/// Morphological dilation; pixels outside the raster are ignored.
pub fn dilate(mask: &BinaryMask, kernel: &MorphKernel) -> BinaryMask {
    morph(mask, kernel, true)
}

/// Morphological erosion; pixels outside the raster are ignored.
pub fn erode(mask: &BinaryMask, kernel: &MorphKernel) -> BinaryMask {
    morph(mask, kernel, false)
}

/// Erosion followed by dilation with the same (symmetric) element.
pub fn opening(mask: &BinaryMask, kernel: &MorphKernel) -> BinaryMask {
    dilate(&erode(mask, kernel), kernel)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub threshold: f64,
    pub min_size: usize,
    pub dilate_kernel: MorphKernel,
    pub open_kernel: MorphKernel,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            threshold: 0.04,
            min_size: 1000,
            dilate_kernel: MorphKernel::rect(15),
            open_kernel: MorphKernel::rect(31),
        }
    }
}

/// Intermediate masks of [`extract_scan_frame`], kept for inspection.
#[derive(Debug, Clone)]
pub struct FrameStages {
    pub gradient: BinaryMask,
    pub cleaned: BinaryMask,
    pub dilated: BinaryMask,
    pub opened: BinaryMask,
}

pub fn frame_stages(raw: &GrayImage, cfg: &FrameConfig) -> Result<FrameStages, PreprocessError> {
    if raw.width() < 64 || raw.height() < 64 {
        return Err(PreprocessError::TooSmall(raw.width(), raw.height()));
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(PreprocessError::BadThreshold(cfg.threshold));
    }
    cfg.dilate_kernel.validate()?;
    cfg.open_kernel.validate()?;
    let gradient = gradient_mask(raw, cfg.threshold);
    let cleaned = remove_small_components(&gradient, cfg.min_size.max(1));
    let dilated = dilate(&cleaned, &cfg.dilate_kernel);
    let opened = opening(&dilated, &cfg.open_kernel);
    Ok(FrameStages {
        gradient,
        cleaned,
        dilated,
        opened,
    })
}

/// Locates the scan area and returns the raw image cropped to it.
///
/// The crop is the tight box of the edge pixels (after small-component
/// removal) that survive inside the opened mask, so the growth introduced by
/// the dilation step does not leak into the crop.
pub fn extract_scan_frame(
    raw: &GrayImage,
    cfg: &FrameConfig,
) -> Result<(GrayImage, CropRegion), PreprocessError> {
    let stages = frame_stages(raw, cfg)?;
    let support = stages.opened.and(&stages.cleaned);
    let bbox = support.bounding_box().ok_or(PreprocessError::NoFrameFound)?;
    Ok((raw.crop(&bbox), CropRegion { bbox }))
}

/// [`extract_scan_frame`] followed by a resize to `size x size`.
pub fn extract_and_resize(
    raw: &GrayImage,
    cfg: &FrameConfig,
    size: usize,
) -> Result<(GrayImage, CropRegion), PreprocessError> {
    let (crop, region) = extract_scan_frame(raw, cfg)?;
    Ok((resize(&crop, size, size), region))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        BinaryMask::from_fn(rows[0].len(), rows.len(), |x, y| rows[y].as_bytes()[x] == b'#').unwrap()
    }

    fn render(m: &BinaryMask) -> Vec<String> {
        (0..m.height())
            .map(|y| (0..m.width()).map(|x| if m.get(x, y) { '#' } else { '.' }).collect())
            .collect()
    }

    // flood fill over an explicit neighbour list, independent of label_components
    fn component_sizes_oracle(m: &BinaryMask) -> Vec<usize> {
        let mut seen = vec![false; m.width() * m.height()];
        let mut sizes = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if !m.get(x, y) || seen[y * m.width() + x] {
                    continue;
                }
                let mut queue = std::collections::VecDeque::from([(x, y)]);
                seen[y * m.width() + x] = true;
                let mut n = 0;
                while let Some((cx, cy)) = queue.pop_front() {
                    n += 1;
                    for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                        let nx = cx as i64 + dx;
                        let ny = cy as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= m.width() as i64 || ny >= m.height() as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if m.get(nx, ny) && !seen[ny * m.width() + nx] {
                            seen[ny * m.width() + nx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
                sizes.push(n);
            }
        }
        sizes
    }

    #[test]
    fn gradient_of_constant_is_empty() {
        let img = GrayImage::filled(20, 20, 0.3).unwrap();
        assert!(gradient_mask(&img, 0.0).is_empty());
    }

    #[test]
    fn gradient_step_edge_band() {
        // step between columns 1 and 2: central differences are 0.5 at columns 1 and 2
        let img = GrayImage::from_fn(5, 5, |x, _| if x >= 2 { 1.0 } else { 0.0 }).unwrap();
        let m = gradient_mask(&img, 0.25);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(m.get(x, y), x == 1 || x == 2, "({x},{y})");
            }
        }
        assert!(gradient_mask(&img, 1.0).is_empty());
    }

    #[test]
    fn small_component_boundary() {
        let blob = |n: usize| BinaryMask::from_fn(100, 40, |x, y| y * 100 + x < n && y < 40).unwrap();
        let m999 = blob(999);
        assert_eq!(component_sizes_oracle(&m999), vec![999]);
        assert!(remove_small_components(&m999, 1000).is_empty());
        let m1000 = blob(1000);
        assert_eq!(component_sizes_oracle(&m1000), vec![1000]);
        assert_eq!(remove_small_components(&m1000, 1000), m1000);
        let empty = BinaryMask::new(10, 10).unwrap();
        assert_eq!(remove_small_components(&empty, 1000), empty);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = mask_from(&["#..", ".#.", "..#"]);
        let (_, sizes) = label_components(&m);
        assert_eq!(sizes[1..], [3]);
    }

    #[test]
    fn dilate_examples() {
        let empty = BinaryMask::new(7, 7).unwrap();
        assert!(dilate(&empty, &MorphKernel::rect(3)).is_empty());

        let mut one = BinaryMask::new(5, 5).unwrap();
        one.set(0, 2, true);
        let d = dilate(&one, &MorphKernel::rect(3));
        assert_eq!(render(&d), vec![".....", "##...", "##...", "##...", "....."]);

        let gap = mask_from(&["#.#...."]);
        assert_eq!(render(&dilate(&gap, &MorphKernel::rect(3))), vec!["####..."]);
    }

    #[test]
    fn opening_examples() {
        let block = BinaryMask::from_fn(14, 14, |x, y| (2..12).contains(&x) && (2..12).contains(&y)).unwrap();
        assert_eq!(opening(&block, &MorphKernel::rect(3)), block);

        let mut single = BinaryMask::new(9, 9).unwrap();
        single.set(4, 4, true);
        assert!(opening(&single, &MorphKernel::rect(3)).is_empty());

        let l_shape = mask_from(&[
            ".......", //
            ".####..",
            ".####..",
            ".####..",
            ".#.....",
            ".#.....",
            ".......",
        ]);
        let body = mask_from(&[
            ".......", //
            ".####..",
            ".####..",
            ".####..",
            ".......",
            ".......",
            ".......",
        ]);
        assert_eq!(opening(&l_shape, &MorphKernel::rect(3)), body);
    }

    #[test]
    fn ellipse_kernel_shape() {
        let k = MorphKernel::new(KernelShape::Ellipse, 5, 5).unwrap();
        let mut one = BinaryMask::new(5, 5).unwrap();
        one.set(2, 2, true);
        let d = dilate(&one, &k);
        assert!(!d.get(0, 0) && d.get(2, 0) && d.get(1, 1));
        assert!(MorphKernel::new(KernelShape::Rect, 4, 3).is_err());
    }

    #[test]
    fn constant_image_has_no_frame() {
        let raw = GrayImage::filled(128, 100, 0.2).unwrap();
        assert_eq!(
            extract_scan_frame(&raw, &FrameConfig::default()).unwrap_err(),
            PreprocessError::NoFrameFound
        );
        let tiny = GrayImage::filled(32, 100, 0.2).unwrap();
        assert!(matches!(
            extract_scan_frame(&tiny, &FrameConfig::default()),
            Err(PreprocessError::TooSmall(32, 100))
        ));
    }

    #[test]
    fn full_canvas_scan_gives_full_crop() {
        // high-frequency texture everywhere: gradient set on every pixel
        let raw = GrayImage::from_fn(200, 150, |x, y| ((x * 7 + y * 13) % 5) as f32 / 5.0).unwrap();
        let (crop, region) = extract_scan_frame(&raw, &FrameConfig::default()).unwrap();
        assert_eq!(region.bbox, BBox::new(0.0, 0.0, 200.0, 150.0).unwrap());
        assert_eq!(crop, raw);
    }
}
