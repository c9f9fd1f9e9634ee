//! Rectangular crops and polygon masks.

use crate::model::{Frame, ModelError, PixelCoord, PolygonRoi, RectRoi};

pub fn crop_roi(frame: &Frame, roi: &RectRoi) -> Result<Frame, ModelError> {
    roi.check_within(frame.rows(), frame.cols())?;
    let mut values = Vec::with_capacity(roi.height * roi.width);
    for r in roi.row0..roi.row0 + roi.height {
        values.extend_from_slice(&frame.row(r)[roi.col0..roi.col0 + roi.width]);
    }
    Frame::new(roi.height, roi.width, values)
}

/// Crop rectangles of a common size for two sequences: the larger height and
/// the larger width of the two selections, each anchored at its own origin
/// and pulled back inside the frame if needed.
pub fn common_crops(a: &RectRoi, b: &RectRoi, rows: usize, cols: usize) -> Result<(RectRoi, RectRoi), ModelError> {
    a.check_within(rows, cols)?;
    b.check_within(rows, cols)?;
    let height = a.height.max(b.height);
    let width = a.width.max(b.width);
    let fit = |r: &RectRoi| RectRoi {
        row0: r.row0.min(rows - height),
        col0: r.col0.min(cols - width),
        height,
        width,
    };
    Ok((fit(a), fit(b)))
}

/// Boolean mask of pixel centres inside the polygon (edges included).
pub fn polygon_mask(poly: &PolygonRoi, rows: usize, cols: usize) -> Vec<bool> {
    (0..rows * cols)
        .map(|k| poly.contains(PixelCoord::new((k / cols) as f64, (k % cols) as f64)))
        .collect()
}

/// Zeroes every pixel whose centre lies outside the polygon.
pub fn mask_polygon(frame: &Frame, poly: &PolygonRoi) -> Frame {
    let mask = polygon_mask(poly, frame.rows(), frame.cols());
    let values = frame
        .values()
        .iter()
        .zip(&mask)
        .map(|(&v, &inside)| if inside { v } else { 0.0 })
        .collect();
    Frame::new(frame.rows(), frame.cols(), values).expect("masking keeps shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> Frame {
        Frame::from_fn(rows, cols, |r, c| (r * cols + c + 1) as f64).unwrap()
    }

    fn poly(pts: &[(f64, f64)]) -> PolygonRoi {
        PolygonRoi::new(pts.iter().map(|&(r, c)| PixelCoord::new(r, c)).collect()).unwrap()
    }

    #[test]
    fn full_crop_is_identity() {
        let f = grid(4, 5);
        assert_eq!(crop_roi(&f, &RectRoi::full(4, 5)).unwrap(), f);
    }

    #[test]
    fn single_pixel_crop() {
        let f = grid(4, 4);
        let c = crop_roi(&f, &RectRoi::new(0, 0, 1, 1)).unwrap();
        assert_eq!(c.values(), &[1.0]);
    }

    #[test]
    fn block_crop() {
        let f = grid(4, 4);
        let c = crop_roi(&f, &RectRoi::new(1, 2, 2, 2)).unwrap();
        assert_eq!(c, Frame::from_rows(&[[7.0, 8.0], [11.0, 12.0]]).unwrap());
    }

    #[test]
    fn crop_out_of_bounds() {
        let f = grid(4, 4);
        assert!(matches!(crop_roi(&f, &RectRoi::new(3, 0, 2, 1)), Err(ModelError::OutOfBounds { .. })));
    }

    #[test]
    fn common_crops_use_larger_size() {
        let (a, b) = common_crops(&RectRoi::new(0, 0, 5, 3), &RectRoi::new(6, 6, 3, 4), 10, 10).unwrap();
        assert_eq!((a.height, a.width), (5, 4));
        assert_eq!((b.height, b.width), (5, 4));
        assert_eq!((b.row0, b.col0), (5, 6));
    }

    #[test]
    fn full_polygon_keeps_frame() {
        let f = grid(5, 6);
        let p = poly(&[(0.0, 0.0), (0.0, 5.0), (4.0, 5.0), (4.0, 0.0)]);
        assert_eq!(mask_polygon(&f, &p), f);
    }

    #[test]
    fn polygon_cutting_a_corner() {
        let f = grid(6, 6);
        // Pentagon missing the bottom-right corner triangle.
        let p = poly(&[(0.0, 0.0), (0.0, 5.0), (3.0, 5.0), (5.0, 3.0), (5.0, 0.0)]);
        let g = mask_polygon(&f, &p);
        for r in 0..6 {
            for c in 0..6 {
                // Oracle: the half-plane r + c <= 8 plus the box.
                let inside = r + c <= 8;
                let expect = if inside { f.get(r, c) } else { 0.0 };
                assert_eq!(g.get(r, c), expect, "({r},{c})");
            }
        }
    }

    #[test]
    fn sliver_polygon_zeroes_everything() {
        let f = grid(4, 4);
        let p = poly(&[(0.1, 0.1), (0.1, 0.1000001), (0.1000001, 0.1)]);
        assert!(mask_polygon(&f, &p).values().iter().all(|&v| v == 0.0));
    }
}
