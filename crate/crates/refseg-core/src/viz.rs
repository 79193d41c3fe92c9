//! Heatmap rendering and side-by-side panel composition for the `visualize`
//! command.

use ndarray::{Array2, Array3};

use crate::autodiff::resize_bilinear_2d;
use crate::metrics::max_pixel;

/// Blue -> cyan -> yellow -> red colormap over `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [0.05, 0.05, 0.60]),
        (0.35, [0.05, 0.75, 0.85]),
        (0.70, [0.95, 0.90, 0.15]),
        (1.0, [0.85, 0.10, 0.10]),
    ];
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if v <= t1 {
            let t = if t1 > t0 { (v - t0) / (t1 - t0) } else { 0.0 };
            return [
                lerp(c0[0], c1[0], t),
                lerp(c0[1], c1[1], t),
                lerp(c0[2], c1[2], t),
            ];
        }
    }
    stops[3].1
}

/// Render a response map as an RGB heatmap of the requested size, returning
/// the image and the maximum-pixel location in output coordinates.
pub fn render_heatmap(map: &Array2<f64>, out_h: usize, out_w: usize) -> (Array3<f64>, (usize, usize)) {
    let up = if map.dim() == (out_h, out_w) {
        map.clone()
    } else {
        resize_bilinear_2d(map, out_h, out_w)
    };
    let mn = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (mx - mn).max(1e-12);
    let peak = max_pixel(&up);
    let mut img = Array3::<f64>::zeros((3, out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let c = colormap((up[[y, x]] - mn) / range);
            for ch in 0..3 {
                img[[ch, y, x]] = c[ch];
            }
        }
    }
    (img, peak)
}

/// Render a binary mask as a grayscale RGB image.
pub fn render_mask(mask: &Array2<u8>) -> Array3<f64> {
    let (h, w) = mask.dim();
    let mut img = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = if mask[[y, x]] != 0 { 1.0 } else { 0.0 };
            for ch in 0..3 {
                img[[ch, y, x]] = v;
            }
        }
    }
    img
}

/// Draw a small cross marker.
pub fn draw_cross(img: &mut Array3<f64>, y: usize, x: usize, color: [f64; 3], arm: usize) {
    let (_, h, w) = img.dim();
    for d in 0..=arm {
        for (yy, xx) in [
            (y.saturating_sub(d), x),
            ((y + d).min(h - 1), x),
            (y, x.saturating_sub(d)),
            (y, (x + d).min(w - 1)),
        ] {
            for ch in 0..3 {
                img[[ch, yy, xx]] = color[ch];
            }
        }
    }
}

/// Compose same-height panels side by side with a light separator.
pub fn compose_panels(panels: &[Array3<f64>], pad: usize) -> Array3<f64> {
    assert!(!panels.is_empty());
    let h = panels[0].dim().1;
    let total_w: usize = panels.iter().map(|p| p.dim().2).sum::<usize>() + pad * (panels.len() - 1);
    let mut out = Array3::<f64>::from_elem((3, h, total_w), 0.95);
    let mut x0 = 0usize;
    for p in panels {
        let (_, ph, pw) = p.dim();
        assert_eq!(ph, h, "panels must share height");
        for y in 0..h {
            for x in 0..pw {
                for ch in 0..3 {
                    out[[ch, y, x0 + x]] = p[[ch, y, x]];
                }
            }
        }
        x0 += pw + pad;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_peak_matches_metrics_max_pixel() {
        let mut map = Array2::<f64>::zeros((4, 4));
        map[[2, 1]] = 3.0;
        let (img, peak) = render_heatmap(&map, 16, 16);
        assert_eq!(img.dim(), (3, 16, 16));
        let up = resize_bilinear_2d(&map, 16, 16);
        assert_eq!(peak, max_pixel(&up));
    }

    #[test]
    fn colormap_endpoints() {
        let lo = colormap(0.0);
        let hi = colormap(1.0);
        assert!(lo[2] > lo[0]); // blue end
        assert!(hi[0] > hi[2]); // red end
    }

    #[test]
    fn panel_composition_dimensions() {
        let a = Array3::<f64>::zeros((3, 8, 5));
        let b = Array3::<f64>::ones((3, 8, 7));
        let out = compose_panels(&[a, b], 2);
        assert_eq!(out.dim(), (3, 8, 14));
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[0, 0, 6]], 0.95); // separator
        assert_eq!(out[[0, 0, 7]], 1.0);
    }

    #[test]
    fn cross_marker_is_drawn() {
        let mut img = Array3::<f64>::zeros((3, 9, 9));
        draw_cross(&mut img, 4, 4, [1.0, 0.0, 0.0], 2);
        assert_eq!(img[[0, 4, 4]], 1.0);
        assert_eq!(img[[0, 2, 4]], 1.0);
        assert_eq!(img[[0, 4, 6]], 1.0);
    }
}
