//! Deterministic PNG figures. The CSV tables carry the numbers; figures
//! carry no text, and value ranges are reported alongside in JSON.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Series colours in sweep order; GLM results are drawn in black.
pub const SERIES: [[u8; 3]; 6] = [
    [215, 25, 28],
    [26, 150, 65],
    [44, 123, 182],
    [0, 190, 200],
    [120, 60, 160],
    [128, 128, 128],
];
pub const BLACK: [u8; 3] = [0, 0, 0];
const WHITE: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [160, 160, 160];

const HEATMAP_TARGET_PX: usize = 480;
const BAR_GAP: u32 = 8;
const BAR_WIDTH: u32 = 18;

pub fn series_colour(k: usize) -> [u8; 3] {
    SERIES[k % SERIES.len()]
}

/// Blue, white, red ramp on `t` in `[-1, 1]`.
pub fn diverging(t: f64) -> [u8; 3] {
    const NEG: [f64; 3] = [33.0, 102.0, 172.0];
    const POS: [f64; 3] = [178.0, 24.0, 43.0];
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t < 0.0 { NEG } else { POS };
    let a = t.abs();
    let mix = |k: usize| (255.0 * (1.0 - a) + end[k] * a).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Value range mapped onto the colour ramp of one heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColourScale {
    /// Value drawn white.
    pub centre: f64,
    /// Distance from `centre` drawn at full saturation.
    pub half_range: f64,
    pub min: f64,
    pub max: f64,
}

impl ColourScale {
    /// Centred on zero when the values straddle it, otherwise on their midrange.
    pub fn fit(values: &[f64]) -> ColourScale {
        let (min, max) = values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (min, max) = if min <= max { (min, max) } else { (0.0, 0.0) };
        let centre = if min <= 0.0 && max >= 0.0 { 0.0 } else { 0.5 * (min + max) };
        let half = (max - centre).abs().max((centre - min).abs());
        ColourScale {
            centre,
            half_range: if half > 0.0 { half } else { 1.0 },
            min,
            max,
        }
    }

    pub fn colour(&self, v: f64) -> [u8; 3] {
        diverging((v - self.centre) / self.half_range)
    }
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::input("output", e.to_string(), Some(dir)))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::input("output", e.to_string(), Some(path)))
}

/// Heatmap of a row-major lattice surface with row 0 at the bottom, plus a
/// vertical scale bar from `centre - half_range` (bottom) to `centre + half_range` (top).
pub fn heatmap(values: &[f64], nrow: usize, ncol: usize, path: &Path) -> CliResult<ColourScale> {
    let scale = ColourScale::fit(values);
    let px = (HEATMAP_TARGET_PX / nrow.max(ncol)).max(1) as u32;
    let (w, h) = (ncol as u32 * px, nrow as u32 * px);
    let mut img = RgbImage::from_pixel(w + BAR_GAP + BAR_WIDTH, h, Rgb(WHITE));
    for r in 0..nrow {
        for c in 0..ncol {
            let colour = Rgb(scale.colour(values[r * ncol + c]));
            let top = (nrow - 1 - r) as u32 * px;
            for dy in 0..px {
                for dx in 0..px {
                    img.put_pixel(c as u32 * px + dx, top + dy, colour);
                }
            }
        }
    }
    for y in 0..h {
        let t = 1.0 - 2.0 * (y as f64 + 0.5) / h as f64;
        let colour = Rgb(diverging(t));
        for x in 0..BAR_WIDTH {
            img.put_pixel(w + BAR_GAP + x, y, colour);
        }
    }
    save(&img, path)?;
    Ok(scale)
}

/// Plot canvas with a linear map from data to pixel coordinates.
struct Canvas {
    img: RgbImage,
    margin: u32,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(width: u32, height: u32, margin: u32, x_range: (f64, f64), y_range: (f64, f64)) -> Canvas {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Canvas {
            img: RgbImage::from_pixel(width, height, Rgb(WHITE)),
            margin,
            x_range: pad(x_range),
            y_range: pad(y_range),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = (self.img.width() as f64, self.img.height() as f64);
        let m = self.margin as f64;
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        (m + fx * (w - 2.0 * m), h - m - fy * (h - 2.0 * m))
    }

    fn dot(&mut self, x: f64, y: f64, colour: [u8; 3], radius: i64) {
        let (w, h) = (self.img.width() as i64, self.img.height() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (xi, yi) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if (0..w).contains(&xi) && (0..h).contains(&yi) {
                    self.img.put_pixel(xi as u32, yi as u32, Rgb(colour));
                }
            }
        }
    }

    /// Segment between two data points.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), colour: [u8; 3], radius: i64) {
        let (pa, pb) = (self.px(a.0, a.1), self.px(b.0, b.1));
        let steps = ((pb.0 - pa.0).abs().max((pb.1 - pa.1).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            self.dot(pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1), colour, radius);
        }
    }

    fn axes(&mut self) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        self.line((x0, y0), (x1, y0), AXIS, 0);
        self.line((x0, y0), (x0, y1), AXIS, 0);
    }
}

/// One interval per (coefficient, series): `groups[g][s] = (lower, mean, upper)`.
pub fn interval_plot(groups: &[Vec<(f64, f64, f64)>], colours: &[[u8; 3]], path: &Path) -> CliResult<()> {
    let values = groups.iter().flatten().flat_map(|&(l, m, u)| [l, m, u]);
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = 0.05 * (hi - lo).max(1e-9);
    let n_groups = groups.len().max(1);
    let mut c = Canvas::new(
        (140 * n_groups as u32).max(240),
        360,
        24,
        (0.0, n_groups as f64),
        (lo - pad, hi + pad),
    );
    c.axes();
    c.line((0.0, 0.0), (n_groups as f64, 0.0), AXIS, 0);
    for (g, series) in groups.iter().enumerate() {
        let k = series.len().max(1) as f64;
        for (s, &(l, m, u)) in series.iter().enumerate() {
            let x = g as f64 + 0.15 + 0.7 * (s as f64 + 0.5) / k;
            let colour = colours[s % colours.len()];
            c.line((x, l), (x, u), colour, 1);
            let (mx, my) = c.px(x, m);
            c.dot(mx, my, colour, 3);
        }
    }
    save(&c.img, path)
}

/// Curves `series[k] = [(x, y), ...]` on shared axes starting at `y = 0`.
pub fn line_plot(series: &[Vec<(f64, f64)>], colours: &[[u8; 3]], path: &Path) -> CliResult<()> {
    let finite = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (x0, x1, y1) = finite.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(a, b, c), &(x, y)| {
        (a.min(x), b.max(x), c.max(y))
    });
    let x_range = if x0 <= x1 { (x0, x1) } else { (0.0, 1.0) };
    let mut c = Canvas::new(480, 320, 24, x_range, (0.0, 1.05 * y1.max(1e-12)));
    c.axes();
    for (k, s) in series.iter().enumerate() {
        let colour = colours[k % colours.len()];
        for w in s.windows(2) {
            if w.iter().all(|(x, y)| x.is_finite() && y.is_finite()) {
                c.line(w[0], w[1], colour, 1);
            }
        }
    }
    save(&c.img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_white_at_centre_and_saturated_at_ends() {
        assert_eq!(diverging(0.0), [255, 255, 255]);
        assert_eq!(diverging(-1.0), [33, 102, 172]);
        assert_eq!(diverging(1.0), [178, 24, 43]);
        assert_eq!(diverging(5.0), diverging(1.0));
    }

    #[test]
    fn scale_centres_on_zero_only_when_values_straddle_it() {
        let s = ColourScale::fit(&[-1.0, 3.0]);
        assert_eq!((s.centre, s.half_range), (0.0, 3.0));
        let s = ColourScale::fit(&[2.0, 6.0]);
        assert_eq!((s.centre, s.half_range), (4.0, 2.0));
        let s = ColourScale::fit(&[1.5, 1.5]);
        assert_eq!(s.half_range, 1.0);
    }

    #[test]
    fn heatmap_puts_row_zero_at_the_bottom() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        // 3x3 with a single positive cell at row 0, col 0
        let mut v = vec![0.0; 9];
        v[0] = 1.0;
        heatmap(&v, 3, 3, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let h = img.height();
        assert_eq!(img.get_pixel(0, h - 1).0, diverging(1.0));
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
    }
}
