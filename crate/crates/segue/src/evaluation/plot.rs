//! Static chart emitter: renders line charts (accuracy vs. JPEG quality,
//! accuracy vs. adversarial budget, loss curves) straight into PNG files.
//! Everything is drawn into an RGB byte canvas with a built-in 5x7 pixel
//! font — no display server, no interactivity, deterministic output.

use std::path::Path;

use crate::util::io;
use crate::{Result, SegueError};

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Fixed palette; series cycle through it.
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],  // blue
    [214, 39, 40],   // red
    [44, 160, 44],   // green
    [255, 127, 14],  // orange
    [148, 103, 189], // purple
    [23, 190, 207],  // teal
];

const WIDTH: usize = 640;
const HEIGHT: usize = 440;
const MARGIN_LEFT: usize = 64;
const MARGIN_RIGHT: usize = 16;
const MARGIN_TOP: usize = 32;
const MARGIN_BOTTOM: usize = 48;

struct Canvas {
    px: Vec<u8>, // RGB, row-major
}

impl Canvas {
    fn new() -> Self {
        Canvas { px: vec![255; WIDTH * HEIGHT * 3] }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let i = (y as usize * WIDTH + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bresenham line.
    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, rgb);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn dot(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.set(x + dx, y + dy, rgb);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, rgb: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            draw_glyph(self, cx, y, ch, rgb);
            cx += 6;
        }
    }
}

/// 5x7 glyphs, one byte per row, low 5 bits used (bit 4 = leftmost).
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x15, 0x11, 0x15, 0x11, 0x1F], // unknown: boxed
    }
}

fn draw_glyph(canvas: &mut Canvas, x: i64, y: i64, ch: char, rgb: [u8; 3]) {
    let rows = glyph(ch);
    for (ry, row) in rows.iter().enumerate() {
        for cx in 0..5u8 {
            if row & (0x10 >> cx) != 0 {
                canvas.set(x + cx as i64, y + ry as i64, rgb);
            }
        }
    }
}

/// Format an axis tick value compactly.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Render a line chart to `path` as a PNG. Each series is drawn as a
/// polyline with point markers; axes carry five ticks each, labels are
/// rendered in the built-in font, and the legend sits in the top margin.
pub fn write_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(SegueError::Config("no points to plot".into()));
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        if !x.is_finite() || !y.is_finite() {
            return Err(SegueError::Config("non-finite point in chart data".into()));
        }
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }

    let plot_w = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
    let plot_h = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64;
    let sx = |x: f64| MARGIN_LEFT as i64 + ((x - x_min) / (x_max - x_min) * plot_w) as i64;
    let sy = |y: f64| {
        (HEIGHT - MARGIN_BOTTOM) as i64 - ((y - y_min) / (y_max - y_min) * plot_h) as i64
    };

    let mut canvas = Canvas::new();
    let black = [0u8, 0, 0];
    let grey = [200u8, 200, 200];

    // Grid and ticks: five divisions per axis.
    for t in 0..=4 {
        let fx = x_min + (x_max - x_min) * t as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * t as f64 / 4.0;
        let gx = sx(fx);
        let gy = sy(fy);
        canvas.line(gx, MARGIN_TOP as i64, gx, (HEIGHT - MARGIN_BOTTOM) as i64, grey);
        canvas.line(MARGIN_LEFT as i64, gy, (WIDTH - MARGIN_RIGHT) as i64, gy, grey);
        let xl = tick_label(fx);
        canvas.text(
            gx - 3 * xl.len() as i64,
            (HEIGHT - MARGIN_BOTTOM + 6) as i64,
            &xl,
            black,
        );
        let yl = tick_label(fy);
        canvas.text(MARGIN_LEFT as i64 - 6 * yl.len() as i64 - 6, gy - 3, &yl, black);
    }

    // Axes on top of the grid.
    canvas.line(
        MARGIN_LEFT as i64,
        MARGIN_TOP as i64,
        MARGIN_LEFT as i64,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        black,
    );
    canvas.line(
        MARGIN_LEFT as i64,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        (WIDTH - MARGIN_RIGHT) as i64,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        black,
    );

    // Series.
    for (si, s) in series.iter().enumerate() {
        let rgb = PALETTE[si % PALETTE.len()];
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in sorted.windows(2) {
            canvas.line(sx(pair[0].0), sy(pair[0].1), sx(pair[1].0), sy(pair[1].1), rgb);
        }
        for &(x, y) in &sorted {
            canvas.dot(sx(x), sy(y), rgb);
        }
    }

    // Title, axis labels, legend.
    canvas.text(MARGIN_LEFT as i64, 8, title, black);
    canvas.text(
        (WIDTH / 2 - 3 * x_label.len()) as i64,
        (HEIGHT - 16) as i64,
        x_label,
        black,
    );
    canvas.text(4, (MARGIN_TOP - 12) as i64, y_label, black);
    let mut lx = MARGIN_LEFT as i64 + 8;
    for (si, s) in series.iter().enumerate() {
        let rgb = PALETTE[si % PALETTE.len()];
        let ly = MARGIN_TOP as i64 + 6;
        canvas.line(lx, ly, lx + 12, ly, rgb);
        canvas.text(lx + 16, ly - 3, &s.label, black);
        lx += 16 + 6 * s.label.len() as i64 + 16;
    }

    let mut png = Vec::new();
    use image::ImageEncoder;
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(
            &canvas.px,
            WIDTH as u32,
            HEIGHT as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| SegueError::Runtime(format!("png encoding failed: {e}")))?;
    io::write_atomic(path, &png)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_series() -> Vec<Series> {
        vec![
            Series {
                label: "CLEAN".into(),
                points: vec![(10.0, 0.9), (30.0, 0.88), (50.0, 0.86), (90.0, 0.91)],
            },
            Series {
                label: "SEGUE".into(),
                points: vec![(10.0, 0.35), (30.0, 0.2), (50.0, 0.18), (90.0, 0.12)],
            },
        ]
    }

    #[test]
    fn chart_writes_a_decodable_png_with_expected_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acc_vs_quality.png");
        write_line_chart(&path, "ACCURACY VS JPEG QUALITY", "QUALITY", "ACC", &demo_series())
            .unwrap();
        let img = image::open(&path).expect("output must be a readable PNG");
        assert_eq!(img.width() as usize, WIDTH);
        assert_eq!(img.height() as usize, HEIGHT);
    }

    #[test]
    fn chart_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        write_line_chart(&a, "T", "X", "Y", &demo_series()).unwrap();
        write_line_chart(&b, "T", "X", "Y", &demo_series()).unwrap();
        assert_eq!(
            std::fs::read(&a).unwrap(),
            std::fs::read(&b).unwrap(),
            "identical inputs must produce byte-identical charts"
        );
    }

    #[test]
    fn chart_ink_lands_where_the_data_says() {
        // A single flat series at y = 0 on x in [0, 1]: the polyline must
        // put colored pixels on the bottom gridline, none near the top.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.png");
        let series = vec![Series {
            label: "Z".into(),
            points: vec![(0.0, 0.0), (1.0, 0.0)],
        }];
        write_line_chart(&path, "T", "X", "Y", &series).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let blue = PALETTE[0];
        let count_blue_in_row_band = |y0: u32, y1: u32| -> usize {
            let mut n = 0;
            for y in y0..y1 {
                for x in 0..img.width() {
                    if img.get_pixel(x, y).0 == blue {
                        n += 1;
                    }
                }
            }
            n
        };
        let bottom = count_blue_in_row_band(
            (HEIGHT - MARGIN_BOTTOM - 4) as u32,
            (HEIGHT - MARGIN_BOTTOM + 4) as u32,
        );
        let top = count_blue_in_row_band(MARGIN_TOP as u32 + 12, MARGIN_TOP as u32 + 40);
        assert!(bottom > 100, "flat series must paint the bottom of the plot, got {bottom}");
        assert_eq!(top, 0, "nothing should be drawn near the top for a flat-bottom series");
    }

    #[test]
    fn empty_chart_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_line_chart(
            &dir.path().join("n.png"),
            "T",
            "X",
            "Y",
            &[Series { label: "E".into(), points: vec![] }],
        );
        assert!(err.is_err(), "a chart with no points must be an error");
    }

    #[test]
    fn glyphs_cover_the_report_alphabet() {
        let known = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,:-+/%()=_ ";
        let boxed = glyph('\u{1F600}');
        for ch in known.chars() {
            assert_ne!(glyph(ch), boxed, "character '{ch}' must have its own glyph");
        }
    }
}
