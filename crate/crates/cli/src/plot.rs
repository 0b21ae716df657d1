//! Minimal line plots of CSV columns, rendered to greyscale rasters.

use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::image_io::{write_pgm_bytes, write_png_bytes};

pub const WIDTH: usize = 480;
pub const HEIGHT: usize = 270;
const MARGIN: usize = 20;

/// `(x, y)` points of column `y` against column `x`; rows with an empty or
/// non-numeric cell in either column are skipped.
pub fn read_series(path: &Path, x: &str, ys: &[String]) -> CliResult<Vec<Vec<(f64, f64)>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Other(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(vec![format!("column {name:?} not in {}", path.display())]))
    };
    let xi = col(x)?;
    let yis = ys.iter().map(|y| col(y)).collect::<CliResult<Vec<_>>>()?;
    let mut series = vec![Vec::new(); ys.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Other(e.to_string()))?;
        let Some(xv) = rec.get(xi).and_then(|s| s.parse::<f64>().ok()) else { continue };
        for (s, &yi) in series.iter_mut().zip(&yis) {
            if let Some(yv) = rec.get(yi).and_then(|s| s.parse::<f64>().ok()) {
                if xv.is_finite() && yv.is_finite() {
                    s.push((xv, yv));
                }
            }
        }
    }
    Ok(series)
}

fn line(img: &mut [u8], (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u8) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            img[y as usize * WIDTH + x as usize] = v;
        }
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

/// Rasterizes the series on shared axes; series `i` is drawn in grey level
/// `min(60 i, 180)` on white.
pub fn render(series: &[Vec<(f64, f64)>]) -> Vec<u8> {
    let mut img = vec![255u8; WIDTH * HEIGHT];
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (ox, oy) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    line(&mut img, (ox, MARGIN as i64), (ox, oy), 0);
    line(&mut img, (ox, oy), ((WIDTH - MARGIN) as i64, oy), 0);
    if !x0.is_finite() {
        return img;
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN as f64 + (x - x0) / sx * (WIDTH - 2 * MARGIN) as f64;
        let py = (HEIGHT - MARGIN) as f64 - (y - y0) / sy * (HEIGHT - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let v = (60 * i).min(180) as u8;
        for w in s.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), v);
        }
        if s.len() == 1 {
            let p = to_px(s[0]);
            line(&mut img, p, p, v);
        }
    }
    img
}

/// `plot`: writes `out.pgm` (and `out.png` when asked).
pub fn plot(input: &Path, x: &str, ys: &[String], out: &Path, png: bool) -> CliResult<()> {
    let series = read_series(input, x, ys)?;
    let img = render(&series);
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d)?;
    }
    write_pgm_bytes(&out.with_extension("pgm"), WIDTH, HEIGHT, &img)?;
    if png {
        write_png_bytes(&out.with_extension("png"), WIDTH, HEIGHT, &img)?;
    }
    Ok(())
}
