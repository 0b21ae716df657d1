//! 8-bit greyscale image output: binary PGM always, PNG behind the `png` feature.

use std::io::Write;
use std::path::Path;

use figedit_core::grid::Grid;
use figedit_core::scalar::Scalar;

use crate::error::{CliError, CliResult};

/// `round(clamp(v, 0, 1) * 255)` per pixel, row-major.
pub fn to_bytes<S: Scalar>(g: &Grid<S>) -> Vec<u8> {
    g.data.iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_pgm_bytes(path: &Path, w: usize, h: usize, bytes: &[u8]) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_pgm<S: Scalar>(path: &Path, g: &Grid<S>) -> CliResult<()> {
    write_pgm_bytes(path, g.w, g.h, &to_bytes(g))
}

pub fn read_pgm(path: &Path) -> CliResult<(usize, usize, Vec<u8>)> {
    let data = std::fs::read(path)?;
    let bad = || CliError::Other(format!("{}: not a binary 8-bit PGM", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < data.len() && data[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < data.len() && !data[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&data[start..i]).into_owned());
    }
    i += 1;
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P5" || fields[3] != "255" || data.len() < i + w * h {
        return Err(bad());
    }
    Ok((w, h, data[i..i + w * h].to_vec()))
}

#[cfg(feature = "png")]
pub fn write_png_bytes(path: &Path, w: usize, h: usize, bytes: &[u8]) -> CliResult<()> {
    image::save_buffer(path, bytes, w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

#[cfg(not(feature = "png"))]
pub fn write_png_bytes(path: &Path, _w: usize, _h: usize, _bytes: &[u8]) -> CliResult<()> {
    Err(CliError::Other(format!("{}: built without the `png` feature", path.display())))
}

/// Writes `stem.pgm` and, when asked, `stem.png`.
pub fn write_image<S: Scalar>(stem: &Path, g: &Grid<S>, png: bool) -> CliResult<()> {
    let bytes = to_bytes(g);
    write_pgm_bytes(&stem.with_extension("pgm"), g.w, g.h, &bytes)?;
    if png {
        write_png_bytes(&stem.with_extension("png"), g.w, g.h, &bytes)?;
    }
    Ok(())
}
