//! Artifact writers: fixed-precision CSV, raw `.npy` arrays and heatmap PNGs.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Four-decimal rendering used by every CSV cell.
pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// The value a CSV cell re-parses to.
pub fn round4(v: f64) -> f64 {
    fmt4(v).parse().expect("formatted float parses")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::MalformedFile { path: path.into(), reason: e.to_string() }
}

/// Writes a header and rows; floats go through [`fmt4`].
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<CsvCell>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(CsvCell::render)).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CsvCell {
    Text(String),
    Int(u64),
    Float(f64),
}

impl CsvCell {
    fn render(&self) -> String {
        match self {
            CsvCell::Text(s) => s.clone(),
            CsvCell::Int(v) => v.to_string(),
            CsvCell::Float(v) => fmt4(*v),
        }
    }
}

/// Header and string rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))?;
    Ok((header, rows))
}

/// Little-endian f64 array in NumPy's `.npy` v1.0 format.
pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // magic (6) + version (2) + header length (2) + header, padded to 64 with a trailing newline
    let total = (10 + header.len() + 1).div_ceil(64) * 64;
    while 10 + header.len() + 1 < total {
        header.push(' ');
    }
    header.push('\n');
    let mut buf = Vec::with_capacity(total + 8 * t.len());
    buf.extend_from_slice(b"\x93NUMPY\x01\x00");
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads back an array written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::MalformedFile { path: path.into(), reason: reason.into() };
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 10 || &buf[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad("not an npy v1.0 file"));
    }
    let hlen = u16::from_le_bytes([buf[8], buf[9]]) as usize;
    let header = std::str::from_utf8(buf.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'<f8'") {
        return Err(bad("only <f8 arrays are supported"));
    }
    let inner = header.split('(').nth(1).and_then(|s| s.split(')').next()).ok_or_else(|| bad("no shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape")))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> =
        buf[10 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

/// Colormap stops, evenly spaced over `[0, 1]`: black, indigo, crimson,
/// orange, pale yellow.
pub const COLORMAP: [[u8; 3]; 5] = [[0, 0, 4], [60, 15, 110], [190, 40, 60], [250, 150, 20], [252, 255, 164]];

pub fn colormap(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Min-max normalized single-channel map rendered through [`colormap`] and
/// nearest-upsampled by `factor`.
pub fn save_heatmap(path: &Path, map: &Tensor, factor: usize) -> Result<()> {
    let (_, h, w) = map.chw();
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = RgbImage::from_fn((w * factor) as u32, (h * factor) as u32, |x, y| {
        let v = map.data()[(y as usize / factor) * w + x as usize / factor];
        image::Rgb(colormap((v - lo) / span))
    });
    img.save(path).map_err(|e| Error::MalformedFile { path: path.into(), reason: e.to_string() })
}

/// Writes a `[3, H, W]` or `[1, H, W]` image in `[0, 1]` as-is.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.chw();
    let px = |ch: usize, y: u32, x: u32| (t.at3(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = if c == 3 {
        RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])).save(path)
    } else {
        GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(0, y, x)])).save(path)
    };
    res.map_err(|e| Error::MalformedFile { path: path.into(), reason: e.to_string() })
}

/// Markdown table with four-decimal floats.
pub fn markdown_table(header: &[&str], rows: &[Vec<CsvCell>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let cells: Vec<String> = r.iter().map(CsvCell::render).collect();
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;

    #[test]
    fn npy_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for shape in [vec![7], vec![1, 5, 3], vec![2, 3, 4, 5]] {
            let t = rand_tensor(&shape, 3);
            let p = dir.path().join("a.npy");
            write_npy(&p, &t).unwrap();
            assert_eq!(std::fs::read(&p).unwrap().len() % 8, 0);
            assert_eq!(read_npy(&p).unwrap(), t);
        }
    }

    #[test]
    fn csv_cells_reparse_to_rounded_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let vals = [0.123456789, 2.0, 1e-5, 12345.67891];
        write_csv(&p, &["a", "b", "c", "d"], &[vals.iter().map(|&v| CsvCell::Float(v)).collect()]).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, ["a", "b", "c", "d"]);
        for (cell, v) in rows[0].iter().zip(vals) {
            assert_eq!(cell.parse::<f64>().unwrap(), round4(v));
        }
        assert_eq!(rows[0][0], "0.1235");
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), COLORMAP[0]);
        assert_eq!(colormap(1.0), COLORMAP[4]);
        assert_eq!(colormap(0.5), COLORMAP[2]);
        assert_eq!(colormap(-3.0), COLORMAP[0]);
    }
}
