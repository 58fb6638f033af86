//! Text and image dumps of lattice grids and alignment paths.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::lattice::AlignmentPath;

/// One line per `t`, comma-separated values over `u`; `-inf` spelled out.
pub fn grid_text(grid: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in grid.rows() {
        let line: Vec<String> = row
            .iter()
            .map(|&v| if v == f64::NEG_INFINITY { "-inf".to_string() } else { format!("{v:e}") })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`grid_text`] output.
pub fn parse_grid_text(text: &str) -> Result<Array2<f64>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", i + 1)))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err("ragged grid".into());
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| e.to_string())
}

/// Gray level for each cell: `[lowest finite value, 0]` maps linearly onto `0..=255`,
/// `-inf` is 0 and anything above 0 saturates.
pub fn gray_levels(grid: &Array2<f64>) -> Array2<u8> {
    let lo = grid
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    grid.mapv(|v| {
        if !v.is_finite() || v < lo {
            0
        } else if lo == 0.0 {
            255
        } else {
            (((v - lo) / -lo).min(1.0) * 255.0).round() as u8
        }
    })
}

/// Binary graymap (P5), `T` pixels wide and `U+1` high, with `u = 0` on the bottom row
/// so the path climbs from the lower left.
pub fn grid_pgm(grid: &Array2<f64>) -> Vec<u8> {
    let levels = gray_levels(grid);
    let (t_len, u1) = levels.dim();
    let mut out = format!("P5\n{t_len} {u1}\n255\n").into_bytes();
    for u in (0..u1).rev() {
        for t in 0..t_len {
            out.push(levels[[t, u]]);
        }
    }
    out
}

/// Width, height and pixels of a P5 image.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format!("unsupported header {fields:?}"));
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let pixels = bytes.get(pos + 1..).ok_or("missing pixel data")?;
    if pixels.len() != w * h {
        return Err(format!("{} pixels for {w}x{h}", pixels.len()));
    }
    Ok((w, h, pixels.to_vec()))
}

/// The grid nodes the path visits, one `t,u` per line, ending at `(T-1, U)`.
pub fn path_text(path: &AlignmentPath) -> String {
    let mut out = String::new();
    for (t, u) in path.nodes() {
        writeln!(out, "{t},{u}").expect("writing to a String");
    }
    out
}
