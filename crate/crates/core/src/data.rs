//! 2-D synthetic densities and user-supplied density ingestion.
//!
//! A density is a normalized `side x side` histogram; a data point is a
//! `(row, col)` pair of tokens with `C = side` and sequence length 2.
//! Densities load from portable graymaps (P2/P5) or CSV matrices, or come
//! from the built-in parametric families.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{PrimeError, Result};
use crate::Rng;

/// A normalized probability histogram over a `side x side` grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    side: usize,
    probs: Vec<f64>,
}

impl DensityGrid {
    /// Normalize raw nonnegative intensities into a density.
    pub fn from_intensities(side: usize, raw: Vec<f64>) -> Result<Self> {
        assert_eq!(raw.len(), side * side, "intensity grid shape mismatch");
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PrimeError::InvalidArgument(
                "intensities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(PrimeError::InvalidArgument(
                "all-zero intensity grid cannot be normalized".into(),
            ));
        }
        let probs = raw.into_iter().map(|v| v / total).collect();
        Ok(Self { side, probs })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, row: u32, col: u32) -> f64 {
        self.probs[row as usize * self.side + col as usize]
    }
}

/// Load a density from a PGM (P2/P5) image or a CSV matrix, center-cropped
/// and nearest-neighbor rescaled to `side x side`, then normalized.
pub fn load_density(path: &Path, side: usize) -> Result<DensityGrid> {
    let bytes = fs::read(path)?;
    let (w, h, raw) = if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        parse_pgm(&bytes)?
    } else {
        parse_csv_matrix(&bytes)?
    };
    let resized = crop_resize_nearest(&raw, w, h, side);
    DensityGrid::from_intensities(side, resized)
}

/// Deterministic parametric densities: `gaussians`, `checkerboard`, `rings`.
pub fn builtin_density(name: &str, side: usize) -> Result<DensityGrid> {
    assert!(side >= 2, "side must be >= 2");
    let s = side as f64;
    let raw = match name {
        "gaussians" => {
            // Two isotropic modes, each carrying exactly half the mass.
            let sigma = 0.08 * s;
            let centers = [(0.3 * s, 0.3 * s), (0.7 * s, 0.7 * s)];
            let mut total = vec![0.0; side * side];
            for &(cr, cc) in &centers {
                let mut mode = vec![0.0; side * side];
                for r in 0..side {
                    for c in 0..side {
                        let dr = r as f64 + 0.5 - cr;
                        let dc = c as f64 + 0.5 - cc;
                        mode[r * side + c] = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
                    }
                }
                let z: f64 = mode.iter().sum();
                for (t, m) in total.iter_mut().zip(&mode) {
                    *t += m / (2.0 * z);
                }
            }
            total
        }
        "checkerboard" => {
            let block = (side / 8).max(1);
            let mut raw = vec![0.0; side * side];
            for r in 0..side {
                for c in 0..side {
                    if (r / block + c / block) % 2 == 0 {
                        raw[r * side + c] = 1.0;
                    }
                }
            }
            raw
        }
        "rings" => {
            // A single annulus with a truncated Gaussian radial profile; the
            // interior (including the center) is exactly zero.
            let center = (s - 1.0) / 2.0;
            let r0 = 0.30 * s;
            let width = 0.025 * s;
            let mut raw = vec![0.0; side * side];
            for r in 0..side {
                for c in 0..side {
                    let dr = r as f64 - center;
                    let dc = c as f64 - center;
                    let rad = (dr * dr + dc * dc).sqrt();
                    if (rad - r0).abs() <= 3.0 * width {
                        raw[r * side + c] =
                            (-(rad - r0) * (rad - r0) / (2.0 * width * width)).exp();
                    }
                }
            }
            raw
        }
        other => {
            return Err(PrimeError::InvalidArgument(format!(
                "unknown builtin density: {other}"
            )))
        }
    };
    DensityGrid::from_intensities(side, raw)
}

/// Draw `n` i.i.d. cells from the histogram as `(row, col)` token pairs.
pub fn sample_data(grid: &DensityGrid, n: usize, rng: &mut Rng) -> Vec<(u32, u32)> {
    let mut cdf = Vec::with_capacity(grid.probs.len());
    let mut acc = 0.0;
    for &p in &grid.probs {
        acc += p;
        cdf.push(acc);
    }
    let side = grid.side;
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            ((idx / side) as u32, (idx % side) as u32)
        })
        .collect()
}

/// Total variation distance between the empirical histogram of `samples`
/// and the density: `0.5 * sum |emp - p|`.
pub fn tv_distance(grid: &DensityGrid, samples: &[(u32, u32)]) -> f64 {
    assert!(!samples.is_empty(), "need at least one sample");
    let mut counts = vec![0usize; grid.side * grid.side];
    for &(r, c) in samples {
        counts[r as usize * grid.side + c as usize] += 1;
    }
    let n = samples.len() as f64;
    0.5 * counts
        .iter()
        .zip(&grid.probs)
        .map(|(&k, &p)| (k as f64 / n - p).abs())
        .sum::<f64>()
}

fn crop_resize_nearest(raw: &[f64], w: usize, h: usize, side: usize) -> Vec<f64> {
    let crop = w.min(h);
    let off_r = (h - crop) / 2;
    let off_c = (w - crop) / 2;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let sr = off_r + r * crop / side;
            let sc = off_c + c * crop / side;
            out[r * side + c] = raw[sr * w + sc];
        }
    }
    out
}

fn parse_csv_matrix(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| PrimeError::InvalidArgument("density file is not UTF-8 or PGM".into()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line
            .split(',')
            .map(|tok| tok.trim().parse::<f64>())
            .collect();
        rows.push(row.map_err(|e| {
            PrimeError::InvalidArgument(format!("bad CSV density value: {e}"))
        })?);
    }
    if rows.is_empty() {
        return Err(PrimeError::InvalidArgument("empty CSV density".into()));
    }
    let w = rows[0].len();
    if rows.iter().any(|r| r.len() != w) {
        return Err(PrimeError::InvalidArgument("ragged CSV density".into()));
    }
    let h = rows.len();
    Ok((w, h, rows.into_iter().flatten().collect()))
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    // Header: magic, width, height, maxval; whitespace-separated with '#'
    // comments running to end of line.
    while fields.len() < 4 && pos < bytes.len() {
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
    }
    if fields.len() < 4 {
        return Err(bad_pgm("truncated header"));
    }
    let magic = fields[0].as_str();
    let w: usize = fields[1].parse().map_err(|_| bad_pgm("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad_pgm("height"))?;
    let maxval: u32 = fields[3].parse().map_err(|_| bad_pgm("maxval"))?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad_pgm("dimensions"));
    }
    let data = match magic {
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<f64>, _> = text
                .split_whitespace()
                .take(w * h)
                .map(|t| t.parse::<f64>())
                .collect();
            let vals = vals.map_err(|_| bad_pgm("ascii sample"))?;
            if vals.len() != w * h {
                return Err(bad_pgm("ascii sample count"));
            }
            vals
        }
        "P5" => {
            pos += 1; // single whitespace after maxval
            let wide = maxval > 255;
            let needed = w * h * if wide { 2 } else { 1 };
            if bytes.len() < pos + needed {
                return Err(bad_pgm("binary payload"));
            }
            let payload = &bytes[pos..pos + needed];
            if wide {
                payload
                    .chunks_exact(2)
                    .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64)
                    .collect()
            } else {
                payload.iter().map(|&b| b as f64).collect()
            }
        }
        _ => return Err(bad_pgm("magic")),
    };
    Ok((w, h, data))
}

fn bad_pgm(what: &str) -> PrimeError {
    PrimeError::InvalidArgument(format!("malformed PGM: {what}"))
}

/// Write an 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel buffer shape mismatch");
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Render a sample histogram as intensity-scaled 8-bit pixels (max count
/// maps to 255).
pub fn histogram_pixels(side: usize, samples: &[(u32, u32)]) -> Vec<u8> {
    let mut counts = vec![0usize; side * side];
    for &(r, c) in samples {
        counts[r as usize * side + c as usize] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    counts.iter().map(|&k| ((k * 255) / max) as u8).collect()
}
