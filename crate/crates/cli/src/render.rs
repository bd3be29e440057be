//! Plain-text PGM grids of learned features.
//!
//! Each feature becomes one tile, channels averaged, scaled so its own
//! minimum maps to 0 and maximum to 255. Constant features and the
//! one-pixel borders between tiles are mid-gray (128).

use std::fmt::Write as _;
use std::path::Path;

use featpred::Matrix;

use crate::error::CliError;

pub const MID_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    /// Parses plain PGM (`P2`), ignoring `#` comments.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Data(format!("invalid PGM: {m}"));
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P2") {
            return Err(bad("missing P2 magic"));
        }
        let mut num = || -> Result<usize, CliError> {
            tokens
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .parse::<usize>()
                .map_err(|e| bad(&e.to_string()))
        };
        let (width, height, maxval) = (num()?, num()?, num()?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must lie in 1..=255"));
        }
        let pixels = (0..width * height)
            .map(|_| {
                let v = num()?;
                if v > maxval {
                    return Err(bad("pixel exceeds maxval"));
                }
                Ok(v as u8)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { width, height, pixels })
    }
}

/// Lays out the columns of `weights` as `shape`-sized tiles.
pub fn feature_grid(weights: &Matrix, shape: [usize; 3]) -> Result<Pgm, CliError> {
    let [th, tw, tc] = shape;
    if th * tw * tc != weights.rows() {
        return Err(CliError::Data(format!(
            "features have {} entries, tiles of {th}x{tw}x{tc} need {}",
            weights.rows(),
            th * tw * tc
        )));
    }
    let n = weights.cols();
    let gc = (n as f64).sqrt().ceil() as usize;
    let gr = n.div_ceil(gc);
    let width = gc * (tw + 1) + 1;
    let height = gr * (th + 1) + 1;
    let mut pixels = vec![MID_GRAY; width * height];
    for f in 0..n {
        let col = weights.column(f);
        let tile: Vec<f64> = (0..th * tw).map(|p| col[p * tc..(p + 1) * tc].iter().sum::<f64>() / tc as f64).collect();
        let lo = tile.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = tile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (oy, ox) = ((f / gc) * (th + 1) + 1, (f % gc) * (tw + 1) + 1);
        for y in 0..th {
            for x in 0..tw {
                let v = if hi > lo {
                    ((tile[y * tw + x] - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    MID_GRAY
                };
                pixels[(oy + y) * width + ox + x] = v;
            }
        }
    }
    Ok(Pgm { width, height, pixels })
}

pub fn render_filters(weights: &Matrix, shape: [usize; 3], out: &Path) -> Result<Pgm, CliError> {
    let pgm = feature_grid(weights, shape)?;
    std::fs::write(out, pgm.to_text()).map_err(|e| CliError::io(out, e))?;
    Ok(pgm)
}
