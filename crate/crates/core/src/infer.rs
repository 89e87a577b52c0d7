//! Whole-image restoration by overlapping tiles, with fixed or adaptive exits.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::axis_positions;
use crate::error::{Error, Result};
use crate::model::{ExitMode, Network};
use crate::params::ParamStore;
use crate::tensor::{Tensor, Tensor4};

/// Tile origin and the exit column it used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileExit {
    pub x: usize,
    pub y: usize,
    pub exit: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub ys: Vec<usize>,
    pub xs: Vec<usize>,
}

impl TilePlan {
    pub fn tiles(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys.iter().flat_map(move |&y| self.xs.iter().map(move |&x| (y, x)))
    }

    pub fn len(&self) -> usize {
        self.ys.len() * self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every pixel is covered by at least one tile.
    pub fn covers(&self) -> bool {
        let axis = |pos: &[usize], n: usize| {
            let mut reach = 0;
            for &p in pos {
                if p > reach {
                    return false;
                }
                reach = reach.max(p + self.window.min(n));
            }
            reach >= n
        };
        axis(&self.ys, self.height) && axis(&self.xs, self.width)
    }
}

/// Tiles of side `min(window, dim)` at the given stride on an `h × w` canvas.
pub fn tile_plan(h: usize, w: usize, window: usize, stride: usize) -> Result<TilePlan> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Invalid(format!("window {window} stride {stride}")));
    }
    let window = window.min(h).min(w);
    let stride = stride.min(window);
    Ok(TilePlan {
        window,
        height: h,
        width: w,
        ys: axis_positions(h, window, stride),
        xs: axis_positions(w, window, stride),
    })
}

/// Separable blending weight: linear ramps of width `overlap` at each tile edge, floor 1e-3.
pub fn blend_weights(window: usize, overlap: usize) -> Vec<f64> {
    let ramp = |i: usize| -> f64 {
        if overlap == 0 {
            return 1.0;
        }
        let d = i.min(window - 1 - i) as f64 + 0.5;
        (d / overlap as f64).clamp(1e-3, 1.0)
    };
    let r: Vec<f64> = (0..window).map(ramp).collect();
    (0..window * window).map(|k| r[k / window] * r[k % window]).collect()
}

#[derive(Clone, Debug)]
pub struct InferOptions {
    pub window: usize,
    pub stride: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            window: 384,
            stride: 352,
        }
    }
}

pub struct Restored {
    pub image: Tensor4,
    pub exits: Vec<TileExit>,
}

impl Restored {
    /// Mean exit column over tiles.
    pub fn mean_exit(&self) -> f64 {
        self.exits.iter().map(|e| e.exit as f64).sum::<f64>() / self.exits.len().max(1) as f64
    }
}

/// Restore a (1, 3, H, W) image. The canvas is reflect-padded to the network's size multiple,
/// tiles are restored independently and their residuals are blended.
pub fn deblur_image(
    net: &Network,
    store: &ParamStore<f32>,
    blur: &Tensor4,
    mode: &ExitMode<'_>,
    opts: &InferOptions,
) -> Result<Restored> {
    let [b, c, h, w] = blur.shape();
    if b != 1 || c != 3 {
        return Err(Error::shape("deblur_image", format!("{:?} is not one RGB image", blur.shape())));
    }
    let m = net.cfg.size_multiple();
    if h < m || w < m {
        return Err(Error::Invalid(format!("image {h}x{w} smaller than {m} px")));
    }
    let round = |v: usize| v.div_ceil(m) * m;
    let (ph, pw) = (round(h), round(w));
    let canvas = if (ph, pw) == (h, w) {
        blur.clone()
    } else {
        blur.reflect_pad_to(ph, pw)?
    };
    let window = (opts.window.max(m) / m * m).min(ph).min(pw);
    let stride = (opts.stride - opts.stride % m).clamp(m, window);
    let plan = tile_plan(ph, pw, window, stride)?;
    let win = plan.window;
    let overlap = win - stride.min(win);
    let weights = blend_weights(win, overlap);
    let plane = ph * pw;
    let mut acc = vec![0.0f64; 3 * plane];
    let mut wsum = vec![0.0f64; plane];
    let mut exits = Vec::with_capacity(plan.len());
    for (y, x) in plan.tiles() {
        let tile = canvas.crop(y, x, win, win)?;
        let (out, exit) = net.restore(store, &tile, mode)?;
        exits.push(TileExit { x, y, exit });
        for r in 0..win {
            for col in 0..win {
                let wt = weights[r * win + col];
                let p = (y + r) * pw + x + col;
                wsum[p] += wt;
                for ch in 0..3 {
                    let res = out.at(0, ch, r, col) as f64 - tile.at(0, ch, r, col) as f64;
                    acc[ch * plane + p] += wt * res;
                }
            }
        }
    }
    let mut full = Tensor::zeros([1, 3, ph, pw]);
    for ch in 0..3 {
        for p in 0..plane {
            let v = canvas.data()[ch * plane + p] as f64 + acc[ch * plane + p] / wsum[p];
            full.data_mut()[ch * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let image = if (ph, pw) == (h, w) { full } else { full.crop(0, 0, h, w)? };
    Ok(Restored { image, exits })
}

pub const EXIT_MAP_HEADER: &str = "x\ty\tE";

pub fn exit_map_to_tsv(exits: &[TileExit]) -> String {
    let mut s = format!("{EXIT_MAP_HEADER}\n");
    for e in exits {
        writeln!(s, "{}\t{}\t{}", e.x, e.y, e.exit).unwrap();
    }
    s
}

pub fn exit_map_from_tsv(text: &str, origin: &str) -> Result<Vec<TileExit>> {
    let perr = |line: usize, msg: &str| Error::Parse {
        path: origin.into(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == EXIT_MAP_HEADER => {}
        _ => return Err(perr(1, "missing exit map header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<usize> = line
            .split('\t')
            .map(|v| v.trim().parse().map_err(|_| perr(i + 1, "bad integer")))
            .collect::<Result<_>>()?;
        if f.len() != 3 {
            return Err(perr(i + 1, "expected 3 fields"));
        }
        out.push(TileExit {
            x: f[0],
            y: f[1],
            exit: f[2],
        });
    }
    Ok(out)
}

pub fn write_exit_map(exits: &[TileExit], path: &Path) -> Result<()> {
    std::fs::write(path, exit_map_to_tsv(exits)).map_err(|e| Error::io(path, e))
}
