//! Image quality metrics, linear CKA and the activation-memory benchmark.

use crate::autodiff::{MemoryReport, Tape, TapeMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 100.0;

pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(s / x.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for signals in [0, 1], capped at 100 dB.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..k).map(|t| g[t] * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..k).map(|t| g[t] * rows[(r + t) * wo + c]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of every plane (Gaussian window 11, σ 1.5, data range 1).
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let [b, c, h, w] = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..b * c {
        let xs: Vec<f64> = x.data()[p * plane..(p + 1) * plane].iter().map(|v| v.f64()).collect();
        let ys: Vec<f64> = y.data()[p * plane..(p + 1) * plane].iter().map(|v| v.f64()).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&xs, h, w, &g);
        let my = filter_valid(&ys, h, w, &g);
        let sxx = filter_valid(&prod(&xs, &xs), h, w, &g);
        let syy = filter_valid(&prod(&ys, &ys), h, w, &g);
        let sxy = filter_valid(&prod(&xs, &ys), h, w, &g);
        let n = mx.len();
        let s: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += s / n as f64;
    }
    Ok(total / (b * c) as f64)
}

/// Row-major samples × features matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// One row per batch item.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let rows = t.batch();
        let cols = t.len() / rows.max(1);
        Self {
            rows,
            cols,
            data: t.data().iter().map(|v| v.f64()).collect(),
        }
    }

    /// Stack single-row matrices (or tensors flattened per sample) into one.
    pub fn stack(parts: &[FeatureMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::Invalid("feature widths differ".into()));
        }
        Ok(Self {
            rows: parts.iter().map(|p| p.rows).sum(),
            cols,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        })
    }

    fn centered_gram(&self) -> Vec<f64> {
        let (n, d) = (self.rows, self.cols);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(&self.data[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let xc: Vec<f64> = (0..n * d).map(|i| self.data[i] - mean[i % d]).collect();
        let mut k = vec![0.0; n * n];
        f64::gemm(n, d, n, 1.0, &xc, false, &xc, true, 0.0, &mut k);
        k
    }
}

/// Linear centered kernel alignment between two representations of the same samples.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::Invalid(format!("{} vs {} samples", x.rows, y.rows)));
    }
    if x.rows < 2 {
        return Err(Error::Invalid("CKA needs at least two samples".into()));
    }
    let k = x.centered_gram();
    let l = y.centered_gram();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let kk = dot(&k, &k);
    let ll = dot(&l, &l);
    if kk <= 0.0 || ll <= 0.0 {
        return Err(Error::Invalid("zero-variance features".into()));
    }
    Ok(dot(&k, &l) / (kk.sqrt() * ll.sqrt()))
}

/// One row of the memory benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRow {
    pub columns: usize,
    pub reversible: MemoryReport,
    pub full: MemoryReport,
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

/// Retained activation bytes after a full training forward (all tails and the loss)
/// in both storage modes, for each column count in `columns`.
pub fn bench_memory(base: &ModelConfig, columns: &[usize], batch: usize, patch: usize, seed: u64) -> Result<Vec<MemoryRow>> {
    let max_j = columns.iter().copied().max().unwrap_or(1);
    let cfg = ModelConfig {
        columns: max_j,
        ..base.clone()
    };
    let (net, store) = Network::new::<f32>(&cfg, seed)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let blur = Tensor::<f32>::uniform([batch, 3, patch, patch], 0.0, 1.0, &mut rng);
    let sharp = Tensor::<f32>::uniform([batch, 3, patch, patch], 0.0, 1.0, &mut rng);
    let mut rows = Vec::new();
    for &j in columns {
        let measure = |reversible: bool| -> Result<MemoryReport> {
            let mode = if reversible {
                TapeMode::reversible()
            } else {
                TapeMode::full_storage()
            };
            let mut tape = Tape::new(&store, mode);
            let fv = net.forward(&mut tape, blur.clone(), j, crate::decoder::ALPHA_MIN)?;
            let s = tape.input(sharp.clone());
            crate::train::decoder_loss(&mut tape, &fv.preds, s, 0.01)?;
            Ok(tape.memory_report())
        };
        rows.push(MemoryRow {
            columns: j,
            reversible: measure(true)?,
            full: measure(false)?,
        });
    }
    Ok(rows)
}

/// Ratio of the full-storage slope to the reversible slope of retained bytes vs columns.
pub fn memory_slope_ratio(rows: &[MemoryRow]) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| r.columns as f64).collect();
    let rev: Vec<f64> = rows.iter().map(|r| r.reversible.total() as f64).collect();
    let full: Vec<f64> = rows.iter().map(|r| r.full.total() as f64).collect();
    slope(&x, &full) / slope(&x, &rev)
}

pub fn memory_table(rows: &[MemoryRow]) -> String {
    let mut s = String::from("columns\trev_interior\trev_boundary\trev_total\tfull_total\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.columns,
            r.reversible.interior_bytes,
            r.reversible.boundary_bytes,
            r.reversible.total(),
            r.full.total()
        ));
    }
    s
}
