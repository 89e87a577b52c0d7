//! Synthetic blur corpus: procedural sharp images, spatially-variant motion blur,
//! patch extraction, manifests and PNG input/output.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exit::Bins;
use crate::metrics::psnr;
use crate::tensor::{Tensor, Tensor4};

/// Square, normalized blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn identity() -> Self {
        Self {
            size: 1,
            data: vec![1.0],
        }
    }

    fn from_points(points: &[(f64, f64)]) -> Self {
        let extent = points
            .iter()
            .fold(0.0f64, |m, &(x, y)| m.max(x.abs()).max(y.abs()));
        let half = extent.ceil() as usize + 1;
        let size = 2 * half + 1;
        let mut data = vec![0.0; size * size];
        for &(x, y) in points {
            let (fx, fy) = (x + half as f64, y + half as f64);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (tx, ty) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    data[(y0 + dy) * size + x0 + dx] += wy * wx;
                }
            }
        }
        Self { size, data }.trimmed()
    }

    /// Drop all-zero border rings, keep odd size, renormalize.
    fn trimmed(mut self) -> Self {
        let eps = 1e-12;
        loop {
            let s = self.size;
            if s <= 1 {
                break;
            }
            let ring_empty = (0..s).all(|i| {
                self.data[i] <= eps
                    && self.data[(s - 1) * s + i] <= eps
                    && self.data[i * s] <= eps
                    && self.data[i * s + s - 1] <= eps
            });
            if !ring_empty {
                break;
            }
            let n = s - 2;
            self.data = (0..n * n)
                .map(|k| self.data[(k / n + 1) * s + k % n + 1])
                .collect();
            self.size = n;
        }
        let sum: f64 = self.data.iter().sum();
        self.data.iter_mut().for_each(|v| *v /= sum);
        self
    }

    /// Straight motion of `length` pixels at `angle` radians.
    pub fn linear(length: f64, angle: f64) -> Self {
        if length <= 1.0 {
            return Self::identity();
        }
        let steps = (length * 4.0).ceil() as usize;
        let (dx, dy) = (angle.cos(), angle.sin());
        let pts: Vec<(f64, f64)> = (0..=steps)
            .map(|k| {
                let t = (k as f64 / steps as f64 - 0.5) * (length - 1.0);
                (t * dx, t * dy)
            })
            .collect();
        Self::from_points(&pts)
    }

    /// Uniform horizontal box of `length` taps (odd lengths centre exactly).
    pub fn horizontal_box(length: usize) -> Self {
        let size = if length % 2 == 1 { length } else { length + 1 };
        let mut data = vec![0.0; size * size];
        let row = size / 2;
        let start = (size - length) / 2;
        for x in start..start + length {
            data[row * size + x] = 1.0 / length as f64;
        }
        Self { size, data }
    }

    /// Camera-shake style trajectory: a smoothed random walk of total path `length`.
    pub fn random_walk<R: Rng>(length: f64, rng: &mut R) -> Self {
        if length <= 1.0 {
            return Self::identity();
        }
        let steps = (length * 4.0).ceil() as usize;
        let step = length / steps as f64;
        let mut heading = rng.random_range(0.0..2.0 * PI);
        let mut turn = 0.0;
        let (mut x, mut y) = (0.0, 0.0);
        let mut pts = vec![(0.0, 0.0)];
        for _ in 0..steps {
            turn = 0.8 * turn + rng.random_range(-0.35..0.35);
            heading += turn;
            x += step * heading.cos();
            y += step * heading.sin();
            pts.push((x, y));
        }
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
        let n = pts.len() as f64;
        let centred: Vec<_> = pts.iter().map(|&(x, y)| (x - mx / n, y - my / n)).collect();
        Self::from_points(&centred)
    }
}

/// Same-size correlation of every plane with `k`; borders replicate the edge pixel.
pub fn convolve(img: &Tensor4, k: &Kernel) -> Result<Tensor4> {
    let [b, c, h, w] = img.shape();
    if k.size > h || k.size > w {
        return Err(Error::Invalid(format!(
            "kernel {}x{} larger than image {h}x{w}",
            k.size, k.size
        )));
    }
    let r = (k.size / 2) as isize;
    let mut out = Tensor::zeros(img.shape());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let taps: Vec<(isize, isize, f64)> = (0..k.size * k.size)
        .filter(|&i| k.data[i] != 0.0)
        .map(|i| ((i / k.size) as isize - r, (i % k.size) as isize - r, k.data[i]))
        .collect();
    for p in 0..b * c {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, wt) in &taps {
                    let sy = clampi(y as isize + dy, h);
                    let sx = clampi(x as isize + dx, w);
                    acc += wt * src[sy * w + sx] as f64;
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    Linear,
    RandomWalk,
}

/// Blur model for one image: a grid of kernels blended bilinearly across the image.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurSpec {
    pub family: KernelFamily,
    /// Kernel path length range in pixels.
    pub length: (f64, f64),
    /// Motion angle range in radians (linear family).
    pub angle: (f64, f64),
    /// Kernel grid (rows, columns).
    pub grid: (usize, usize),
    pub noise_sigma: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Linear,
            length: (1.0, 13.0),
            angle: (0.0, PI),
            grid: (2, 2),
            noise_sigma: 0.003,
        }
    }
}

/// Blur `sharp` with spatially-variant kernels. Deterministic per `seed`.
pub fn synthesize_pair(sharp: &Tensor4, spec: &BlurSpec, seed: u64) -> Result<(Tensor4, Tensor4)> {
    let [_, _, h, w] = sharp.shape();
    let (gy, gx) = spec.grid;
    if gy == 0 || gx == 0 || spec.length.0 < 1.0 || spec.length.1 < spec.length.0 {
        return Err(Error::Invalid("bad blur spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blurred = Vec::with_capacity(gy * gx);
    for _ in 0..gy * gx {
        let len = if spec.length.1 > spec.length.0 {
            rng.random_range(spec.length.0..=spec.length.1)
        } else {
            spec.length.0
        };
        let k = match spec.family {
            KernelFamily::Linear => {
                let a = if spec.angle.1 > spec.angle.0 {
                    rng.random_range(spec.angle.0..spec.angle.1)
                } else {
                    spec.angle.0
                };
                Kernel::linear(len, a)
            }
            KernelFamily::RandomWalk => Kernel::random_walk(len, &mut rng),
        };
        blurred.push(convolve(sharp, &k)?);
    }
    let coord = |i: usize, n: usize, g: usize| -> (usize, usize, f64) {
        if g == 1 {
            return (0, 0, 0.0);
        }
        let t = (i as f64 + 0.5) / n as f64 * (g - 1) as f64;
        let t = t.clamp(0.0, (g - 1) as f64);
        let i0 = (t.floor() as usize).min(g - 2);
        (i0, i0 + 1, t - i0 as f64)
    };
    let mut out = Tensor::zeros(sharp.shape());
    let [b, c, _, _] = sharp.shape();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    for p in 0..b * c {
        for y in 0..h {
            let (y0, y1, ty) = coord(y, h, gy);
            for x in 0..w {
                let (x0, x1, tx) = coord(x, w, gx);
                let at = |gyi: usize, gxi: usize| blurred[gyi * gx + gxi].data()[(p * h + y) * w + x] as f64;
                let mut v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                    + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                out.data_mut()[(p * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((out, sharp.clone()))
}

/// Procedural sharp image: gradient background, filled shapes, stripes and strokes.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros([1, 3, h, w]);
    let color = |rng: &mut ChaCha8Rng| -> [f32; 3] { [rng.random(), rng.random(), rng.random()] };
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let ga = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (ga.cos(), ga.sin());
    let set = |img: &mut Tensor4, y: usize, x: usize, col: [f32; 3], a: f32| {
        for (ch, &v) in col.iter().enumerate() {
            let old = img.at(0, ch, y, x);
            img.set(0, ch, y, x, old * (1.0 - a) + v * a);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 / w as f64 - 0.5) * gx + (y as f64 / h as f64 - 0.5) * gy + 0.5).clamp(0.0, 1.0) as f32;
            let col = [0, 1, 2].map(|k| c0[k] * (1.0 - t) + c1[k] * t);
            set(&mut img, y, x, col, 1.0);
        }
    }
    let scale = (h.min(w) as f64).max(8.0);
    let shapes = rng.random_range(12..28);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        match rng.random_range(0..4) {
            0 => {
                let r = rng.random_range(0.05..0.25) * scale;
                for y in 0..h {
                    for x in 0..w {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d < r {
                            set(&mut img, y, x, col, 1.0);
                        }
                    }
                }
            }
            1 => {
                let hw = rng.random_range(0.05..0.3) * scale;
                let hh = rng.random_range(0.05..0.3) * scale;
                let rot = rng.random_range(0.0..PI);
                let (cr, sr) = (rot.cos(), rot.sin());
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        let (u, v) = (dx * cr + dy * sr, -dx * sr + dy * cr);
                        if u.abs() < hw && v.abs() < hh {
                            set(&mut img, y, x, col, 1.0);
                        }
                    }
                }
            }
            2 => {
                let period = rng.random_range(3.0..10.0);
                let rot = rng.random_range(0.0..PI);
                let r = rng.random_range(0.1..0.3) * scale;
                let (cr, sr) = (rot.cos(), rot.sin());
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx.abs() < r && dy.abs() < r && ((dx * cr + dy * sr) / period).rem_euclid(1.0) < 0.5 {
                            set(&mut img, y, x, col, 1.0);
                        }
                    }
                }
            }
            _ => {
                let (mut px, mut py) = (cx, cy);
                let mut heading = rng.random_range(0.0..2.0 * PI);
                let width: f64 = rng.random_range(0.8..2.5);
                for _ in 0..rng.random_range(20..80) {
                    heading += rng.random_range(-0.5..0.5);
                    px += heading.cos();
                    py += heading.sin();
                    let r = width.ceil() as isize;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (x, y) = (px as isize + dx, py as isize + dy);
                            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && ((dx * dx + dy * dy) as f64) <= width * width {
                                set(&mut img, y as usize, x as usize, col, 1.0);
                            }
                        }
                    }
                }
            }
        }
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.random_range(0.0..PI);
            let k = 2.0 * PI / rng.random_range(3.0..12.0);
            (a.cos() * k, a.sin() * k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.06))
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin()).sum();
            for ch in 0..3 {
                let v = img.at(0, ch, y, x) + t as f32;
                img.set(0, ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Window origins along one axis: multiples of `stride` while the window fits,
/// plus a final window snapped to the far edge.
pub fn axis_positions(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let stride = stride.max(1);
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p + window < len).collect();
    let last = len - window;
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// 8-bit round trip, matching what a saved and reloaded PNG holds.
pub fn quantize(t: &Tensor4) -> Tensor4 {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn load_png(path: &Path) -> Result<Tensor4> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(t)
}

pub fn save_png(t: &Tensor4, path: &Path) -> Result<()> {
    let [b, c, h, w] = t.shape();
    if b != 1 || c != 3 {
        return Err(Error::shape("save_png", format!("{:?} is not one RGB image", t.shape())));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = (t.at(0, ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// One patch of a corpus image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub blur: String,
    pub sharp: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub psnr: f64,
    pub class: usize,
}

pub fn extract_patches(
    blur: &Tensor4,
    sharp: &Tensor4,
    size: usize,
    stride: usize,
    bins: &Bins,
    blur_name: &str,
    sharp_name: &str,
) -> Result<Vec<PatchRecord>> {
    let [_, _, h, w] = blur.shape();
    if size > h || size > w {
        return Err(Error::Invalid(format!("patch {size} larger than image {h}x{w}")));
    }
    let mut out = Vec::new();
    for y in axis_positions(h, size, stride) {
        for x in axis_positions(w, size, stride) {
            let p = psnr(&blur.crop(y, x, size, size)?, &sharp.crop(y, x, size, size)?)?;
            out.push(PatchRecord {
                blur: blur_name.into(),
                sharp: sharp_name.into(),
                x,
                y,
                size,
                psnr: p,
                class: bins.class_of(p),
            });
        }
    }
    Ok(out)
}

pub const MANIFEST_HEADER: &str = "blur\tsharp\tx\ty\tsize\tpsnr\tclass";

pub fn manifest_to_tsv(records: &[PatchRecord]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in records {
        writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.blur, r.sharp, r.x, r.y, r.size, r.psnr, r.class).unwrap();
    }
    s
}

pub fn manifest_from_tsv(text: &str, origin: &str) -> Result<Vec<PatchRecord>> {
    let perr = |line: usize, msg: &str| Error::Parse {
        path: origin.into(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
        _ => return Err(perr(1, "missing manifest header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(perr(i + 1, "expected 7 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| perr(i + 1, "bad integer"));
        out.push(PatchRecord {
            blur: f[0].into(),
            sharp: f[1].into(),
            x: num(f[2])?,
            y: num(f[3])?,
            size: num(f[4])?,
            psnr: f[5].parse().map_err(|_| perr(i + 1, "bad psnr"))?,
            class: num(f[6])?,
        });
    }
    Ok(out)
}

/// Corpus generation settings.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub spec: BlurSpec,
    pub bins: Bins,
    pub seed: u64,
    /// Per-image upper blur length is drawn from `[length.0, length.1]` so the
    /// corpus spans mild to severe blur.
    pub vary_severity: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 24,
            height: 128,
            width: 128,
            patch: 64,
            stride: 64,
            spec: BlurSpec::default(),
            bins: Bins::standard(),
            seed: 0,
            vary_severity: true,
        }
    }
}

fn image_seed(seed: u64, i: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((i as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9)) ^ salt
}

/// Write `dir/{blur,sharp}/NNNN.png` and `dir/manifest.tsv`.
pub fn generate_corpus(dir: &Path, cfg: &GenConfig) -> Result<Vec<PatchRecord>> {
    for sub in ["blur", "sharp"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::new();
    for i in 0..cfg.count {
        let sharp = quantize(&procedural_image(cfg.height, cfg.width, image_seed(cfg.seed, i, 1)));
        let mut spec = cfg.spec.clone();
        if cfg.vary_severity {
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, i, 2));
            let (lo, hi) = spec.length;
            if hi > lo {
                spec.length.1 = rng.random_range(lo..=hi);
            }
        }
        let (blur, _) = synthesize_pair(&sharp, &spec, image_seed(cfg.seed, i, 3))?;
        let blur = quantize(&blur);
        let name = format!("{i:04}.png");
        let (bn, sn) = (format!("blur/{name}"), format!("sharp/{name}"));
        save_png(&blur, &dir.join(&bn))?;
        save_png(&sharp, &dir.join(&sn))?;
        records.extend(extract_patches(&blur, &sharp, cfg.patch, cfg.stride, &cfg.bins, &bn, &sn)?);
    }
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest_to_tsv(&records)).map_err(|e| Error::io(&mpath, e))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<PatchRecord>> {
    let p = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    manifest_from_tsv(&text, &p.display().to_string())
}

/// In-memory patches, each (1, 3, s, s).
#[derive(Clone, Debug, Default)]
pub struct PatchSet {
    pub blur: Vec<Tensor4>,
    pub sharp: Vec<Tensor4>,
    /// 1-based degradation classes.
    pub classes: Vec<usize>,
    pub psnr: Vec<f64>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.blur.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blur.is_empty()
    }

    /// Load every manifest patch of the corpus in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_manifest(dir)?;
        let mut set = PatchSet::default();
        let mut cache: Option<(String, Tensor4, Tensor4)> = None;
        for r in &records {
            if cache.as_ref().map(|c| &c.0) != Some(&r.blur) {
                let b = load_png(&dir.join(&r.blur))?;
                let s = load_png(&dir.join(&r.sharp))?;
                cache = Some((r.blur.clone(), b, s));
            }
            let (_, b, s) = cache.as_ref().unwrap();
            set.blur.push(b.crop(r.y, r.x, r.size, r.size)?);
            set.sharp.push(s.crop(r.y, r.x, r.size, r.size)?);
            set.classes.push(r.class);
            set.psnr.push(r.psnr);
        }
        Ok(set)
    }

    /// Stack the given patches; with an RNG each pair gets a random horizontal/vertical flip.
    pub fn batch(&self, idx: &[usize], mut flips: Option<&mut ChaCha8Rng>) -> Result<(Tensor4, Tensor4)> {
        let mut b = Vec::with_capacity(idx.len());
        let mut s = Vec::with_capacity(idx.len());
        for &i in idx {
            let (mut bi, mut si) = (self.blur[i].clone(), self.sharp[i].clone());
            if let Some(rng) = flips.as_deref_mut() {
                let (fh, fv): (bool, bool) = (rng.random(), rng.random());
                if fh || fv {
                    bi = bi.flip(fh, fv);
                    si = si.flip(fh, fv);
                }
            }
            b.push(bi);
            s.push(si);
        }
        Ok((Tensor::stack(&b)?, Tensor::stack(&s)?))
    }
}

/// Paths of all PNG files in `dir`, sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}
