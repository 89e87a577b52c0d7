//! Browser bindings: blur synthesis, the exit-policy explorer and the tile planner.

use revdeblur::data::{procedural_image, quantize, synthesize_pair, BlurSpec};
use revdeblur::exit::{compute_exit_signal, d_rate, IncrementTable};
use revdeblur::infer::tile_plan;
use revdeblur::metrics::psnr;
use revdeblur::Tensor4;
use wasm_bindgen::prelude::*;

fn rgba(t: &Tensor4) -> Vec<u8> {
    let [_, _, h, w] = t.shape();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// A sharp procedural image and its blurred copy.
#[wasm_bindgen]
pub struct BlurPair {
    sharp: Tensor4,
    blur: Tensor4,
}

#[wasm_bindgen]
impl BlurPair {
    /// Uniform linear blur of `length` pixels at `angle` radians plus Gaussian noise.
    #[wasm_bindgen(constructor)]
    pub fn new(height: usize, width: usize, seed: u64, length: f64, angle: f64, noise: f64) -> Result<BlurPair, String> {
        let sharp = quantize(&procedural_image(height, width, seed));
        let spec = BlurSpec {
            length: (length, length),
            angle: (angle, angle),
            grid: (1, 1),
            noise_sigma: noise,
            ..BlurSpec::default()
        };
        let (blur, sharp) = synthesize_pair(&sharp, &spec, seed).map_err(|e| e.to_string())?;
        Ok(BlurPair { sharp, blur })
    }

    pub fn sharp_rgba(&self) -> Vec<u8> {
        rgba(&self.sharp)
    }

    pub fn blur_rgba(&self) -> Vec<u8> {
        rgba(&self.blur)
    }

    pub fn psnr(&self) -> f64 {
        psnr(&self.blur, &self.sharp).unwrap_or(f64::NAN)
    }
}

/// Exit columns for a tab-separated increment table, as `E_1,..,E_C;d_rate`.
#[wasm_bindgen]
pub fn exit_policy(table_tsv: &str, tau: f64, inclusive: bool) -> Result<String, String> {
    let table = IncrementTable::from_tsv(table_tsv, "table").map_err(|e| e.to_string())?;
    let policy = compute_exit_signal(&table, tau, inclusive);
    let exits: Vec<String> = policy.exits.iter().map(|e| e.to_string()).collect();
    Ok(format!("{};{}", exits.join(","), d_rate(&policy.exits, table.columns())))
}

/// Tile origins covering an image, as `y,x` pairs separated by spaces.
#[wasm_bindgen]
pub fn tile_origins(height: usize, width: usize, window: usize, stride: usize) -> Result<String, String> {
    let plan = tile_plan(height, width, window, stride).map_err(|e| e.to_string())?;
    let tiles: Vec<String> = plan.tiles().map(|(y, x)| format!("{y},{x}")).collect();
    Ok(tiles.join(" "))
}
