//! Additive white Gaussian noise channel parameterized by PSNR.
//!
//! Noise is derived per symbol index: symbol `i` of a transmission seeded
//! with `seed` reads words `4i..4i+4` of a ChaCha8 stream keyed by `seed` and
//! turns them into one standard normal with the Box–Muller transform (cosine
//! branch). Any chunking of the frame therefore produces the same output.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{normalize_symbols, ChannelFrame};
use crate::error::{Error, Result};

/// At or above this PSNR the channel is an exact identity.
pub const NOISELESS_PSNR_DB: f64 = 100.0;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub psnr_db: f64,
    pub power: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { psnr_db: NOISELESS_PSNR_DB, power: 1.0, seed: 0 }
    }
}

impl ChannelConfig {
    pub fn new(psnr_db: f64, power: f64, seed: u64) -> Self {
        ChannelConfig { psnr_db, power, seed }
    }

    pub fn noiseless(&self) -> bool {
        self.psnr_db >= NOISELESS_PSNR_DB
    }

    /// Noise standard deviation, zero in noiseless mode.
    pub fn sigma(&self) -> f64 {
        if self.noiseless() {
            0.0
        } else {
            psnr_to_sigma(self.psnr_db, self.power)
        }
    }
}

/// Inverse of `PSNR = 10 log10(P / sigma^2)`.
pub fn psnr_to_sigma(psnr_db: f64, power: f64) -> f64 {
    (power * 10f64.powf(-psnr_db / 10.0)).sqrt()
}

pub fn sigma_to_psnr(sigma: f64, power: f64) -> f64 {
    10.0 * (power / (sigma * sigma)).log10()
}

fn gaussian_from_words(a: u64, b: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard normal draws for indices `start..start + out.len()`.
pub fn standard_normals(seed: u64, start: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(start as u128 * 4);
    for v in out.iter_mut() {
        let a = rng.next_u64();
        let b = rng.next_u64();
        *v = gaussian_from_words(a, b);
    }
}

/// Adds `sigma`-scaled noise in place, chunk-parallel.
pub fn add_awgn(symbols: &mut [f64], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    symbols.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
        let mut noise = vec![0.0; chunk.len()];
        standard_normals(seed, (ci * CHUNK) as u64, &mut noise);
        for (s, n) in chunk.iter_mut().zip(noise) {
            *s += sigma * n;
        }
    });
}

/// Pass a normalized frame through the channel.
pub fn transmit(frame: &ChannelFrame, cfg: &ChannelConfig) -> Result<ChannelFrame> {
    if (frame.power - cfg.power).abs() > 1e-6 || (frame.mean_square() - cfg.power).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "frame power {} (measured {}) does not match channel power {}",
            frame.power,
            frame.mean_square(),
            cfg.power
        )));
    }
    let mut out = frame.clone();
    if !cfg.noiseless() {
        add_awgn(&mut out.symbols, cfg.sigma(), cfg.seed);
    }
    Ok(out)
}

/// Classical baseline before clamping: normalize the raw image to the
/// channel power, add noise, undo the scale.
pub fn transmit_image_unclamped(rgb: &[f64], cfg: &ChannelConfig) -> Result<Vec<f64>> {
    if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("image values must lie in [0, 1]".into()));
    }
    let frame = normalize_symbols(rgb, cfg.power)?;
    let noisy = transmit(&frame, cfg)?;
    Ok(noisy.symbols.iter().map(|v| v / frame.scale).collect())
}

/// Classical full-image transmission, clamped back to `[0, 1]`.
pub fn transmit_image(rgb: &[f64], cfg: &ChannelConfig) -> Result<Vec<f64>> {
    if cfg.noiseless() {
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values must lie in [0, 1]".into()));
        }
        return Ok(rgb.to_vec());
    }
    Ok(transmit_image_unclamped(rgb, cfg)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect())
}
