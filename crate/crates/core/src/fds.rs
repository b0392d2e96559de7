//! Receiver-side fast denoising of corrupted one-hot planes.
//!
//! `avg pool -> max pool -> threshold`, all stride 1 with edge-replicating
//! `same` padding, followed by re-inserting absent classes as zero planes.
//! The max stage dilates class regions by up to one kernel radius.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::kernels::{pool2d_forward, PoolGeom};
use crate::tensor::{Padding, PoolKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdsConfig {
    pub avg_kernel: usize,
    pub max_kernel: usize,
    pub threshold: f32,
    pub enabled: bool,
    /// Resolve pixels that end up with zero or several set planes. Without
    /// it the max stage leaves region borders set in two planes.
    pub enforce_partition: bool,
}

impl Default for FdsConfig {
    fn default() -> Self {
        FdsConfig { avg_kernel: 3, max_kernel: 3, threshold: 0.5, enabled: true, enforce_partition: false }
    }
}

impl FdsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("fds.avg_kernel", self.avg_kernel), ("fds.max_kernel", self.max_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and positive, got {k}")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("fds.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

fn check_header(planes: usize, hw: usize, len: usize, present: &[u16], total: usize) -> Result<()> {
    if present.len() != planes || planes * hw != len {
        return Err(Error::Input(format!(
            "header lists {} classes but received {} values for {} planes of {} pixels",
            present.len(),
            len,
            planes,
            hw
        )));
    }
    if present.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("present class ids must be strictly increasing".into()));
    }
    if let Some(&last) = present.last() {
        if last as usize >= total {
            return Err(Error::Input(format!("class id {last} out of range for {total} classes")));
        }
    }
    Ok(())
}

fn pool_planes(x: &[f32], h: usize, w: usize, k: usize, kind: PoolKind) -> Vec<f32> {
    let g = PoolGeom::new(h, w, k, 1, Padding::Same).expect("odd kernel");
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(h * w)
        .zip(x.par_chunks(h * w))
        .for_each(|(o, p)| pool2d_forward(p, 1, &g, kind, o, None));
    out
}

/// Scatter present planes into a `C_total x H x W` stack, zeros elsewhere.
pub fn pad_absent(planes: &[f32], hw: usize, present: &[u16], total: usize) -> Result<Vec<f32>> {
    check_header(present.len(), hw, planes.len(), present, total)?;
    let mut full = vec![0.0; total * hw];
    for (i, &c) in present.iter().enumerate() {
        full[c as usize * hw..(c as usize + 1) * hw].copy_from_slice(&planes[i * hw..(i + 1) * hw]);
    }
    Ok(full)
}

/// Per-element `x > threshold`.
pub fn naive_threshold(planes: &[f32], threshold: f32) -> Vec<f32> {
    planes.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect()
}

/// Denoise `C_p` received planes of `height x width` into a full binary
/// `C_total` stack. The `enabled` flag is ignored here; see [`receive`].
pub fn fds(
    noisy: &[f32],
    height: usize,
    width: usize,
    present: &[u16],
    total_classes: usize,
    cfg: &FdsConfig,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let hw = height * width;
    check_header(present.len(), hw, noisy.len(), present, total_classes)?;
    if hw == 0 {
        return Ok(vec![0.0; 0]);
    }
    let avg = pool_planes(noisy, height, width, cfg.avg_kernel, PoolKind::Avg);
    let max = pool_planes(&avg, height, width, cfg.max_kernel, PoolKind::Max);
    let binary = naive_threshold(&max, cfg.threshold);
    let binary = if cfg.enforce_partition { partition(&binary, &avg, present.len(), hw) } else { binary };
    pad_absent(&binary, hw, present, total_classes)
}

/// Receiver output: the denoised binary stack when enabled, otherwise the
/// raw received planes with absent classes padded.
pub fn receive(
    noisy: &[f32],
    height: usize,
    width: usize,
    present: &[u16],
    total_classes: usize,
    cfg: &FdsConfig,
) -> Result<Vec<f32>> {
    if cfg.enabled {
        fds(noisy, height, width, present, total_classes, cfg)
    } else {
        pad_absent(noisy, height * width, present, total_classes)
    }
}

/// Keep exactly one plane per pixel: among set planes the one with the
/// strongest smoothed response, or the strongest overall if none is set.
/// Ties go to the lower plane.
fn partition(binary: &[f32], response: &[f32], planes: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; binary.len()];
    for p in 0..hw {
        let any = (0..planes).any(|c| binary[c * hw + p] > 0.0);
        let mut best: Option<usize> = None;
        for c in 0..planes {
            if any && binary[c * hw + p] == 0.0 {
                continue;
            }
            if best.map_or(true, |b| response[c * hw + p] > response[b * hw + p]) {
                best = Some(c);
            }
        }
        if let Some(b) = best {
            out[b * hw + p] = 1.0;
        }
    }
    out
}

/// Fraction of equal entries between two stacks of the same size.
pub fn plane_agreement(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| (**x > 0.5) == (**y > 0.5)).count() as f64 / a.len() as f64
}
