//! Linear noise schedule, forward corruption, the training objective and
//! guided ancestral sampling with learned variances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Context, Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::unet::{Binding, UNet};

/// Default KL weight.
pub const LAMBDA_KL: f64 = 0.001;

/// Precomputed schedule quantities. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    alphas_cumprod_prev: Vec<f64>,
    posterior_variance: Vec<f64>,
    posterior_log_variance: Vec<f64>,
    posterior_coef_x0: Vec<f64>,
    posterior_coef_xt: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion.T must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < diffusion.beta_start <= diffusion.beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let n = betas.len();
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        let alphas_cumprod_prev: Vec<f64> = std::iter::once(1.0).chain(alphas_cumprod[..n - 1].iter().copied()).collect();
        let mut posterior_variance = Vec::with_capacity(n);
        let mut posterior_coef_x0 = Vec::with_capacity(n);
        let mut posterior_coef_xt = Vec::with_capacity(n);
        for i in 0..n {
            let (b, a, ap) = (betas[i], alphas_cumprod[i], alphas_cumprod_prev[i]);
            posterior_variance.push(b * (1.0 - ap) / (1.0 - a));
            posterior_coef_x0.push(b * ap.sqrt() / (1.0 - a));
            posterior_coef_xt.push((1.0 - ap) * (1.0 - b).sqrt() / (1.0 - a));
        }
        // the posterior variance at t = 1 is zero; its log takes the t = 2 value
        let posterior_log_variance = (0..n)
            .map(|i| {
                let v = if i == 0 && n > 1 { posterior_variance[1] } else { posterior_variance[i] };
                if v > 0.0 {
                    v.ln()
                } else {
                    betas[i].ln()
                }
            })
            .collect();
        NoiseSchedule {
            betas,
            alphas_cumprod,
            alphas_cumprod_prev,
            posterior_variance,
            posterior_log_variance,
            posterior_coef_x0,
            posterior_coef_xt,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Input(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    /// Bounds of the learned log variance: `(log posterior variance, log beta)`.
    pub fn log_variance_bounds(&self, t: usize) -> (f64, f64) {
        (self.posterior_log_variance[t - 1], self.betas[t - 1].ln())
    }

    /// Posterior `q(x_{t-1} | x_t, x_0)` mean coefficients for `x_0` and `x_t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        (self.posterior_coef_x0[t - 1], self.posterior_coef_xt[t - 1])
    }

    /// Keep `count` evenly spaced steps. Returns the shortened schedule and
    /// the original timestep of each of its steps.
    pub fn respace(&self, count: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let n = self.steps();
        if count == 0 || count > n {
            return Err(Error::Config(format!("sample.steps must lie in [1, {n}], got {count}")));
        }
        let kept: Vec<usize> = if count == 1 {
            vec![n]
        } else {
            (0..count).map(|i| 1 + ((n - 1) as f64 * i as f64 / (count - 1) as f64).round() as usize).collect()
        };
        let mut betas = Vec::with_capacity(count);
        let mut prev = 1.0;
        for &t in &kept {
            let a = self.alpha_bar(t);
            betas.push(1.0 - a / prev);
            prev = a;
        }
        Ok((NoiseSchedule::from_betas(betas), kept))
    }
}

/// `beta_end` for which a linear schedule of `steps` steps starting at
/// `beta_start` ends at cumulative product `target`.
pub fn solve_beta_end(steps: usize, beta_start: f64, target: f64) -> f64 {
    let end_bar = |end: f64| {
        (0..steps)
            .map(|i| 1.0 - (beta_start + (end - beta_start) * i as f64 / (steps - 1) as f64))
            .product::<f64>()
    };
    let (mut lo, mut hi) = (beta_start, 0.999);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if end_bar(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` for one sample.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let i = sched.idx(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Input(format!("x0 has {} values but eps has {}", x0.len(), eps.len())));
    }
    let a = sched.alphas_cumprod[i];
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect())
}

/// Batched `q_sample` with one timestep per sample.
pub fn q_sample_batch<E: Element>(x0: &Tensor<E>, t: &[usize], eps: &Tensor<E>, sched: &NoiseSchedule) -> Result<Tensor<E>> {
    let n = x0.shape()[0];
    if t.len() != n || x0.shape() != eps.shape() {
        return Err(Error::Input("q_sample batch shapes disagree".into()));
    }
    let per = x0.numel() / n;
    let mut out = Vec::with_capacity(x0.numel());
    for (s, &ts) in t.iter().enumerate() {
        let i = sched.idx(ts)?;
        let a = sched.alphas_cumprod[i];
        let (sa, sb) = (E::lit(a.sqrt()), E::lit((1.0 - a).sqrt()));
        let r = s * per..(s + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| sa * x + sb * e));
    }
    Ok(Tensor::new(x0.shape(), out)?)
}

/// Per-element `KL(N(mu_p, e^lp) || N(mu_q, e^lq))`.
pub fn gaussian_kl(mu_p: f64, logvar_p: f64, mu_q: f64, logvar_q: f64) -> f64 {
    0.5 * (logvar_q - logvar_p + (logvar_p.exp() + (mu_p - mu_q).powi(2)) / logvar_q.exp() - 1.0)
}

/// Map the raw variance output to the interpolation weight in `[0, 1]`.
pub fn variance_weight(raw: f64) -> f64 {
    0.5 * (raw.tanh() + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_kl: f64,
    /// Mean squared error when true, otherwise the mean per-sample l2 norm.
    pub squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_kl: LAMBDA_KL, squared: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub denoise: f64,
    pub kl: f64,
    pub total: f64,
}

/// Denoising loss plus weighted KL for one batch. The KL sees the predicted
/// mean as a constant, so it only trains the variance head.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<E: Element>(
    model: &UNet,
    g: &mut Graph<E>,
    p: &Binding,
    x0: &Tensor<E>,
    y: &Tensor<E>,
    t: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let xt = q_sample_batch(x0, t, eps, sched)?;
    let xv = g.constant(xt.clone());
    let (eps_pred, var_raw) = model.forward(g, p, xv, y, t)?;
    let ctx = || "loss".to_string();
    let target = g.constant(eps.clone());
    let diff = g.sub(eps_pred, target).ctx(ctx)?;
    let sq = g.mul(diff, diff).ctx(ctx)?;
    let l_d = if cfg.squared {
        g.mean(sq).ctx(ctx)?
    } else {
        let per = g.sum_per_sample(sq).ctx(ctx)?;
        let norms = g.sqrt(per).ctx(ctx)?;
        g.mean(norms).ctx(ctx)?
    };

    let (n, c, h, w) = x0.dims4()?;
    let per = c * h * w;
    let mut half_range = Vec::with_capacity(n * c);
    let mut mid = Vec::with_capacity(n * c);
    let mut inv_var_q = Vec::with_capacity(n * c);
    let mut constant = Vec::with_capacity(n * per);
    let ep = g.value(eps_pred).data();
    for (s, &ts) in t.iter().enumerate() {
        let (lo, hi) = sched.log_variance_bounds(ts);
        let (c0, c1) = sched.posterior_coefs(ts);
        let a = sched.alpha_bar(ts);
        half_range.extend(std::iter::repeat(E::lit(0.5 * (hi - lo))).take(c));
        mid.extend(std::iter::repeat(E::lit(0.5 * (hi + lo))).take(c));
        inv_var_q.extend(std::iter::repeat(E::lit((-lo).exp())).take(c));
        for j in s * per..(s + 1) * per {
            let (x0j, xtj) = (x0.data()[j].as_f64(), xt.data()[j].as_f64());
            let x0_pred = (xtj - (1.0 - a).sqrt() * ep[j].as_f64()) / a.sqrt();
            let mu_p = c0 * x0_pred + c1 * xtj;
            let mu_q = c0 * x0j + c1 * xtj;
            constant.push(E::lit((mu_p - mu_q).powi(2) * (-lo).exp() + lo - 1.0));
        }
    }
    let kl = (|| {
        let r = g.tanh(var_raw)?;
        let hr = g.constant(Tensor::new(&[n, c], half_range)?);
        let md = g.constant(Tensor::new(&[n, c], mid)?);
        let logvar_p = g.modulate(r, hr, md)?;
        let var_p = g.exp(logvar_p)?;
        let ivq = g.constant(Tensor::new(&[n, c], inv_var_q)?);
        let zero = g.constant(Tensor::zeros(&[n, c]));
        let ratio = g.modulate(var_p, ivq, zero)?;
        let k = g.constant(Tensor::new(&[n, c, h, w], constant)?);
        let sum = g.add(ratio, k)?;
        let sum = g.sub(sum, logvar_p)?;
        let m = g.mean(sum)?;
        g.scale(m, E::lit(0.5))
    })()
    .ctx(ctx)?;
    let weighted = g.scale(kl, E::lit(cfg.lambda_kl)).ctx(ctx)?;
    let total = g.add(l_d, weighted).ctx(ctx)?;
    let parts = LossParts {
        denoise: g.value(l_d).data()[0].as_f64(),
        kl: g.value(kl).data()[0].as_f64(),
        total: g.value(total).data()[0].as_f64(),
    };
    Ok((total, parts))
}

/// `eps_c + s (eps_c - eps_u)`.
pub fn combine_guidance(cond: &[f32], uncond: &[f32], s: f64) -> Vec<f32> {
    let s = s as f32;
    cond.iter().zip(uncond).map(|(&c, &u)| c + s * (c - u)).collect()
}

/// Guided noise estimate and the conditional variance output. The null
/// label is the all-zero stack. With `s == 0` the unconditional pass is
/// skipped and the conditional estimate is returned unchanged.
pub fn guided_eps(model: &UNet, xt: &Tensor<f32>, y: &Tensor<f32>, t: &[usize], s: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !(s >= 0.0) {
        return Err(Error::Config(format!("sample.guidance_scale must be >= 0, got {s}")));
    }
    if s == 0.0 {
        return model.predict(xt, y, t);
    }
    let n = xt.shape()[0];
    let null = Tensor::zeros(y.shape());
    let xx = Tensor::cat_batch(&[xt, xt])?;
    let yy = Tensor::cat_batch(&[y, &null])?;
    let tt: Vec<usize> = t.iter().chain(t).copied().collect();
    let (e, v) = model.predict(&xx, &yy, &tt)?;
    let ec = e.batch_slice(0, n)?;
    let eu = e.batch_slice(n, n)?;
    let guided = Tensor::new(xt.shape(), combine_guidance(ec.data(), eu.data(), s))?;
    Ok((guided, v.batch_slice(0, n)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub seed: u64,
    /// Number of denoising steps; 0 means the full schedule.
    pub steps: usize,
    /// Clamp the implied clean image to `[-1, 1]` at every step.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { guidance_scale: 2.0, seed: 0, steps: 0, clip_denoised: true }
    }
}

/// One reverse step's mean and log variance, all in `f64`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_moments(
    sched: &NoiseSchedule,
    t: usize,
    xt: f64,
    eps: f64,
    var_raw: f64,
    clip: bool,
) -> (f64, f64) {
    let a = sched.alpha_bar(t);
    let mut x0 = (xt - (1.0 - a).sqrt() * eps) / a.sqrt();
    if clip {
        x0 = x0.clamp(-1.0, 1.0);
    }
    let (c0, c1) = sched.posterior_coefs(t);
    let (lo, hi) = sched.log_variance_bounds(t);
    let v = variance_weight(var_raw);
    (c0 * x0 + c1 * xt, v * hi + (1.0 - v) * lo)
}

/// Ancestral sampling from pure noise for a batch of conditioning stacks
/// `[n, C_total, H, W]`. Deterministic given `cfg.seed`.
pub fn p_sample_loop(model: &UNet, y: &Tensor<f32>, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Tensor<f32>> {
    let mc = model.config();
    let n = y.shape()[0];
    let shape = [n, mc.in_channels, mc.image_size, mc.image_size];
    let steps = if cfg.steps == 0 { sched.steps() } else { cfg.steps };
    let (sub, map) = if steps == sched.steps() {
        (sched.clone(), (1..=steps).collect::<Vec<_>>())
    } else {
        sched.respace(steps)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let numel: usize = shape.iter().product();
    let mut x: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect();
    for i in (1..=steps).rev() {
        let t_model = map[i - 1];
        let xt = Tensor::new(&shape, x.iter().map(|&v| v as f32).collect())?;
        let tt = vec![t_model; n];
        let (eps, var) = guided_eps(model, &xt, y, &tt, cfg.guidance_scale)?;
        let mut next = Vec::with_capacity(numel);
        for j in 0..numel {
            let (mean, logvar) =
                reverse_step_moments(&sub, i, x[j], eps.data()[j] as f64, var.data()[j] as f64, cfg.clip_denoised);
            let z: f64 = if i > 1 { StandardNormal.sample(&mut rng) } else { 0.0 };
            next.push(mean + (0.5 * logvar).exp() * z);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: format!("sampling step {i} (timestep {t_model})"),
                source: crate::tensor::TensorError::NonFinite { op: "p_sample" },
            });
        }
        x = next;
    }
    Ok(Tensor::new(&shape, x.into_iter().map(|v| v as f32).collect())?)
}
