//! Conditional U-Net predicting noise and variance coefficients.
//!
//! Encoder blocks see only the image and the timestep; the semantic stack
//! enters the decoder through spatially adaptive normalization. Attention
//! uses cosine similarity between query and key projections.

mod checkpoint;
mod params;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use params::{Binding, ParamStore};

use crate::error::{Context, Error, Result};
use crate::tensor::{Element, Graph, Padding, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
/// Epsilon added to projection norms in the attention similarity.
pub const COSINE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Number of semantic classes in the conditioning stack.
    pub cond_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub head_channels: usize,
    pub groups: usize,
    pub spade_hidden: usize,
    pub attention_scale: f32,
    pub learn_attention_scale: bool,
    /// Largest timestep accepted by the time embedding.
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 3,
            cond_channels: 6,
            base_channels: 64,
            channel_mult: vec![1, 2, 2],
            num_res_blocks: 2,
            attention_resolutions: vec![16, 8],
            head_channels: 32,
            groups: 8,
            spade_hidden: 32,
            attention_scale: 1.0,
            learn_attention_scale: false,
            timesteps: 200,
        }
    }
}

impl ModelConfig {
    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial size of each level.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_mult.len()).map(|l| self.image_size >> l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return bad(format!("model.image_size must be a power of two >= 8, got {}", self.image_size));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("model.channel_mult must be non-empty and positive".into());
        }
        if self.image_size >> (self.channel_mult.len() - 1) < 2 {
            return bad("too many levels for the image size".into());
        }
        if self.in_channels == 0 || self.cond_channels == 0 || self.base_channels == 0 || self.spade_hidden == 0 {
            return bad("model channel counts must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad("model.base_channels must be even".into());
        }
        let res = self.resolutions();
        for r in &self.attention_resolutions {
            let Some(l) = res.iter().position(|x| x == r) else {
                return bad(format!("attention resolution {r} is not one of the levels {res:?}"));
            };
            let ch = self.base_channels * self.channel_mult[l];
            if self.head_channels == 0 || ch % self.head_channels != 0 {
                return bad(format!("model.head_channels {} must divide width {ch}", self.head_channels));
            }
        }
        let bottom = self.base_channels * self.channel_mult[self.channel_mult.len() - 1];
        if self.head_channels == 0 || bottom % self.head_channels != 0 {
            return bad(format!("model.head_channels {} must divide width {bottom}", self.head_channels));
        }
        for m in &self.channel_mult {
            let ch = self.base_channels * m;
            if self.groups == 0 || ch % self.groups != 0 {
                return bad(format!("model.groups {} must divide width {ch}", self.groups));
            }
        }
        if !self.attention_scale.is_finite() {
            return bad("model.attention_scale must be finite".into());
        }
        Ok(())
    }

    /// Canonical text form, used for the checkpoint hash.
    pub fn describe(&self) -> String {
        format!(
            "image_size={};in_channels={};cond_channels={};base_channels={};channel_mult={:?};\
             num_res_blocks={};attention_resolutions={:?};head_channels={};groups={};spade_hidden={};\
             attention_scale={};learn_attention_scale={};timesteps={}",
            self.image_size,
            self.in_channels,
            self.cond_channels,
            self.base_channels,
            self.channel_mult,
            self.num_res_blocks,
            self.attention_resolutions,
            self.head_channels,
            self.groups,
            self.spade_hidden,
            self.attention_scale,
            self.learn_attention_scale,
            self.timesteps
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn attends(&self, res: usize) -> bool {
        self.attention_resolutions.contains(&res)
    }
}

/// Sinusoidal base vector: `dim/2` sines followed by `dim/2` cosines.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Nearest-neighbour resize of a `[n, c, s, s]` stack to `[n, c, r, r]`.
pub fn resize_nearest<E: Element>(y: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let (n, c, h, w) = y.dims4()?;
    if h == r && w == r {
        return Ok(y.clone().with_requires_grad(false));
    }
    let (fy, fx) = (h / r, w / r);
    let src = y.data();
    let mut out = Vec::with_capacity(n * c * r * r);
    for p in 0..n * c {
        for yy in 0..r {
            for xx in 0..r {
                out.push(src[p * h * w + yy * fy * w + xx * fx]);
            }
        }
    }
    Ok(Tensor::new(&[n, c, r, r], out)?)
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Value(f32),
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let t = match init {
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Value(v) => Tensor::full(shape, v),
        };
        self.store.insert(name, t);
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::Normal(1.0 / ((inp * k * k) as f64).sqrt()) };
        self.add(format!("{name}.weight"), &[out, inp, k, k], init);
        self.add(format!("{name}.bias"), &[out], Init::Zeros);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.add(format!("{name}.weight"), &[out, inp], Init::Normal(1.0 / (inp as f64).sqrt()));
        self.add(format!("{name}.bias"), &[out], Init::Zeros);
    }

    fn res_block(&mut self, cfg: &ModelConfig, name: &str, inp: usize, out: usize, decoder: bool) {
        self.conv(&format!("{name}.conv1"), out, inp, 3, false);
        if decoder {
            self.conv(&format!("{name}.spade.shared"), cfg.spade_hidden, cfg.cond_channels, 3, false);
            self.conv(&format!("{name}.spade.head"), 2 * out, cfg.spade_hidden, 3, true);
        } else {
            self.add(format!("{name}.norm.weight"), &[out], Init::Ones);
            self.add(format!("{name}.norm.bias"), &[out], Init::Zeros);
        }
        self.linear(&format!("{name}.temb"), 2 * out, cfg.time_dim());
        self.conv(&format!("{name}.conv2"), out, out, 3, false);
        if inp != out {
            self.conv(&format!("{name}.skip"), out, inp, 1, false);
        }
    }

    fn attention(&mut self, cfg: &ModelConfig, name: &str, ch: usize) {
        for p in ["f", "g", "h"] {
            self.conv(&format!("{name}.{p}"), ch, ch, 1, false);
        }
        self.conv(&format!("{name}.v"), ch, ch, 1, true);
        if cfg.learn_attention_scale {
            self.add(format!("{name}.alpha"), &[1], Init::Value(cfg.attention_scale));
        }
    }
}

/// Model weights plus architecture.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: ModelConfig,
    params: ParamStore,
}

impl UNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let base = cfg.base_channels;
        let td = cfg.time_dim();
        b.linear("time.0", td, base);
        b.linear("time.1", td, td);
        b.conv("conv_in", base, cfg.in_channels, 3, false);
        let res = cfg.resolutions();
        let last = cfg.channel_mult.len() - 1;
        let mut skips = vec![base];
        let mut cur = base;
        for (l, m) in cfg.channel_mult.iter().enumerate() {
            let ch = base * m;
            for i in 0..cfg.num_res_blocks {
                b.res_block(&cfg, &format!("down.{l}.{i}"), cur, ch, false);
                cur = ch;
                if cfg.attends(res[l]) {
                    b.attention(&cfg, &format!("down.{l}.{i}.attn"), ch);
                }
                skips.push(cur);
            }
            if l != last {
                b.conv(&format!("down.{l}.down"), cur, cur, 3, false);
                skips.push(cur);
            }
        }
        b.res_block(&cfg, "mid.0", cur, cur, false);
        b.attention(&cfg, "mid.attn", cur);
        b.res_block(&cfg, "mid.1", cur, cur, false);
        for (l, m) in cfg.channel_mult.iter().enumerate().rev() {
            let ch = base * m;
            for i in 0..=cfg.num_res_blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                b.res_block(&cfg, &format!("up.{l}.{i}"), cur + skip, ch, true);
                cur = ch;
                if cfg.attends(res[l]) {
                    b.attention(&cfg, &format!("up.{l}.{i}.attn"), ch);
                }
            }
            if l != 0 {
                b.conv(&format!("up.{l}.up"), cur, cur, 3, false);
            }
        }
        b.add("out.norm.weight".into(), &[cur], Init::Ones);
        b.add("out.norm.bias".into(), &[cur], Init::Zeros);
        b.conv("out.conv", 2 * cfg.in_channels, cur, 3, true);
        Ok(UNet { cfg, params: b.store })
    }

    /// Reassemble a model from loaded parameters, checking the layout.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = UNet::new(cfg.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Format("parameter names or shapes do not match the model config".into()));
        }
        Ok(UNet { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Time embedding after the two dense layers, `[n, time_dim]`.
    pub fn time_embed<E: Element>(&self, g: &mut Graph<E>, p: &Binding, t: &[usize]) -> Result<Var> {
        let base = self.cfg.base_channels;
        let mut data = Vec::with_capacity(t.len() * base);
        for &ti in t {
            if ti > self.cfg.timesteps {
                return Err(Error::Input(format!("timestep {ti} outside [0, {}]", self.cfg.timesteps)));
            }
            data.extend(sinusoidal_embedding(ti, base).into_iter().map(E::lit));
        }
        let e = g.constant(Tensor::new(&[t.len(), base], data)?);
        let h = g.linear(e, p.var("time.0.weight"), Some(p.var("time.0.bias"))).ctx(|| "time.0".into())?;
        let h = g.silu(h).ctx(|| "time.0".into())?;
        g.linear(h, p.var("time.1.weight"), Some(p.var("time.1.bias"))).ctx(|| "time.1".into())
    }

    /// Returns `(eps_pred, var_raw)`, both shaped like `x`.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        p: &Binding,
        x: Var,
        y: &Tensor<E>,
        t: &[usize],
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        let (n, c, h, w) = g.value(x).dims4()?;
        if (c, h, w) != (cfg.in_channels, s, s) {
            return Err(Error::Input(format!(
                "image batch {:?} does not match model input [_, {}, {s}, {s}]",
                g.shape(x),
                cfg.in_channels
            )));
        }
        if y.shape() != [n, cfg.cond_channels, s, s] {
            return Err(Error::Input(format!(
                "conditioning stack {:?} does not match [{n}, {}, {s}, {s}]",
                y.shape(),
                cfg.cond_channels
            )));
        }
        if t.len() != n {
            return Err(Error::Input(format!("{} timesteps for a batch of {n}", t.len())));
        }
        let emb = self.time_embed(g, p, t)?;
        let emb = g.silu(emb).ctx(|| "time".into())?;
        let res = cfg.resolutions();
        let mut conds: HashMap<usize, Var> = HashMap::new();
        for &r in &res {
            let yr = resize_nearest(y, r)?;
            conds.insert(r, g.constant(yr));
        }
        let base = cfg.base_channels;
        let last = cfg.channel_mult.len() - 1;

        let mut hcur = self.conv(g, p, "conv_in", x, 1)?;
        let mut skips = vec![hcur];
        for l in 0..cfg.channel_mult.len() {
            for i in 0..cfg.num_res_blocks {
                let name = format!("down.{l}.{i}");
                hcur = self.encoder_block(g, p, &name, hcur, emb)?;
                if cfg.attends(res[l]) {
                    hcur = self.attention_block(g, p, &format!("{name}.attn"), hcur)?;
                }
                skips.push(hcur);
            }
            if l != last {
                hcur = self.conv(g, p, &format!("down.{l}.down"), hcur, 2)?;
                skips.push(hcur);
            }
        }
        hcur = self.encoder_block(g, p, "mid.0", hcur, emb)?;
        hcur = self.attention_block(g, p, "mid.attn", hcur)?;
        hcur = self.encoder_block(g, p, "mid.1", hcur, emb)?;
        for l in (0..cfg.channel_mult.len()).rev() {
            for i in 0..=cfg.num_res_blocks {
                let name = format!("up.{l}.{i}");
                let skip = skips.pop().expect("skip bookkeeping");
                let cat = g.concat_channels(hcur, skip).ctx(|| name.clone())?;
                hcur = self.decoder_block(g, p, &name, cat, conds[&res[l]], emb)?;
                if cfg.attends(res[l]) {
                    hcur = self.attention_block(g, p, &format!("{name}.attn"), hcur)?;
                }
            }
            if l != 0 {
                let name = format!("up.{l}.up");
                let up = g.upsample2x(hcur).ctx(|| name.clone())?;
                hcur = self.conv(g, p, &name, up, 1)?;
            }
        }
        debug_assert_eq!(g.shape(hcur)[1], base * cfg.channel_mult[0]);
        let out = (|| {
            let hn = g.group_norm(hcur, cfg.groups, E::lit(NORM_EPS))?;
            let hn = g.channel_affine(hn, p.var("out.norm.weight"), p.var("out.norm.bias"))?;
            g.silu(hn)
        })()
        .ctx(|| "out.norm".into())?;
        let out = self.conv(g, p, "out.conv", out, 1)?;
        let eps = g.slice_channels(out, 0, cfg.in_channels).ctx(|| "out.eps".into())?;
        let var = g.slice_channels(out, cfg.in_channels, cfg.in_channels).ctx(|| "out.var".into())?;
        Ok((eps, var))
    }

    fn conv<E: Element>(&self, g: &mut Graph<E>, p: &Binding, name: &str, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (p.var(&format!("{name}.weight")), p.var(&format!("{name}.bias")));
        g.conv2d(x, w, Some(b), stride, Padding::Same).ctx(|| name.to_string())
    }

    /// `[n, 2c]` time projection split into `(1 + scale, shift)`.
    fn time_film<E: Element>(&self, g: &mut Graph<E>, p: &Binding, name: &str, emb: Var, c: usize) -> Result<(Var, Var)> {
        let n = g.shape(emb)[0];
        let ctx = || format!("{name}.temb");
        let st = g.linear(emb, p.var(&format!("{name}.temb.weight")), Some(p.var(&format!("{name}.temb.bias")))).ctx(ctx)?;
        let st = g.reshape(st, &[n, 2 * c, 1, 1]).ctx(ctx)?;
        let scale = g.slice_channels(st, 0, c).ctx(ctx)?;
        let scale = g.reshape(scale, &[n, c]).ctx(ctx)?;
        let scale = g.add_scalar(scale, E::one()).ctx(ctx)?;
        let shift = g.slice_channels(st, c, c).ctx(ctx)?;
        let shift = g.reshape(shift, &[n, c]).ctx(ctx)?;
        Ok((scale, shift))
    }

    fn skip<E: Element>(&self, g: &mut Graph<E>, p: &Binding, name: &str, x: Var, out: usize) -> Result<Var> {
        if g.shape(x)[1] == out {
            Ok(x)
        } else {
            self.conv(g, p, &format!("{name}.skip"), x, 1)
        }
    }

    /// conv, group norm with affine, time modulation, SiLU, conv, residual.
    pub fn encoder_block<E: Element>(&self, g: &mut Graph<E>, p: &Binding, name: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.conv(g, p, &format!("{name}.conv1"), x, 1)?;
        let c = g.shape(h)[1];
        let ctx = || format!("{name}.norm");
        let h = g.group_norm(h, self.cfg.groups, E::lit(NORM_EPS)).ctx(ctx)?;
        let h = g.channel_affine(h, p.var(&format!("{name}.norm.weight")), p.var(&format!("{name}.norm.bias"))).ctx(ctx)?;
        let (scale, shift) = self.time_film(g, p, name, emb, c)?;
        let h = g.modulate(h, scale, shift).ctx(ctx)?;
        let h = g.silu(h).ctx(ctx)?;
        let h = self.conv(g, p, &format!("{name}.conv2"), h, 1)?;
        let s = self.skip(g, p, name, x, c)?;
        g.add(h, s).ctx(|| name.to_string())
    }

    /// Group normalization without affine, modulated per pixel by
    /// `(1 + gamma(y), beta(y))` from the conditioning stack at this resolution.
    pub fn spade<E: Element>(&self, g: &mut Graph<E>, p: &Binding, name: &str, a: Var, y: Var) -> Result<Var> {
        let ctx = || format!("{name}.spade");
        if g.shape(a)[2..] != g.shape(y)[2..] {
            return Err(Error::Contract(format!(
                "{name}: conditioning {:?} not resized to activation {:?}",
                g.shape(y),
                g.shape(a)
            )));
        }
        let c = g.shape(a)[1];
        let hn = g.group_norm(a, self.cfg.groups, E::lit(NORM_EPS)).ctx(ctx)?;
        let shared = self.conv(g, p, &format!("{name}.spade.shared"), y, 1)?;
        let shared = g.silu(shared).ctx(ctx)?;
        let heads = self.conv(g, p, &format!("{name}.spade.head"), shared, 1)?;
        let gamma = g.slice_channels(heads, 0, c).ctx(ctx)?;
        let beta = g.slice_channels(heads, c, c).ctx(ctx)?;
        let gamma = g.add_scalar(gamma, E::one()).ctx(ctx)?;
        let out = g.mul(hn, gamma).ctx(ctx)?;
        g.add(out, beta).ctx(ctx)
    }

    /// conv, SPADE, time modulation, SiLU, conv, residual.
    pub fn decoder_block<E: Element>(
        &self,
        g: &mut Graph<E>,
        p: &Binding,
        name: &str,
        x: Var,
        y: Var,
        emb: Var,
    ) -> Result<Var> {
        let h = self.conv(g, p, &format!("{name}.conv1"), x, 1)?;
        let c = g.shape(h)[1];
        let h = self.spade(g, p, name, h, y)?;
        let (scale, shift) = self.time_film(g, p, name, emb, c)?;
        let ctx = || format!("{name}.temb");
        let h = g.modulate(h, scale, shift).ctx(ctx)?;
        let h = g.silu(h).ctx(ctx)?;
        let h = self.conv(g, p, &format!("{name}.conv2"), h, 1)?;
        let s = self.skip(g, p, name, x, c)?;
        g.add(h, s).ctx(|| name.to_string())
    }

    /// `x + v(sum_v softmax(alpha * cos(f_u, g_v)) h_v)`, per head.
    pub fn attention_block<E: Element>(&self, g: &mut Graph<E>, p: &Binding, name: &str, x: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4()?;
        let dh = self.cfg.head_channels;
        let heads = c / dh;
        let l = h * w;
        let fq = self.conv(g, p, &format!("{name}.f"), x, 1)?;
        let gk = self.conv(g, p, &format!("{name}.g"), x, 1)?;
        let hv = self.conv(g, p, &format!("{name}.h"), x, 1)?;
        let ctx = || name.to_string();
        let fq = g.reshape(fq, &[n * heads, dh, l]).ctx(ctx)?;
        let gk = g.reshape(gk, &[n * heads, dh, l]).ctx(ctx)?;
        let hv = g.reshape(hv, &[n * heads, dh, l]).ctx(ctx)?;
        let fq = g.l2_normalize(fq, E::lit(COSINE_EPS)).ctx(ctx)?;
        let gk = g.l2_normalize(gk, E::lit(COSINE_EPS)).ctx(ctx)?;
        let sim = g.bmm(fq, gk, true, false).ctx(ctx)?;
        let sim = if self.cfg.learn_attention_scale {
            let flat = g.reshape(sim, &[1, 1, n * heads * l, l]).ctx(ctx)?;
            let alpha = g.reshape(p.var(&format!("{name}.alpha")), &[1, 1]).ctx(ctx)?;
            let zero = g.constant(Tensor::zeros(&[1, 1]));
            let scaled = g.modulate(flat, alpha, zero).ctx(ctx)?;
            g.reshape(scaled, &[n * heads, l, l]).ctx(ctx)?
        } else {
            g.scale(sim, E::lit(self.cfg.attention_scale as f64)).ctx(ctx)?
        };
        let attn = g.softmax(sim).ctx(ctx)?;
        let out = g.bmm(hv, attn, false, true).ctx(ctx)?;
        let out = g.reshape(out, &[n, c, h, w]).ctx(ctx)?;
        let out = self.conv(g, p, &format!("{name}.v"), out, 1)?;
        g.add(x, out).ctx(ctx)
    }

    /// Inference forward pass with frozen weights.
    pub fn predict(&self, x: &Tensor<f32>, y: &Tensor<f32>, t: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let p = self.params.bind::<f32>(&mut g, false);
        let xv = g.constant(x.clone());
        let (e, v) = self.forward(&mut g, &p, xv, y, t)?;
        Ok((g.value(e).clone(), g.value(v).clone()))
    }
}

#[cfg(test)]
mod tests;
