//! Noisy-conditioning training loop.
//!
//! Every sample draws its own channel PSNR, sends its map through the link
//! and conditions the model on what the receiver got. The optimizer is
//! AdamW with global gradient-norm clipping; an EMA shadow of the weights is
//! kept alongside.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::config::{RunConfig, TrainConfig};
use crate::data::Sample;
use crate::diffusion::{training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fds::FdsConfig;
use crate::link::send_map;
use crate::tensor::{Graph, Tensor};
use crate::unet::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ParamStore, UNet,
};

pub const METRICS_HEADER: &str = "step,L_d,L_KL,total,grad_norm,wall_ms";
pub const METRICS_SCHEMA: &str = "# schema: train-metrics v1";
pub const MODEL_FILE: &str = "model.ckpt";
pub const EMA_FILE: &str = "ema.ckpt";
pub const STATE_FILE: &str = "train_state.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Categorical draw from `pool` with unnormalized `weights`.
pub fn sample_channel_condition<R: Rng + ?Sized>(rng: &mut R, pool: &[f64], weights: &[f64]) -> Result<f64> {
    if pool.is_empty() || pool.len() != weights.len() {
        return Err(Error::Config("PSNR pool must be non-empty and match its weights".into()));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("PSNR weights: {e}")))?;
    Ok(pool[dist.sample(rng)])
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut x = *w as f64;
                x -= self.lr * self.weight_decay * x;
                x -= self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                *w = x as f32;
            }
        }
    }

    fn moments_store(&self, params: &ParamStore) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, name) in params.names().iter().enumerate() {
            let shape = params.tensors()[i].shape();
            s.insert(format!("m/{name}"), Tensor::new(shape, self.m[i].clone()).expect("shape"));
            s.insert(format!("v/{name}"), Tensor::new(shape, self.v[i].clone()).expect("shape"));
        }
        s
    }

    fn restore_moments(&mut self, params: &ParamStore, store: &ParamStore) -> Result<()> {
        for (i, name) in params.names().iter().enumerate() {
            let m = store.get(&format!("m/{name}"));
            let v = store.get(&format!("v/{name}"));
            match (m, v) {
                (Some(m), Some(v)) if m.numel() == self.m[i].len() && v.numel() == self.v[i].len() => {
                    self.m[i] = m.data().to_vec();
                    self.v[i] = v.data().to_vec();
                }
                _ => return Err(Error::Format(format!("optimizer state lacks moments for {name}"))),
            }
        }
        Ok(())
    }
}

pub fn ema_step(shadow: f64, param: f64, decay: f64) -> f64 {
    decay * shadow + (1.0 - decay) * param
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) {
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = ema_step(*a as f64, b as f64, decay) as f32;
        }
    }
}

/// Scale gradients so their global l2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub denoise: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    /// PSNR drawn for each sample of the batch.
    pub psnrs: Vec<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.denoise, self.kl, self.total, self.grad_norm, self.wall_ms)
    }
}

/// Build one batch: images in `[-1, 1]`, received conditioning stacks, the
/// drawn PSNRs, timesteps and noise.
pub struct Batch {
    pub images: Tensor<f32>,
    pub conds: Tensor<f32>,
    pub psnrs: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
}

pub fn make_batch<R: Rng + ?Sized>(
    rng: &mut R,
    data: &[Sample],
    cfg: &TrainConfig,
    classes: usize,
    power: f64,
    steps: usize,
) -> Result<Batch> {
    let n = cfg.batch_size;
    let s = data[0].map.height();
    let w = data[0].map.width();
    let receiver = FdsConfig { enabled: cfg.fds_in_training, ..FdsConfig::default() };
    let mut images = Vec::with_capacity(n * 3 * s * w);
    let mut conds = Vec::with_capacity(n * classes * s * w);
    let mut psnrs = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let sample = &data[rng.gen_range(0..data.len())];
        let psnr = sample_channel_condition(rng, &cfg.psnr_pool, &cfg.psnr_weights)?;
        let channel = crate::channel::ChannelConfig::new(psnr, power, rng.gen());
        let received = send_map(&sample.map, classes, &channel, &receiver)?;
        if rng.gen_bool(cfg.cond_drop_prob) {
            conds.extend(std::iter::repeat(0.0).take(classes * s * w));
        } else {
            conds.extend_from_slice(&received.stack);
        }
        images.extend(sample.image.to_model_range());
        psnrs.push(psnr);
        t.push(rng.gen_range(1..=steps));
    }
    let eps: Vec<f32> = (0..images.len()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Batch {
        images: Tensor::new(&[n, 3, s, w], images)?,
        conds: Tensor::new(&[n, classes, s, w], conds)?,
        psnrs,
        t,
        eps: Tensor::new(&[n, 3, s, w], eps)?,
    })
}

/// Everything needed to continue a run exactly.
pub struct Trainer {
    pub model: UNet,
    pub ema: ParamStore,
    pub opt: AdamW,
    pub step: usize,
    pub skipped: usize,
    rng: ChaCha8Rng,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    classes: usize,
    power: f64,
    config_hash: u64,
}

impl Trainer {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let mcfg = run.model_config();
        let config_hash = mcfg.hash();
        let model = UNet::new(mcfg, run.train.seed)?;
        let ema = model.params().clone();
        let opt = AdamW::new(model.params(), run.train.learning_rate, run.train.weight_decay);
        Ok(Trainer {
            model,
            ema,
            opt,
            step: 0,
            skipped: 0,
            rng: ChaCha8Rng::seed_from_u64(run.train.seed ^ 0x5eed_7a1e),
            cfg: run.train.clone(),
            sched: run.schedule()?,
            classes: run.data.num_classes,
            power: run.channel_power,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    /// One optimizer step. Returns `None` when the step was skipped because
    /// the loss or a gradient was not finite.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<Option<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let start = Instant::now();
        let batch = make_batch(&mut self.rng, data, &self.cfg, self.classes, self.power, self.sched.steps())?;
        self.step += 1;
        let mut g = Graph::<f32>::new();
        let p = self.model.params().bind(&mut g, true);
        let outcome = training_loss(
            &self.model,
            &mut g,
            &p,
            &batch.images,
            &batch.conds,
            &batch.t,
            &batch.eps,
            &self.sched,
            &self.cfg.loss,
        )
        .and_then(|(loss, parts)| {
            g.backward(loss)?;
            Ok(parts)
        });
        let parts = match outcome {
            Ok(parts) => parts,
            Err(e @ Error::Numeric { .. }) | Err(e @ Error::Tensor(_)) => {
                self.skipped += 1;
                eprintln!("step {}: skipped ({e})", self.step);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let mut grads = p.grads(&g);
        drop(g);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() || !parts.total.is_finite() {
            self.skipped += 1;
            eprintln!("step {}: skipped (non-finite gradient)", self.step);
            return Ok(None);
        }
        self.opt.step(self.model.params_mut(), &grads);
        ema_update(&mut self.ema, self.model.params(), self.cfg.ema_decay);
        let wall_ms = if self.cfg.log_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        Ok(Some(StepMetrics {
            step: self.step,
            denoise: parts.denoise,
            kl: parts.kl,
            total: parts.total,
            grad_norm,
            wall_ms,
            psnrs: batch.psnrs,
        }))
    }

    fn encode_state(&self) -> Vec<u8> {
        let mut out = b"SCTS".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(self.skipped as u64).to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.opt.t.to_le_bytes());
        out.extend(encode_checkpoint(&self.opt.moments_store(self.model.params()), self.config_hash));
        out
    }

    /// Write model, EMA and optimizer state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&dir.join(MODEL_FILE), self.model.params(), self.config_hash)?;
        save_checkpoint(&dir.join(EMA_FILE), &self.ema, self.config_hash)?;
        let path = dir.join(STATE_FILE);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode_state()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Continue from the files written by [`Trainer::save`].
    pub fn resume(run: &RunConfig, dir: &Path) -> Result<Self> {
        let mut tr = Trainer::new(run)?;
        let (h, params) = load_checkpoint(&dir.join(MODEL_FILE))?;
        let (he, ema) = load_checkpoint(&dir.join(EMA_FILE))?;
        if h.config_hash != tr.config_hash || he.config_hash != tr.config_hash {
            return Err(Error::Config("checkpoint was written for a different model config".into()));
        }
        tr.model = UNet::from_params(run.model_config(), params)?;
        if !tr.model.params().same_layout(&ema) {
            return Err(Error::Format("EMA checkpoint layout differs from the model".into()));
        }
        tr.ema = ema;
        let path = dir.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let bad = || Error::Format(format!("{}: malformed training state", path.display()));
        if bytes.len() < 40 || &bytes[..4] != b"SCTS" || bytes[4..8] != 1u32.to_le_bytes() {
            return Err(bad());
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        tr.step = u64_at(8) as usize;
        tr.skipped = u64_at(16) as usize;
        let pos = u128::from_le_bytes(bytes[24..40].try_into().expect("16 bytes"));
        tr.rng.set_word_pos(pos);
        if bytes.len() < 48 {
            return Err(bad());
        }
        tr.opt.t = u64_at(40);
        let (_, moments) = decode_checkpoint(&bytes[48..])?;
        let snapshot = tr.model.params().clone();
        tr.opt.restore_moments(&snapshot, &moments)?;
        Ok(tr)
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub skipped: usize,
    pub metrics: Vec<StepMetrics>,
}

fn metrics_prelude() -> String {
    format!("{METRICS_SCHEMA}\n{METRICS_HEADER}\n")
}

/// Train for `run.train.steps` steps in total, writing checkpoints, the
/// metrics CSV and the resolved config into `out_dir`. With `resume` the
/// run continues from the state files already there.
pub fn run_training(run: &RunConfig, data: &[Sample], out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let snap = out_dir.join("config.resolved.txt");
    fs::write(&snap, run.to_text()).map_err(|e| Error::io(&snap, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut trainer = if resume {
        let tr = Trainer::resume(run, out_dir)?;
        // keep rows up to the saved step
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut kept = metrics_prelude();
        for line in text.lines().skip(2) {
            let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if step <= tr.step {
                let _ = writeln!(kept, "{line}");
            }
        }
        fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
        tr
    } else {
        fs::write(&metrics_path, metrics_prelude()).map_err(|e| Error::io(&metrics_path, e))?;
        Trainer::new(run)?
    };
    let mut file = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = Vec::new();
    if !resume {
        trainer.save(out_dir)?;
    }
    while trainer.step < run.train.steps {
        if let Some(m) = trainer.train_step(data)? {
            writeln!(file, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
            metrics.push(m);
        }
        let every = run.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            file.flush().map_err(|e| Error::io(&metrics_path, e))?;
            trainer.save(out_dir)?;
        }
    }
    file.flush().map_err(|e| Error::io(&metrics_path, e))?;
    trainer.save(out_dir)?;
    Ok(TrainOutcome { out_dir: out_dir.to_path_buf(), steps: trainer.step, skipped: trainer.skipped, metrics })
}
