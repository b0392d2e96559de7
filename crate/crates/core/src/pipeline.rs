//! End-to-end runs: data preparation, training, PSNR sweeps, aggregation
//! and the 2x2 ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::channel::transmit_image;
use crate::codec::{bit_budget, BudgetItem};
use crate::config::RunConfig;
use crate::data::{
    generate_dataset, map_to_raster, miou, pixel_metrics, read_dataset, recover_map, write_dataset, Dataset, Palette,
    RgbImage, Sample, ShapesSpec,
};
use crate::diffusion::{p_sample_loop, SamplerConfig};
use crate::error::{Error, Result};
use crate::fds::FdsConfig;
use crate::link::send_map;
use crate::pnm;
use crate::tensor::Tensor;
use crate::train::{run_training, TrainOutcome};
use crate::unet::{load_checkpoint, UNet};

pub const EVAL_SCHEMA: &str = "# schema: eval-rows v1";
pub const EVAL_HEADER: &str = "method,psnr_db,sample,fds,miou,mse,image_psnr,bits_sent,seed";
pub const SUMMARY_SCHEMA: &str = "# schema: eval-summary v1";
pub const SUMMARY_HEADER: &str = "method,psnr_db,fds,samples,miou_mean,mse_mean,image_psnr_mean,bits_mean";
pub const ABLATION_SCHEMA: &str = "# schema: ablation v1";
pub const ABLATION_HEADER: &str = "fds,noisy_trained,psnr_db,miou,mse,image_psnr";

pub fn shapes_spec(run: &RunConfig) -> Result<ShapesSpec> {
    let d = &run.data;
    let mut spec = ShapesSpec::new(d.image_size, d.num_classes, d.seed)?;
    spec.min_shapes = d.min_shapes;
    spec.max_shapes = d.max_shapes;
    spec.texture = d.texture;
    Ok(spec)
}

/// Read the dataset from `data.dir`, or generate it when `data.autogen` is
/// set and no manifest exists yet (writing it to `data.dir` if given).
pub fn load_data(run: &RunConfig) -> Result<Dataset> {
    if let Some(dir) = &run.data.dir {
        if dir.join("manifest.txt").exists() {
            let ds = read_dataset(dir)?;
            if ds.palette.len() != run.data.num_classes {
                return Err(Error::Format(format!(
                    "{}: dataset has {} classes but data.num_classes = {}",
                    dir.display(),
                    ds.palette.len(),
                    run.data.num_classes
                )));
            }
            return Ok(ds);
        }
        if !run.data.autogen {
            return Err(Error::Input(format!("no dataset manifest in {}", dir.display())));
        }
    }
    let ds = generate_dataset(&shapes_spec(run)?, run.data.train_size, run.data.test_size)?;
    if let Some(dir) = &run.data.dir {
        write_dataset(dir, &ds)?;
    }
    Ok(ds)
}

pub fn gen_data(run: &RunConfig, dir: &Path) -> Result<Dataset> {
    run.validate()?;
    let ds = generate_dataset(&shapes_spec(run)?, run.data.train_size, run.data.test_size)?;
    write_dataset(dir, &ds)?;
    Ok(ds)
}

/// Load weights, refusing files written for another model config.
pub fn load_model(run: &RunConfig, path: &Path) -> Result<UNet> {
    let (header, params) = load_checkpoint(path)?;
    let cfg = run.model_config();
    if header.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was written for a different model config (hash {:016x}, expected {:016x})",
            path.display(),
            header.config_hash,
            cfg.hash()
        )));
    }
    UNet::from_params(cfg, params)
}

fn write_snapshot(run: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("config.resolved.txt");
    fs::write(&p, run.to_text()).map_err(|e| Error::io(&p, e))
}

pub fn train(run: &RunConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    run.validate()?;
    let ds = load_data(run)?;
    run_training(run, &ds.train, out, resume)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: &'static str,
    pub psnr_db: f64,
    pub sample: usize,
    pub fds: bool,
    pub miou: f64,
    pub mse: f64,
    pub image_psnr: f64,
    pub bits_sent: u64,
    pub seed: u64,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.4},{},{}",
            self.method,
            self.psnr_db,
            self.sample,
            u8::from(self.fds),
            self.miou,
            self.mse,
            self.image_psnr,
            self.bits_sent,
            self.seed
        )
    }
}

/// Outcome of sending a batch of maps through the channel and generating
/// images from what arrived.
pub struct Generated {
    pub images: Vec<RgbImage>,
    pub received: Vec<Vec<f32>>,
    pub bits: Vec<u64>,
}

fn derive_seed(base: u64, i: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i.wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

/// Send every map at `psnr_db`, then sample one image per received stack.
pub fn generate_at(
    model: &UNet,
    run: &RunConfig,
    samples: &[Sample],
    psnr_db: f64,
    fds: &FdsConfig,
    seed: u64,
) -> Result<Generated> {
    let classes = run.data.num_classes;
    let (h, w) = (run.data.image_size, run.data.image_size);
    let mut received = Vec::with_capacity(samples.len());
    let mut bits = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let r = send_map(&s.map, classes, &run.channel(psnr_db, derive_seed(seed, i as u64)), fds)?;
        bits.push(r.bits);
        received.push(r.stack);
    }
    let y = Tensor::new(&[samples.len(), classes, h, w], received.concat())?;
    let cfg = SamplerConfig { seed, ..run.sample };
    let x = p_sample_loop(model, &y, &run.schedule()?, &cfg)?;
    let per = 3 * h * w;
    let images = (0..samples.len())
        .map(|i| RgbImage::from_model_range(h, w, &x.data()[i * per..(i + 1) * per]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated { images, received, bits })
}

/// One row per generated sample.
pub fn score(
    samples: &[Sample],
    generated: &Generated,
    palette: &Palette,
    psnr_db: f64,
    fds: bool,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (i, (s, img)) in samples.iter().zip(&generated.images).enumerate() {
        let pm = pixel_metrics(&img.data, &s.image.data)?;
        rows.push(EvalRow {
            method: "ours",
            psnr_db,
            sample: i,
            fds,
            miou: miou(&recover_map(img, palette), &s.map)?,
            mse: pm.mse,
            image_psnr: pm.psnr,
            bits_sent: generated.bits[i],
            seed,
        });
    }
    Ok(rows)
}

pub fn baseline_rows(run: &RunConfig, samples: &[Sample], palette: &Palette, psnr_db: f64, seed: u64) -> Result<Vec<EvalRow>> {
    let (h, w) = (run.data.image_size, run.data.image_size);
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ch = run.channel(psnr_db, derive_seed(seed ^ 0xba5e, i as u64));
            let rx = RgbImage::new(h, w, transmit_image(&s.image.data, &ch)?)?;
            let pm = pixel_metrics(&rx.data, &s.image.data)?;
            Ok(EvalRow {
                method: "baseline",
                psnr_db,
                sample: i,
                fds: false,
                miou: miou(&recover_map(&rx, palette), &s.map)?,
                mse: pm.mse,
                image_psnr: pm.psnr,
                bits_sent: bit_budget(BudgetItem::RawRgb { height: h, width: w }),
                seed,
            })
        })
        .collect()
}

fn held_out<'a>(run: &RunConfig, ds: &'a Dataset) -> Result<&'a [Sample]> {
    let n = run.run.samples_per_psnr;
    if n == 0 || n > ds.test.len() {
        return Err(Error::Config(format!(
            "run.samples_per_psnr = {n} but the held-out split has {} maps",
            ds.test.len()
        )));
    }
    Ok(&ds.test[..n])
}

fn write_samples(dir: &Path, tag: &str, samples: &[Sample], g: &Generated, palette: &Palette) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (s, img)) in samples.iter().zip(&g.images).enumerate() {
        pnm::write(&dir.join(format!("{tag}_s{i}_generated.ppm")), &img.to_raster())?;
        pnm::write(&dir.join(format!("{tag}_s{i}_source.ppm")), &s.image.to_raster())?;
        pnm::write(&dir.join(format!("{tag}_s{i}_recovered.pgm")), &map_to_raster(&recover_map(img, palette)))?;
    }
    Ok(())
}

/// The PSNR sweep. Each cell uses seed `run.seed + cell index`. With `out`
/// set, sample images are written under `out/samples`.
pub fn simulate(model: &UNet, run: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<Vec<EvalRow>> {
    run.validate()?;
    let samples = held_out(run, ds)?;
    let cells: Vec<(usize, f64)> = run.run.psnr_sweep.iter().copied().enumerate().collect();
    let per_cell: Vec<Result<Vec<EvalRow>>> = cells
        .par_iter()
        .map(|&(k, psnr)| {
            let seed = run.run.seed.wrapping_add(k as u64);
            let g = generate_at(model, run, samples, psnr, &run.fds, seed)?;
            if let Some(out) = out {
                write_samples(&out.join("samples"), &format!("psnr{psnr}"), samples, &g, &ds.palette)?;
            }
            let mut rows = score(samples, &g, &ds.palette, psnr, run.fds.enabled, seed)?;
            rows.extend(baseline_rows(run, samples, &ds.palette, psnr, seed)?);
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_cell {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn rows_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_SCHEMA}\n{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: &'static str,
    pub psnr_db: f64,
    pub fds: bool,
    pub samples: usize,
    pub miou_mean: f64,
    pub mse_mean: f64,
    /// Computed from the mean MSE, so identical images do not dominate.
    pub image_psnr_mean: f64,
    pub bits_mean: f64,
}

/// Per-(method, PSNR) means in first-seen order.
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in rows {
        let idx = out.iter().position(|s| s.method == r.method && s.psnr_db == r.psnr_db && s.fds == r.fds);
        let idx = idx.unwrap_or_else(|| {
            out.push(SummaryRow {
                method: r.method,
                psnr_db: r.psnr_db,
                fds: r.fds,
                samples: 0,
                miou_mean: 0.0,
                mse_mean: 0.0,
                image_psnr_mean: 0.0,
                bits_mean: 0.0,
            });
            out.len() - 1
        });
        let s = &mut out[idx];
        s.samples += 1;
        s.miou_mean += r.miou;
        s.mse_mean += r.mse;
        s.bits_mean += r.bits_sent as f64;
    }
    for s in &mut out {
        let n = s.samples as f64;
        s.miou_mean /= n;
        s.mse_mean /= n;
        s.bits_mean /= n;
        s.image_psnr_mean = if s.mse_mean == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / s.mse_mean).log10() };
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_SCHEMA}\n{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.4},{:.1}",
            r.method,
            r.psnr_db,
            u8::from(r.fds),
            r.samples,
            r.miou_mean,
            r.mse_mean,
            r.image_psnr_mean,
            r.bits_mean
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub fds: bool,
    pub noisy_trained: bool,
    pub psnr_db: f64,
    pub miou: f64,
    pub mse: f64,
    pub image_psnr: f64,
}

/// `{FDS on, off} x {noisy-trained, clean-trained}` at `run.ablation_psnr`.
/// Every cell sees the same maps, channel noise and sampler seed.
pub fn ablation(noisy: &UNet, clean: &UNet, run: &RunConfig, ds: &Dataset) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let samples = held_out(run, ds)?;
    let psnr = run.run.ablation_psnr;
    let grid = [(true, true), (true, false), (false, true), (false, false)];
    grid.par_iter()
        .map(|&(fds_on, noisy_trained)| {
            let model = if noisy_trained { noisy } else { clean };
            let fds = FdsConfig { enabled: fds_on, ..run.fds };
            let g = generate_at(model, run, samples, psnr, &fds, run.run.seed)?;
            let rows = score(samples, &g, &ds.palette, psnr, fds_on, run.run.seed)?;
            let s = &summarize(&rows)[0];
            Ok(AblationRow { fds: fds_on, noisy_trained, psnr_db: psnr, miou: s.miou_mean, mse: s.mse_mean, image_psnr: s.image_psnr_mean })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_SCHEMA}\n{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.4}",
            u8::from(r.fds),
            u8::from(r.noisy_trained),
            r.psnr_db,
            r.miou,
            r.mse,
            r.image_psnr
        );
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `simulate` command: per-sample rows plus sample images.
pub fn run_simulate(run: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<EvalRow>> {
    run.validate()?;
    let model = load_model(run, checkpoint)?;
    let ds = load_data(run)?;
    write_snapshot(run, out)?;
    let rows = simulate(&model, run, &ds, Some(out))?;
    write_text(&out.join("simulate.csv"), &rows_csv(&rows))?;
    Ok(rows)
}

/// `eval` command: the sweep reduced to per-PSNR means.
pub fn run_eval(run: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<SummaryRow>> {
    run.validate()?;
    let model = load_model(run, checkpoint)?;
    let ds = load_data(run)?;
    write_snapshot(run, out)?;
    let summary = summarize(&simulate(&model, run, &ds, None)?);
    write_text(&out.join("eval.csv"), &summary_csv(&summary))?;
    Ok(summary)
}

/// `ablate` command with the noisy-trained checkpoint first.
pub fn run_ablation(run: &RunConfig, noisy: &Path, clean: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let noisy = load_model(run, noisy)?;
    let clean = load_model(run, clean)?;
    let ds = load_data(run)?;
    write_snapshot(run, out)?;
    let rows = ablation(&noisy, &clean, run, &ds)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}
