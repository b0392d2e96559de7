//! Train a noisy-conditioned and a clean-conditioned model briefly and
//! compare them with and without the receiver denoiser.
//!
//! `cargo run --release --example ablation_grid -- [steps]`

use semcomm::config::RunConfig;
use semcomm::pipeline::{ablation, ablation_csv, load_data};
use semcomm::train::Trainer;

fn trained(run: &RunConfig, ds: &semcomm::data::Dataset) -> semcomm::error::Result<semcomm::unet::UNet> {
    let mut tr = Trainer::new(run)?;
    while tr.step < run.train.steps {
        tr.train_step(&ds.train)?;
    }
    Ok(tr.model)
}

fn main() -> semcomm::error::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut run = RunConfig::default();
    run.apply_text(include_str!("../../../configs/toy.conf"))?;
    run.train.steps = steps;
    run.run.samples_per_psnr = 8;
    let ds = load_data(&run)?;
    let noisy = trained(&run, &ds)?;
    let mut clean_run = run.clone();
    clean_run.apply_overrides(&["train.psnr_pool=100", "train.psnr_weights=1"])?;
    let clean = trained(&clean_run, &ds)?;
    print!("{}", ablation_csv(&ablation(&noisy, &clean, &run, &ds)?));
    Ok(())
}
