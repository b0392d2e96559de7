//! Train the small model for a few hundred steps and report how well
//! generated images reproduce their maps over a noiseless channel.
//!
//! `cargo run --release --example train_toy -- [steps]`

use semcomm::config::RunConfig;
use semcomm::pipeline::{load_data, simulate, summarize};
use semcomm::train::Trainer;

fn main() -> semcomm::error::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut run = RunConfig::default();
    run.apply_text(include_str!("../../../configs/toy.conf"))?;
    run.train.steps = steps;
    run.run.psnr_sweep = vec![100.0];
    run.run.samples_per_psnr = 8;
    let ds = load_data(&run)?;
    let mut tr = Trainer::new(&run)?;
    while tr.step < steps {
        if let Some(m) = tr.train_step(&ds.train)? {
            if m.step % 100 == 0 {
                println!("step {:>5}  loss {:.4}  grad norm {:.3}", m.step, m.total, m.grad_norm);
            }
        }
    }
    for s in summarize(&simulate(&tr.model, &run, &ds, None)?) {
        println!("{}: mIoU {:.3}, image psnr {:.2} dB", s.method, s.miou_mean, s.image_psnr_mean);
    }
    Ok(())
}
