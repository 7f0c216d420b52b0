//! Short desk-scale training run with checkpointing and resume.
//!
//! `cargo run --release --example train_desk -- 200` trains for 200 steps.

use pear::data::{gen_synthetic, persistence_l1, SyntheticConfig};
use pear::model::ModelConfig;
use pear::train::{TrainConfig, Trainer};

fn main() -> pear::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let data = gen_synthetic(0, &SyntheticConfig { n_side: 8, steps: 24, ..Default::default() })?;
    let (train, val) = data.split(16)?;
    let cfg = TrainConfig { steps, checkpoint_every: steps / 2, ..Default::default() };
    let run_dir = tempfile::tempdir()?;

    let mut trainer = Trainer::<f32>::init(ModelConfig::desk(), cfg.clone())?;
    let summary = trainer.fit(&train, Some(&val), Some(run_dir.path()))?;
    println!(
        "{} steps: train L1 {:.4}, val L1 {:.4?}, persistence {:.4}",
        summary.steps,
        summary.last_loss,
        summary.val_loss,
        persistence_l1(&val, cfg.surface_loss_weight)?
    );
    print!("{}", std::fs::read_to_string(run_dir.path().join("loss.csv"))?.lines().take(4).map(|l| format!("  {l}\n")).collect::<String>());

    if let Some(ckpt) = summary.final_checkpoint {
        let mut resumed = Trainer::<f32>::resume(ModelConfig::desk(), cfg, &ckpt)?;
        println!("resumed at step {} after {} samples", resumed.step_count(), resumed.samples_seen());
        println!("one more step: L1 {:.4}", resumed.train_step(&train)?);
    }
    Ok(())
}
