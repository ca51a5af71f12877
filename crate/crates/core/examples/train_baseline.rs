//! Trains the plain ViT on the default synthetic dataset and prints the
//! per-epoch table.
//!
//! ```text
//! cargo run --release --example train_baseline [epochs]
//! ```

use std::time::Instant;

use vitlm::data::generate;
use vitlm::model::{Arm, Model, ModelConfig};
use vitlm::trainer::{train, TrainConfig};

fn main() -> vitlm::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let data = generate(1, 2500, 4, 32)?;
    let config = ModelConfig::default().with_arm(Arm::Baseline);
    let mut model = Model::build(&config, None, 0)?;
    println!("trainable parameters: {}", model.trainable_count());

    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let start = Instant::now();
    let report = train(&mut model, &data, &cfg, |r| {
        println!(
            "epoch {:>2}  lr {:.2e}  train {:.4}  val {:.4}  top1 {:.3}  ({:.0?})",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            r.val_top1,
            start.elapsed()
        )
    })?;
    println!("best val top-1 {:.3} at epoch {}", report.best_val_top1, report.best_epoch);
    Ok(())
}
