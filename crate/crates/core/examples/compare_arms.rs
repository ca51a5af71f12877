//! The five-arm comparison at reduced length: baseline, a frozen block,
//! the capacity-matched MLP, a frozen random block and a fine-tuned block,
//! all from the same encoder initialization.
//!
//! ```text
//! cargo run --release --example compare_arms [epochs]
//! ```

use vitlm::cli::frozen_checksum;
use vitlm::data::generate;
use vitlm::io::mock_llm;
use vitlm::model::{Arm, Model, ModelConfig};
use vitlm::trainer::{train, TrainConfig};

fn main() -> vitlm::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let data = generate(1, 1000, 4, 32)?;
    let cfg = TrainConfig { epochs, warmup_epochs: 1.min(epochs), ..TrainConfig::default() };

    println!("{:<16} {:>10} {:>9} {:>9} {:>9}  frozen", "arm", "trainable", "frozen", "val_loss", "val_top1");
    for arm in Arm::ALL {
        let c = ModelConfig::default().with_arm(arm);
        let source = arm
            .needs_llm_source()
            .then(|| mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, c.n_llm_blocks))
            .transpose()?;
        let mut model = Model::build(&c, source, 0)?;
        let before = frozen_checksum(&model);
        let report = train(&mut model, &data, &cfg, |_| {})?;
        let last = report.last().expect("at least one epoch");
        println!(
            "{:<16} {:>10} {:>9} {:>9.4} {:>9.3}  {}",
            arm.name(),
            model.trainable_count(),
            model.frozen_count(),
            last.val_loss,
            last.val_top1,
            if frozen_checksum(&model) == before { "untouched" } else { "changed" }
        );
    }
    Ok(())
}
