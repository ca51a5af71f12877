//! Saves a model to a checkpoint directory, restores it and confirms the
//! restored logits match bit for bit.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use vitlm::data::generate;
use vitlm::io::{checkpoint_paths, load_checkpoint, mock_llm, save_checkpoint};
use vitlm::model::{Arm, Model, ModelConfig};
use vitlm::trainer::{train, TrainConfig};

fn main() -> vitlm::Result<()> {
    let c = ModelConfig::default().with_arm(Arm::PlusLlm);
    let blocks = mock_llm(3, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1)?;
    let mut model = Model::build(&c, Some(blocks), 0)?;
    let data = generate(2, 200, 4, 32)?;
    train(&mut model, &data, &TrainConfig { epochs: 1, warmup_epochs: 0, ..TrainConfig::default() }, |_| {})?;

    let dir = std::env::temp_dir().join("vitlm_checkpoint");
    save_checkpoint(&model, &dir)?;
    let (weights, sidecar) = checkpoint_paths(&dir);
    println!("{} ({} bytes)", weights.display(), std::fs::metadata(&weights).map(|m| m.len()).unwrap_or(0));
    println!("{}:\n{}", sidecar.display(), std::fs::read_to_string(&sidecar).unwrap_or_default());

    let restored = load_checkpoint(&dir)?;
    let mut identical = 0;
    for s in &data.val {
        identical += (restored.forward(&s.image)?.data() == model.forward(&s.image)?.data()) as usize;
    }
    println!("{identical}/{} validation logits identical after restore", data.val.len());
    Ok(())
}
