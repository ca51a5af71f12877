//! Trains a model with a frozen block briefly, then measures how well each
//! traced stage's token activations agree with the ground-truth shape masks,
//! next to the CLS attention map. Maps are written as PGM images.
//!
//! ```text
//! cargo run --release --example mask_agreement [epochs] [out_dir]
//! ```

use std::path::PathBuf;

use vitlm::analysis::{export_maps, stage_sweep, trace_samples};
use vitlm::data::{generate, to_token_mask};
use vitlm::io::mock_llm;
use vitlm::model::{Arm, Model, ModelConfig, TracePoint};
use vitlm::trainer::{train, TrainConfig};

fn main() -> vitlm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("vitlm_maps"));

    let data = generate(1, 1000, 4, 32)?;
    let c = ModelConfig::default().with_arm(Arm::PlusLlm);
    let blocks = mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1)?;
    let mut model = Model::build(&c, Some(blocks), 0)?;
    let cfg = TrainConfig { epochs, warmup_epochs: 1, ..TrainConfig::default() };
    let report = train(&mut model, &data, &cfg, |_| {})?;
    println!("val top-1 after {epochs} epochs: {:.3}", report.last().expect("trained").val_top1);

    let samples = &data.val[..100];
    let masks = samples
        .iter()
        .map(|s| to_token_mask(&s.mask, 32, 32, c.patch_size))
        .collect::<vitlm::Result<Vec<_>>>()?;
    let traces = trace_samples(&model, samples)?;

    println!("\n{:<10} {:<10} {:>8} {:>10} {:>8}", "stage", "kind", "feature", "attention", "gap");
    let sweep = stage_sweep(&traces, &masks)?;
    for r in &sweep {
        let (f, a) = (r.feature_miou(), r.attention_miou());
        println!("{:<10} {:<10} {f:>8.4} {a:>10.4} {:>+8.4}", r.stage.name(), r.kind.name(), f - a);
    }
    let l2 = sweep.iter().find(|r| r.stage == TracePoint::L2).expect("plus_llm traces its stage output");
    export_maps(l2, &traces, &out)?;
    println!("\nper-image tables and maps in {}", out.display());
    Ok(())
}
