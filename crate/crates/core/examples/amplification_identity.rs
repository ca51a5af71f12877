//! Collapses the inserted stage into one linear map and checks that
//! aggregating the visual tokens with the CLS attention commutes with it:
//! `L(Σ w_v z[v]) = Σ w_v L(z[v])`.
//!
//! ```text
//! cargo run --release --example amplification_identity
//! ```

use vitlm::analysis::amplification_identity_check;
use vitlm::data::generate;
use vitlm::io::mock_llm;
use vitlm::model::{Arm, Model, ModelConfig};
use vitlm::Tensor;

fn main() -> vitlm::Result<()> {
    let c = ModelConfig::default().with_arm(Arm::PlusLlm);
    let data = generate(4, 20, 4, 32)?;
    let images: Vec<Tensor<f64>> = data.train.iter().map(|s| s.image.cast()).collect();

    for seed in 0..4 {
        let blocks = mock_llm::<f64>(seed, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 2)?;
        let cfg = ModelConfig { n_llm_blocks: 2, ..c.clone() };
        let lin = Model::build(&cfg, Some(blocks), seed)?.linearized_stage()?;
        let worst = images
            .iter()
            .map(|img| amplification_identity_check(&lin, img))
            .collect::<vitlm::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!("seed {seed}: max residual over {} images {worst:.2e}", images.len());
    }

    // f32 model: the residual reflects single-precision rounding only.
    let blocks = mock_llm::<f32>(0, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1)?;
    let lin = Model::build(&c, Some(blocks), 0)?.linearized_stage()?;
    let r = amplification_identity_check(&lin, &data.train[0].image)?;
    println!("f32 model: residual {r:.2e}");
    Ok(())
}
