//! Magnitude and frequency activation maps of one traced image, drawn as
//! text, with their invariances demonstrated on the same features.
//!
//! ```text
//! cargo run --release --example activation_maps
//! ```

use vitlm::analysis::{feature_map, magnitude_activation, scale_invariance_probe, ActivationMap, MapKind};
use vitlm::data::{generate, to_token_mask};
use vitlm::io::mock_llm;
use vitlm::model::{Arm, Model, ModelConfig, TracePoint};
use vitlm::no_grad;

fn draw(title: &str, m: &ActivationMap) {
    println!("{title}");
    for r in 0..m.rows {
        let row: String = (0..m.cols).map(|c| [" .", " :", " +", " #"][((m.values[r * m.cols + c] * 3.999) as usize).min(3)]).collect();
        println!("  {row}");
    }
}

fn main() -> vitlm::Result<()> {
    let c = ModelConfig::default().with_arm(Arm::PlusLlm);
    let blocks = mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1)?;
    let model = Model::build(&c, Some(blocks), 0)?;
    let data = generate(1, 10, 4, 32)?;
    let sample = &data.train[1];
    let (_, trace) = no_grad(|| model.forward_traced(&sample.image))?;

    let gt = to_token_mask(&sample.mask, 32, 32, c.patch_size)?;
    let truth = ActivationMap { rows: gt.rows, cols: gt.cols, values: gt.cells.iter().map(|&v| v as f64).collect() };
    draw("ground-truth tokens", &truth);
    for kind in [MapKind::Magnitude, MapKind::Frequency, MapKind::Attention] {
        draw(&format!("{} at l2 (untrained)", kind.name()), &feature_map(&trace, TracePoint::L2, kind)?);
    }

    let z = trace.z_l2.as_ref().expect("stage traced");
    let visual = z.slice(0, 1, z.shape()[0] - 1)?;
    println!("magnitude map unchanged under ×0.01 and ×100: {}", scale_invariance_probe(&visual, 0.01)? && scale_invariance_probe(&visual, 100.0)?);
    let shifted = visual.add_broadcast(&vitlm::Tensor::full(&[visual.shape()[1]], 3.0))?;
    let (a, b) = (magnitude_activation(&visual)?, magnitude_activation(&shifted)?);
    let dev = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("magnitude map under a global shift: max deviation {dev:.1e}");
    Ok(())
}
