//! Exports stand-in language-model blocks in an `[out, in]` layout under
//! foreign tensor names, then imports one of them through a manifest and
//! inserts it into a model.
//!
//! ```text
//! cargo run --release --example import_weights
//! ```

use vitlm::blocks::{Activation, Variant};
use vitlm::io::{import_block, mock_llm, ImportManifest, Layout, TensorContainer};
use vitlm::model::{Arm, Model, ModelConfig};
use vitlm::Tensor;

fn main() -> vitlm::Result<()> {
    let (dim, heads, hidden) = (96, 4, 256);
    let blocks = mock_llm::<f32>(11, dim, heads, hidden, Variant::Llama, 3)?;

    // Write them the way an exporter might: transposed, with its own names.
    let rename = |field: &str| match field {
        "attn.wq" => "attention.q_proj.weight",
        "attn.wk" => "attention.k_proj.weight",
        "attn.wv" => "attention.v_proj.weight",
        "attn.wo" => "attention.o_proj.weight",
        "ffn.gate" => "mlp.gate_proj.weight",
        "ffn.up" => "mlp.up_proj.weight",
        "ffn.down" => "mlp.down_proj.weight",
        "norm1.weight" => "input_layernorm.weight",
        _ => "post_attention_layernorm.weight",
    };
    let mut container = TensorContainer::new();
    for (i, b) in blocks.iter().enumerate() {
        for (field, t) in b.params() {
            let t: Tensor<f32> = if t.rank() == 2 { t.transpose()? } else { t.clone() };
            container.push_tensor(format!("model.layers.{i}.{}", rename(field)), &t)?;
        }
    }
    let path = std::env::temp_dir().join("vitlm_foreign_blocks.fvtw");
    container.save(&path)?;

    let manifest = ImportManifest {
        source: "exported-llama".into(),
        block_index: 2,
        variant: Variant::Llama,
        n_heads: heads,
        activation: Activation::Gelu,
        layout: Layout::OutIn,
        mapping: Variant::Llama
            .field_names()
            .iter()
            .map(|f| (f.to_string(), format!("model.layers.{{block}}.{}", rename(f))))
            .collect(),
    };
    println!("manifest:\n{}", manifest.to_text());
    assert_eq!(ImportManifest::parse(&manifest.to_text())?, manifest);

    let loaded = TensorContainer::load(&path)?;
    let block = import_block::<f32>(&loaded, &manifest)?;
    let same = block.params().zip(blocks[2].params()).all(|((_, a), (_, b))| a.data() == b.data());
    println!("block 2 imported: dim {}, hidden {}, frozen {}, bitwise equal {same}", block.dim, block.hidden, block.is_frozen());

    let model = Model::build(&ModelConfig::default().with_arm(Arm::PlusLlm), Some(vec![block]), 0)?;
    println!(
        "model with the imported block: {} trainable, {} frozen (llm_dim now {})",
        model.trainable_count(),
        model.frozen_count(),
        model.config.llm_dim
    );
    Ok(())
}
