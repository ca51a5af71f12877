//! Generates the synthetic shape dataset, writes it to disk and draws one
//! sample of each class next to its token-level mask.
//!
//! ```text
//! cargo run --release --example gen_data [out_dir]
//! ```

use std::path::PathBuf;

use vitlm::data::{generate, to_token_mask, Dataset, SHAPES};

fn main() -> vitlm::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("vitlm_shapes"));
    let data = generate(1, 2500, 4, 32)?;
    data.save(&out)?;
    let back = Dataset::load(&out)?;
    assert_eq!(back, data);
    println!("{} train / {} val written to {}", data.train.len(), data.val.len(), out.display());

    let mut counts = vec![0; data.n_classes];
    data.train.iter().for_each(|s| counts[s.label] += 1);
    println!("train labels per class: {counts:?}");

    for class in 0..data.n_classes {
        let s = data.train.iter().find(|s| s.label == class).expect("every class present");
        let tokens = to_token_mask(&s.mask, 32, 32, 4)?;
        println!("\nclass {class} ({}), {} of 64 tokens on the shape", SHAPES[class], tokens.count());
        let px = s.image.data();
        for y in (0..32).step_by(2) {
            let row: String = (0..32).map(|x| shade(px[y * 32 + x])).collect();
            let cells: String = if y % 4 == 0 {
                (0..8).map(|c| if tokens.cells[(y / 4) * 8 + c] == 1 { '#' } else { '.' }).collect()
            } else {
                String::new()
            };
            println!("  {row}   {cells}");
        }
    }
    Ok(())
}

fn shade(v: f32) -> char {
    [' ', '.', ':', '+', '#'][((v * 4.999) as usize).min(4)]
}
