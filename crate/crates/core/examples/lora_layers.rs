//! Single-head, multi-head and worker-view forwards of one LoRA layer, and a
//! merge that leaves the multi-head function unchanged.

use lte_lab::layers::LoraLinear;
use lte_lab::{InitScheme, RandomSource};

fn main() -> lte_lab::Result<()> {
    let rng = RandomSource::new(42);
    let mut layer = LoraLinear::new(rng.split(0).normal_matrix(6, 5), 2, 4.0, 3)?;
    layer.init_heads(InitScheme::default(), &rng.split(1));
    // Fresh heads have B = 0; give them something to contribute.
    for h in 0..layer.num_heads() {
        layer.head_mut(h).b = rng.split(10 + h as u64).normal_matrix(6, 2).scale(0.1);
    }
    let x = rng.split(2).normal_matrix(5, 4);
    let base = layer.weight().matmul(&x)?;
    let single = layer.lora_forward(0, &x)?;
    let multi = layer.mhlora_forward(&x)?;
    println!("scale s = alpha / r = {}", layer.scale());
    println!(
        "|single - Wx|   = {:.4}",
        single.sub(&base)?.frobenius_norm()
    );
    println!(
        "|multi - Wx|    = {:.4}",
        multi.sub(&base)?.frobenius_norm()
    );
    for h in 0..layer.num_heads() {
        let view = layer.worker_view_forward(h, &x)?;
        println!(
            "|view {h} - Wx|  = {:.4}",
            view.sub(&base)?.frobenius_norm()
        );
    }

    let merged = layer.effective_weight();
    *layer.weight_mut() = merged;
    for h in 0..layer.num_heads() {
        layer.head_mut(h).b = layer.head(h).b.scale(0.0);
    }
    let after = layer.weight().matmul(&x)?;
    println!(
        "merge + reset B changes the output by {:.2e}",
        after.sub(&multi)?.max_abs()
    );
    Ok(())
}
