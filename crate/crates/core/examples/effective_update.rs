//! Checks the closed-form effective update of one LoRA step against the
//! actual weight change, under both sign readings of the second-order term.

use lte_lab::analysis::{verify_effective_update, SignConvention};
use lte_lab::data::gen_least_squares;
use lte_lab::RandomSource;

fn main() -> lte_lab::Result<()> {
    let mut rng = RandomSource::new(5);
    let task = gen_least_squares(6, 8, 6, &mut rng)?;
    let batch = task.sample_batch(32, &mut rng)?;
    let a = rng.normal_matrix(2, 8).scale(0.3);
    let b = rng.normal_matrix(6, 2).scale(0.3);
    let w = rng.normal_matrix(6, 8).scale(0.1);
    let etas = [1e-1, 1e-2, 1e-3, 1e-4];
    let report = verify_effective_update(&w, &a, &b, &batch, 2.0, &etas)?;
    println!("eta        |dW|        first-order residual   full residual");
    for conv in SignConvention::ALL {
        let res = report.residuals(conv);
        println!("-- {conv:?}");
        for (i, eta) in etas.iter().enumerate() {
            println!(
                "{eta:<8e}  {:.3e}   {:.3e}              {:.3e}",
                report.actual_norms[i], res.first_order[i], res.full[i]
            );
        }
        println!("decade ratios {:?}", res.first_order_ratios());
    }
    println!("confirmed: {:?}", report.confirmed);
    Ok(())
}
