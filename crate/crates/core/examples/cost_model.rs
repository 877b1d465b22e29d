//! Communication and memory accounting for data-parallel training against
//! parallel low-rank heads.

use lte_lab::costmodel::{cost_report, CostInputs};

fn main() -> lte_lab::Result<()> {
    let inputs = CostInputs::new(22_900_000, 1_000_000, 8, 8, 10, 0.25)?;
    print!("{}", cost_report(&inputs)?.to_text(Some(2.0)));
    println!();
    for t in [1, 10, 100] {
        let r = cost_report(&CostInputs::new(22_900_000, 1_000_000, 8, 8, t, 0.25)?)?;
        println!(
            "T={t:<4} all-reduce ratio ddp/lte = {:.1}",
            r.comm_allreduce_ddp / r.comm_allreduce_lte
        );
    }
    Ok(())
}
