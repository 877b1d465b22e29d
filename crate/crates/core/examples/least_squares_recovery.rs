//! A rank-4 adapter that is merged and re-drawn every T steps recovers a
//! full-rank least-squares solution; without merges it plateaus.

use lte_lab::lte::{run_lora, run_lte, MergePolicy, RunConfig};
use lte_lab::optim::OptimizerConfig;
use lte_lab::InitScheme;

fn config() -> RunConfig {
    let mut c = RunConfig::least_squares(32, 32, 32, 1, 4, OptimizerConfig::Sgd { lr: 0.2 });
    c.init = InitScheme::xavier();
    c.batch_size = 64;
    c.steps = 4000;
    c.eval_interval = Some(10);
    c.snapshot_interval = Some(1000);
    c.analysis = false;
    c
}

fn main() -> lte_lab::Result<()> {
    let plateau = run_lora(&config())?.trajectory;
    println!(
        "no merges       final loss {:.3e}",
        plateau.final_eval_loss().unwrap()
    );
    for t in [1, 10, 100] {
        let mut c = config();
        c.policy = MergePolicy {
            period: t,
            reset_a: true,
            ..MergePolicy::default()
        };
        let run = run_lte(&c)?.trajectory;
        println!(
            "merge every {t:<3} final loss {:.3e}, reached 1e-4 at step {:?}",
            run.final_eval_loss().unwrap(),
            run.steps_to_loss(1e-4)
        );
    }
    Ok(())
}
