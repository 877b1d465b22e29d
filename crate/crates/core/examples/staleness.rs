//! Merge period sweep at a fixed step budget: final loss, steps to 1e-4 and
//! the effective rank of the total weight change.

use lte_lab::lte::{run_lte, MergePolicy, RunConfig};
use lte_lab::optim::OptimizerConfig;
use lte_lab::InitScheme;

fn main() -> lte_lab::Result<()> {
    println!(
        "{:>4} {:>12} {:>10} {:>12}",
        "T", "final loss", "to 1e-4", "change rank"
    );
    for t in [1, 5, 10, 25, 50] {
        let mut cfg = RunConfig::least_squares(32, 32, 32, 4, 4, OptimizerConfig::Sgd { lr: 0.1 });
        cfg.init = InitScheme::xavier();
        cfg.policy = MergePolicy {
            period: t,
            reset_a: true,
            ..MergePolicy::default()
        };
        cfg.batch_size = 128;
        cfg.steps = 3000;
        cfg.eval_interval = Some(10);
        cfg.snapshot_interval = Some(3000);
        let run = run_lte(&cfg)?.trajectory;
        let rank = run
            .snapshots
            .last()
            .and_then(|s| s.change_rank())
            .unwrap_or(0.0);
        let reached = run
            .steps_to_loss(1e-4)
            .map_or("-".into(), |s| s.to_string());
        println!(
            "{t:>4} {:>12.3e} {reached:>10} {rank:>12.2}",
            run.final_eval_loss().unwrap()
        );
    }
    Ok(())
}
