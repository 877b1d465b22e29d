//! LTE with exact merges at T = 1 tracks multi-head LoRA step for step; longer
//! merge periods drift further away.

use lte_lab::analysis::trajectory_deviation;
use lte_lab::lte::{run_lte, run_mhlora, MergePolicy, RunConfig};
use lte_lab::optim::OptimizerConfig;

fn main() -> lte_lab::Result<()> {
    let mut cfg = RunConfig::least_squares(16, 16, 16, 4, 2, OptimizerConfig::Sgd { lr: 0.1 });
    cfg.steps = 200;
    cfg.batch_size = 64;
    cfg.snapshot_interval = Some(50);
    cfg.analysis = false;
    let reference = run_mhlora(&cfg)?.trajectory;
    for t in [1, 5, 25] {
        cfg.policy = MergePolicy::exact(t);
        let lte = run_lte(&cfg)?.trajectory;
        let dev = trajectory_deviation(&lte, &reference)?;
        let shown: Vec<String> = dev
            .iter()
            .map(|p| format!("{}:{:.2e}", p.step, p.total))
            .collect();
        println!("T={t:<3} deviation by step {}", shown.join("  "));
    }
    Ok(())
}
