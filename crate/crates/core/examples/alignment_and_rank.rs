//! Head alignment and update rank: parallel heads diverge into different
//! subspaces, so their merged updates have higher rank than any single head.

use lte_lab::analysis::update_rank_trace;
use lte_lab::lte::{run_lte, MergePolicy, RunConfig};
use lte_lab::optim::OptimizerConfig;

fn main() -> lte_lab::Result<()> {
    let mut cfg = RunConfig::least_squares(32, 32, 32, 8, 4, OptimizerConfig::Sgd { lr: 0.2 });
    cfg.policy = MergePolicy::averaged(10);
    cfg.batch_size = 256;
    cfg.steps = 2000;
    cfg.snapshot_interval = Some(250);
    cfg.record_updates = true;
    let run = run_lte(&cfg)?.trajectory;
    println!(
        "{:>6} {:>10} {:>12} {:>12} {:>12}",
        "step", "loss", "change rank", "cosine", "grassman"
    );
    for s in run.snapshots.iter().filter(|s| s.step > 0) {
        let loss = run
            .evals
            .iter()
            .rev()
            .find(|e| e.step <= s.step)
            .map_or(f64::NAN, |e| e.loss);
        println!(
            "{:>6} {loss:>10.3e} {:>12.2} {:>12.4} {:>12.4}",
            s.step,
            s.change_rank().unwrap_or(f64::NAN),
            s.mean_cosine().unwrap_or(f64::NAN),
            s.mean_grassman().unwrap_or(f64::NAN)
        );
    }
    let ranks: Vec<f64> = update_rank_trace(&run)
        .iter()
        .filter_map(|p| p.update_rank)
        .collect();
    let mean = ranks.iter().sum::<f64>() / ranks.len().max(1) as f64;
    println!(
        "mean effective rank of merged updates: {mean:.2} (single head bound: {})",
        cfg.rank
    );
    Ok(())
}
