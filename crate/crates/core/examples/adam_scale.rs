//! Adam ignores a constant gradient scale when eps = 0, SGD does not.

use lte_lab::optim::{adamw_step, sgd_step, AdamConfig, AdamState};
use lte_lab::{Matrix, RandomSource};

fn adam_trajectory(
    eps: f64,
    scale: f64,
    grads: &[Matrix],
    start: &Matrix,
) -> lte_lab::Result<Matrix> {
    let cfg = AdamConfig {
        eps,
        weight_decay: 0.0,
        ..AdamConfig::new(1e-3)
    };
    let mut p = start.clone();
    let mut state = AdamState::new(p.rows(), p.cols());
    for g in grads {
        adamw_step(&mut p, &g.scale(scale), &mut state, &cfg)?;
    }
    Ok(p)
}

fn main() -> lte_lab::Result<()> {
    let mut rng = RandomSource::new(1);
    let start = rng.normal_matrix(3, 3);
    let grads: Vec<Matrix> = (0..50).map(|_| rng.normal_matrix(3, 3)).collect();
    let tiny: Vec<Matrix> = grads.iter().map(|g| g.scale(1e-8)).collect();
    for s in [2.0, 64.0, 1024.0] {
        let no_eps = adam_trajectory(0.0, s, &grads, &start)?
            .sub(&adam_trajectory(0.0, 1.0, &grads, &start)?)?;
        let eps = adam_trajectory(1e-8, s, &tiny, &start)?
            .sub(&adam_trajectory(1e-8, 1.0, &tiny, &start)?)?;
        let mut plain = start.clone();
        let mut scaled = start.clone();
        sgd_step(&mut plain, &grads[0], 0.01)?;
        sgd_step(&mut scaled, &grads[0].scale(s), 0.01)?;
        let ratio = scaled.sub(&start)?.frobenius_norm() / plain.sub(&start)?.frobenius_norm();
        println!(
            "s={s:<6} adam eps=0 gap {:.1e}  adam eps=1e-8 gap {:.1e}  sgd step ratio {ratio}",
            no_eps.max_abs(),
            eps.max_abs()
        );
    }
    Ok(())
}
