//! Finite-difference check of every forward mode on a small ReLU network.
//! A step that moves a pre-activation across zero breaks the comparison, so
//! the smallest |pre-activation| is printed alongside.

use lte_lab::layers::{LoraHead, LoraLinear};
use lte_lab::network::{
    fd_check_probes, mode_parameters, Activation, Batch, ForwardMode, LossKind, Network, Stencil,
    Targets,
};
use lte_lab::{Matrix, RandomSource};

fn main() -> lte_lab::Result<()> {
    let mut rng = RandomSource::new(3);
    let dims = [5, 6, 4];
    let layers = dims
        .windows(2)
        .map(|d| {
            let fan_in = (d[0] as f64).sqrt();
            let heads = (0..2)
                .map(|_| LoraHead {
                    a: rng.normal_matrix(2, d[0]).scale(1.0 / fan_in),
                    b: rng.normal_matrix(d[1], 2).scale(0.3),
                })
                .collect();
            LoraLinear::from_parts(
                rng.normal_matrix(d[1], d[0]).scale(1.0 / fan_in),
                heads,
                2.0,
            )
        })
        .collect::<lte_lab::Result<Vec<_>>>()?;
    let net = Network::new(
        layers,
        vec![Activation::Relu],
        LossKind::SoftmaxCrossEntropy,
    )?;
    let batch = Batch {
        inputs: rng.normal_matrix(5, 8),
        targets: Targets::Classes((0..8).map(|i| i % 4).collect()),
    };
    let corrections: Vec<Matrix> = dims
        .windows(2)
        .map(|d| rng.normal_matrix(d[1], d[0]).scale(0.1))
        .collect();
    let modes = [
        ("full weights", ForwardMode::FullWeights),
        ("single head 1", ForwardMode::SingleHead(1)),
        ("multi-head", ForwardMode::MultiHead),
        (
            "worker view 0",
            ForwardMode::WorkerView {
                head: 0,
                corrections: None,
            },
        ),
        (
            "worker view 1 + V",
            ForwardMode::WorkerView {
                head: 1,
                corrections: Some(&corrections),
            },
        ),
    ];
    for (name, mode) in modes {
        let cache = net.forward(&batch.inputs, mode)?;
        let kink = cache.pre_activations[0]
            .as_slice()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        println!("{name} (min |pre-activation| {kink:.1e})");
        let n = mode_parameters(&net, mode).len();
        for (stencil, step) in [
            (Stencil::Central, 1e-6),
            (Stencil::Central, 1e-4),
            (Stencil::Richardson, 1e-3),
        ] {
            let rep = fd_check_probes(&net, &batch, mode, step, stencil, n, &mut rng)?;
            println!(
                "  {stencil:?} h={step:e}: max rel err {:.2e} over {} params",
                rep.error(),
                rep.probes
            );
        }
    }
    Ok(())
}
