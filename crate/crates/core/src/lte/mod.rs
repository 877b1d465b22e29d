//! Parallel low-rank training with periodic merges.
//!
//! Each worker owns one head per layer, its own optimizer state and its own
//! data stream. Between merges a worker sees `W + (s/N) B_h A_h` (minus its
//! correction `(s/N) V_h` when exact correction is on) and never touches `W`
//! or other heads. A merge is a synchronous barrier that folds the averaged
//! head contributions into `W`, summing heads in index order so results do
//! not depend on worker scheduling.

mod config;
mod run;

pub use config::{DatasetSpec, Mode, RunConfig};
pub use run::{
    run, run_full, run_lora, run_lte, run_mhlora, EvalPoint, LayerSnapshot, MergeSummary,
    RunOutcome, Snapshot, StepRecord, Trajectory,
};

use serde::{Deserialize, Serialize};

use crate::layers::LayerGradients;
use crate::network::{Batch, ForwardMode, Network};
use crate::numerics::{InitScheme, Matrix, RandomSource};
use crate::optim::{OptimizerConfig, ParamState};
use crate::{Error, Result};

fn default_period() -> u64 {
    10
}
fn default_true() -> bool {
    true
}

/// When and how workers synchronize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePolicy {
    /// Local steps between merges (`T`).
    #[serde(default = "default_period")]
    pub period: u64,
    /// Zero every `B` after merging.
    #[serde(default = "default_true")]
    pub reset_b: bool,
    /// Re-draw every `A` after merging; `B` is zeroed with it.
    #[serde(default)]
    pub reset_a: bool,
    /// Zero optimizer moments after merging.
    #[serde(default)]
    pub reset_opt: bool,
    /// Keep heads across merges and subtract each worker's last merged
    /// contribution `V` from its view.
    #[serde(default)]
    pub exact_correction: bool,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy {
            period: default_period(),
            reset_b: true,
            reset_a: false,
            reset_opt: false,
            exact_correction: false,
        }
    }
}

impl MergePolicy {
    /// Exact correction with heads and optimizer states kept across merges.
    pub fn exact(period: u64) -> Self {
        MergePolicy {
            period,
            reset_b: false,
            reset_a: false,
            reset_opt: false,
            exact_correction: true,
        }
    }

    /// Plain averaging with `B` reset after each merge.
    pub fn averaged(period: u64) -> Self {
        MergePolicy {
            period,
            ..MergePolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::config("policy.period", "must be at least 1"));
        }
        if self.exact_correction && (self.reset_b || self.reset_a) {
            return Err(Error::config(
                "policy.exact_correction",
                "exact correction reuses heads; reset_b and reset_a must be false",
            ));
        }
        Ok(())
    }
}

/// One worker: its head index, optimizer states, private streams and
/// correction matrices.
#[derive(Clone, Debug)]
pub struct WorkerState {
    pub head: usize,
    /// `(A, B)` optimizer state per layer.
    pub optim: Vec<(ParamState, ParamState)>,
    pub stream: RandomSource,
    pub reinit_stream: RandomSource,
    /// `V` per layer; all-zero unless exact correction is active.
    pub correction: Vec<Matrix>,
    /// Local steps since the last merge.
    pub local_steps: u64,
}

impl WorkerState {
    pub fn new(
        net: &Network,
        head: usize,
        optimizer: &OptimizerConfig,
        stream: RandomSource,
        reinit_stream: RandomSource,
    ) -> Self {
        let optim = net
            .layers()
            .iter()
            .map(|l| {
                let h = l.head(head);
                (
                    optimizer.new_state(h.a.rows(), h.a.cols()),
                    optimizer.new_state(h.b.rows(), h.b.cols()),
                )
            })
            .collect();
        let correction = net
            .layers()
            .iter()
            .map(|l| Matrix::zeros(l.shape().0, l.shape().1))
            .collect();
        WorkerState {
            head,
            optim,
            stream,
            reinit_stream,
            correction,
            local_steps: 0,
        }
    }

    fn mode<'a>(&'a self, exact: bool) -> ForwardMode<'a> {
        ForwardMode::WorkerView {
            head: self.head,
            corrections: exact.then_some(self.correction.as_slice()),
        }
    }
}

/// Loss and head gradients of one worker on `batch`; read-only on `net`.
pub fn worker_gradients(
    net: &Network,
    worker: &WorkerState,
    batch: &Batch,
    exact: bool,
) -> Result<(f64, Vec<LayerGradients>)> {
    net.loss_and_grad(batch, worker.mode(exact))
}

/// Applies a worker's gradients to its own head.
pub fn apply_worker_update(
    net: &mut Network,
    worker: &mut WorkerState,
    grads: &[LayerGradients],
    optimizer: &OptimizerConfig,
) -> Result<()> {
    for ((layer, g), (state_a, state_b)) in net
        .layers_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut worker.optim)
    {
        let hg = g.head(worker.head).ok_or_else(|| {
            Error::InvalidArgument(format!("missing gradient for head {}", worker.head))
        })?;
        let head = layer.head_mut(worker.head);
        state_a.step(&mut head.a, &hg.a, optimizer)?;
        state_b.step(&mut head.b, &hg.b, optimizer)?;
    }
    worker.local_steps += 1;
    Ok(())
}

/// One optimizer step on the worker's head; `W` and other heads are left
/// untouched.
pub fn local_step(
    net: &mut Network,
    worker: &mut WorkerState,
    batch: &Batch,
    optimizer: &OptimizerConfig,
    exact: bool,
) -> Result<f64> {
    let (loss, grads) = worker_gradients(net, worker, batch, exact)?;
    apply_worker_update(net, worker, &grads, optimizer)?;
    Ok(loss)
}

/// What a merge added to the base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub step: u64,
    pub merge_id: u64,
    /// `Δ = (1/N) Σ_n δ_n` per layer.
    pub delta: Vec<Matrix>,
    /// `δ_n = s (B_n A_n − V_n)` indexed `[worker][layer]`.
    pub worker_deltas: Vec<Vec<Matrix>>,
}

/// Folds the workers' heads into `W`.
///
/// Averaged mode adds `(s/N) Σ B_n A_n` and then applies the policy resets
/// (`reset_a` re-draws `A` from `init` using each worker's reinit stream).
/// Exact mode adds `(s/N) Σ (B_n A_n − V_n)` and sets `V_n ← B_n A_n`,
/// keeping parameters and optimizer states.
pub fn merge(
    net: &mut Network,
    workers: &mut [WorkerState],
    policy: &MergePolicy,
    init: InitScheme,
    step: u64,
    merge_id: u64,
) -> Result<UpdateRecord> {
    let n = workers.len();
    if n != net.num_heads() {
        return Err(Error::InvalidArgument(format!(
            "{n} workers for {} heads",
            net.num_heads()
        )));
    }
    if let Some(first) = workers.first() {
        if let Some(w) = workers.iter().find(|w| w.local_steps != first.local_steps) {
            return Err(Error::InvalidArgument(format!(
                "worker {} ran {} local steps, worker {} ran {}",
                w.head, w.local_steps, first.head, first.local_steps
            )));
        }
    }
    let mut worker_deltas: Vec<Vec<Matrix>> = vec![Vec::with_capacity(net.layers().len()); n];
    let mut delta = Vec::with_capacity(net.layers().len());
    for (l, layer) in net.layers_mut().iter_mut().enumerate() {
        let s = layer.scale();
        let mut sum = Matrix::zeros(layer.shape().0, layer.shape().1);
        for (w, worker) in workers.iter().enumerate() {
            let mut d = layer.head(worker.head).product();
            if policy.exact_correction {
                d = d.sub(&worker.correction[l])?;
            }
            d.scale_in_place(s);
            sum.axpy(1.0, &d)?;
            worker_deltas[w].push(d);
        }
        sum.scale_in_place(1.0 / n as f64);
        layer.weight_mut().axpy(1.0, &sum)?;
        delta.push(sum);

        for worker in workers.iter_mut() {
            if policy.exact_correction {
                worker.correction[l] = layer.head(worker.head).product();
                continue;
            }
            if policy.reset_a {
                layer.reinit_head(worker.head, init, &mut worker.reinit_stream);
            } else if policy.reset_b {
                layer.head_mut(worker.head).b.fill(0.0);
            }
        }
    }
    for worker in workers.iter_mut() {
        if policy.reset_opt && !policy.exact_correction {
            for (a, b) in &mut worker.optim {
                a.reset();
                b.reset();
            }
        }
        worker.local_steps = 0;
    }
    Ok(UpdateRecord {
        step,
        merge_id,
        delta,
        worker_deltas,
    })
}

/// The weights a merge would produce right now: `W + (s/N) Σ (B_n A_n − V_n)`.
pub fn merged_view_weights(
    net: &Network,
    workers: &[WorkerState],
    exact: bool,
) -> Result<Vec<Matrix>> {
    let mut out = net.effective_weights();
    if exact {
        for (l, (w, layer)) in out.iter_mut().zip(net.layers()).enumerate() {
            let c = layer.scale() / layer.num_heads() as f64;
            for worker in workers {
                w.axpy(-c, &worker.correction[l])?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LoraLinear;
    use crate::network::{Activation, LossKind, Targets};
    use crate::optim::AdamConfig;

    fn net_with_heads(
        seed: u64,
        m: usize,
        n: usize,
        r: usize,
        heads: usize,
        alpha: f64,
    ) -> Network {
        let mut rng = RandomSource::new(seed);
        let mut layer = LoraLinear::new(rng.normal_matrix(m, n), r, alpha, heads).unwrap();
        for h in 0..heads {
            layer.head_mut(h).a = rng.normal_matrix(r, n);
            layer.head_mut(h).b = rng.normal_matrix(m, r);
        }
        Network::new(vec![layer], vec![], LossKind::Mse).unwrap()
    }

    fn workers(net: &Network, opt: &OptimizerConfig) -> Vec<WorkerState> {
        let root = RandomSource::new(77);
        (0..net.num_heads())
            .map(|h| {
                WorkerState::new(
                    net,
                    h,
                    opt,
                    root.split(h as u64),
                    root.split(100 + h as u64),
                )
            })
            .collect()
    }

    #[test]
    fn policy_validation() {
        assert!(MergePolicy::default().validate().is_ok());
        assert!(MergePolicy::exact(1).validate().is_ok());
        let bad = MergePolicy {
            exact_correction: true,
            ..MergePolicy::default()
        };
        assert!(bad.validate().is_err());
        assert!(MergePolicy {
            period: 0,
            ..MergePolicy::default()
        }
        .validate()
        .is_err());
        let p: MergePolicy = serde_json::from_str("{}").unwrap();
        assert_eq!(p, MergePolicy::default());
    }

    #[test]
    fn merge_of_zero_heads_is_a_no_op() {
        let mut net = net_with_heads(1, 3, 3, 1, 2, 1.0);
        for h in 0..2 {
            net.layers_mut()[0].head_mut(h).b.fill(0.0);
        }
        let w0 = net.layers()[0].weight().clone();
        let opt = OptimizerConfig::Sgd { lr: 0.1 };
        let mut ws = workers(&net, &opt);
        let rec = merge(
            &mut net,
            &mut ws,
            &MergePolicy::default(),
            InitScheme::default(),
            0,
            0,
        )
        .unwrap();
        assert_eq!(net.layers()[0].weight(), &w0);
        assert!(rec.delta[0].is_zero());
    }

    #[test]
    fn merge_hand_case() {
        let mut layer = LoraLinear::new(Matrix::zeros(1, 1), 1, 1.0, 2).unwrap();
        layer.head_mut(0).a = Matrix::from_rows(&[[1.0]]);
        layer.head_mut(0).b = Matrix::from_rows(&[[1.0]]);
        layer.head_mut(1).a = Matrix::from_rows(&[[1.0]]);
        layer.head_mut(1).b = Matrix::from_rows(&[[3.0]]);
        let mut net = Network::new(vec![layer], vec![], LossKind::Mse).unwrap();
        let opt = OptimizerConfig::Sgd { lr: 0.1 };
        let mut ws = workers(&net, &opt);
        let rec = merge(
            &mut net,
            &mut ws,
            &MergePolicy::default(),
            InitScheme::default(),
            1,
            0,
        )
        .unwrap();
        assert_eq!(net.layers()[0].weight().get(0, 0), 2.0);
        assert_eq!(rec.worker_deltas[1][0].get(0, 0), 3.0);
        assert!(net.layers()[0].heads().iter().all(|h| h.b.is_zero()));
        // A survives the default policy.
        assert_eq!(net.layers()[0].head(1).a.get(0, 0), 1.0);
    }

    #[test]
    fn merge_preserves_the_multi_head_function() {
        let mut net = net_with_heads(2, 5, 4, 2, 3, 6.0);
        let x = RandomSource::new(3).normal_matrix(4, 16);
        let before = net
            .forward(&x, ForwardMode::MultiHead)
            .unwrap()
            .output()
            .clone();
        let opt = OptimizerConfig::Sgd { lr: 0.1 };
        let mut ws = workers(&net, &opt);
        merge(
            &mut net,
            &mut ws,
            &MergePolicy::default(),
            InitScheme::default(),
            1,
            0,
        )
        .unwrap();
        let after = net
            .forward(&x, ForwardMode::FullWeights)
            .unwrap()
            .output()
            .clone();
        assert!(before.max_abs_diff(&after).unwrap() <= 1e-12);
    }

    #[test]
    fn exact_merge_records_corrections() {
        let mut net = net_with_heads(4, 3, 3, 1, 2, 2.0);
        let heads_before: Vec<_> = net.layers()[0].heads().to_vec();
        let opt = OptimizerConfig::Sgd { lr: 0.1 };
        let mut ws = workers(&net, &opt);
        let eff_before = merged_view_weights(&net, &ws, true).unwrap();
        merge(
            &mut net,
            &mut ws,
            &MergePolicy::exact(1),
            InitScheme::default(),
            1,
            0,
        )
        .unwrap();
        assert_eq!(net.layers()[0].heads(), heads_before.as_slice());
        for (h, w) in ws.iter().enumerate() {
            assert_eq!(w.correction[0], heads_before[h].product());
        }
        let eff_after = merged_view_weights(&net, &ws, true).unwrap();
        assert!(eff_before[0].max_abs_diff(&eff_after[0]).unwrap() < 1e-12);
        // A second merge without local progress adds nothing.
        let w1 = net.layers()[0].weight().clone();
        merge(
            &mut net,
            &mut ws,
            &MergePolicy::exact(1),
            InitScheme::default(),
            2,
            1,
        )
        .unwrap();
        assert!(net.layers()[0].weight().max_abs_diff(&w1).unwrap() < 1e-15);
    }

    #[test]
    fn reset_a_and_optimizer() {
        let mut net = net_with_heads(5, 4, 4, 2, 2, 2.0);
        let opt = OptimizerConfig::Adamw(AdamConfig::new(0.01));
        let mut ws = workers(&net, &opt);
        let batch = Batch {
            inputs: RandomSource::new(6).normal_matrix(4, 3),
            targets: Targets::Dense(RandomSource::new(7).normal_matrix(4, 3)),
        };
        for w in ws.iter_mut() {
            local_step(&mut net, w, &batch, &opt, false).unwrap();
        }
        let a_before = net.layers()[0].head(0).a.clone();
        let policy = MergePolicy {
            reset_a: true,
            reset_opt: true,
            ..MergePolicy::default()
        };
        merge(
            &mut net,
            &mut ws,
            &policy,
            InitScheme::semi_orthogonal(),
            1,
            0,
        )
        .unwrap();
        assert_ne!(net.layers()[0].head(0).a, a_before);
        assert!(net.layers()[0].head(0).b.is_zero());
        match &ws[0].optim[0].0 {
            ParamState::Adam(s) => assert_eq!(s.step_count, 0),
            ParamState::Sgd => panic!("expected adam state"),
        }
    }

    #[test]
    fn uneven_local_steps_are_rejected() {
        let mut net = net_with_heads(8, 3, 3, 1, 2, 1.0);
        let opt = OptimizerConfig::Sgd { lr: 0.01 };
        let mut ws = workers(&net, &opt);
        let batch = Batch {
            inputs: RandomSource::new(9).normal_matrix(3, 2),
            targets: Targets::Dense(Matrix::zeros(3, 2)),
        };
        local_step(&mut net, &mut ws[0], &batch, &opt, false).unwrap();
        assert!(merge(
            &mut net,
            &mut ws,
            &MergePolicy::default(),
            InitScheme::default(),
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn local_step_only_touches_own_head() {
        let mut net = net_with_heads(10, 4, 5, 2, 3, 4.0);
        let opt = OptimizerConfig::Sgd { lr: 0.05 };
        let mut ws = workers(&net, &opt);
        let batch = Batch {
            inputs: RandomSource::new(11).normal_matrix(5, 6),
            targets: Targets::Dense(RandomSource::new(12).normal_matrix(4, 6)),
        };
        let before = net.clone();
        local_step(&mut net, &mut ws[1], &batch, &opt, false).unwrap();
        let (l0, l1) = (&before.layers()[0], &net.layers()[0]);
        assert_eq!(l0.weight().as_slice(), l1.weight().as_slice());
        assert_eq!(l0.head(0), l1.head(0));
        assert_eq!(l0.head(2), l1.head(2));
        assert_ne!(l0.head(1), l1.head(1));
    }

    #[test]
    fn perfect_fit_leaves_sgd_parameters_unchanged() {
        let mut net = net_with_heads(13, 3, 3, 1, 2, 1.0);
        let opt = OptimizerConfig::Sgd { lr: 0.5 };
        let mut ws = workers(&net, &opt);
        let x = RandomSource::new(14).normal_matrix(3, 4);
        let y = net.forward(&x, ws[0].mode(false)).unwrap().output().clone();
        let batch = Batch {
            inputs: x,
            targets: Targets::Dense(y),
        };
        let before = net.clone();
        let loss = local_step(&mut net, &mut ws[0], &batch, &opt, false).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(before, net);
    }

    #[test]
    fn local_steps_decrease_loss_on_least_squares() {
        let task = crate::data::gen_least_squares(6, 6, 6, &mut RandomSource::new(15)).unwrap();
        let mut layer = LoraLinear::new(Matrix::zeros(6, 6), 2, 2.0, 1).unwrap();
        layer.init_heads(InitScheme::semi_orthogonal(), &RandomSource::new(16));
        let mut net = Network::new(vec![layer], vec![], LossKind::Mse).unwrap();
        let opt = OptimizerConfig::Sgd { lr: 0.2 };
        let mut ws = workers(&net, &opt);
        let eval = task.sample_batch(256, &mut RandomSource::new(17)).unwrap();
        let start = net.loss(&eval, ForwardMode::MultiHead).unwrap();
        for _ in 0..50 {
            let b = task.sample_batch(32, &mut ws[0].stream).unwrap();
            local_step(&mut net, &mut ws[0], &b, &opt, false).unwrap();
        }
        let end = net.loss(&eval, ForwardMode::MultiHead).unwrap();
        assert!(end < 0.9 * start, "{start} -> {end}");
    }

    #[test]
    fn relu_network_merges_layerwise() {
        let mut rng = RandomSource::new(18);
        let mut l1 = LoraLinear::new(rng.normal_matrix(5, 3), 1, 2.0, 2).unwrap();
        let mut l2 = LoraLinear::new(rng.normal_matrix(2, 5), 1, 2.0, 2).unwrap();
        l1.init_heads(InitScheme::kaiming(), &rng.split(1));
        l2.init_heads(InitScheme::kaiming(), &rng.split(2));
        let mut net = Network::new(vec![l1, l2], vec![Activation::Relu], LossKind::Mse).unwrap();
        let opt = OptimizerConfig::Sgd { lr: 0.1 };
        let mut ws = workers(&net, &opt);
        let batch = Batch {
            inputs: rng.normal_matrix(3, 4),
            targets: Targets::Dense(rng.normal_matrix(2, 4)),
        };
        for w in ws.iter_mut() {
            local_step(&mut net, w, &batch, &opt, false).unwrap();
        }
        let x = rng.normal_matrix(3, 8);
        let before = net
            .forward(&x, ForwardMode::MultiHead)
            .unwrap()
            .output()
            .clone();
        let rec = merge(
            &mut net,
            &mut ws,
            &MergePolicy::default(),
            InitScheme::default(),
            1,
            0,
        )
        .unwrap();
        assert_eq!(rec.delta.len(), 2);
        let after = net
            .forward(&x, ForwardMode::FullWeights)
            .unwrap()
            .output()
            .clone();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-12);
    }
}
