use rayon::prelude::*;

use super::config::{DatasetSpec, Mode, RunConfig};
use super::{
    apply_worker_update, merge, merged_view_weights, worker_gradients, UpdateRecord, WorkerState,
};
use crate::analysis::{effective_rank, head_alignment, AlignmentReport};
use crate::data::{gen_least_squares, LeastSquaresTask};
use crate::layers::LoraLinear;
use crate::network::{Batch, ForwardMode, LossKind, Network};
use crate::numerics::{init_matrix, quantize_emulate, Matrix, RandomSource};
use crate::optim::ParamState;
use crate::{Error, Result};

/// Training losses of one step, one entry per worker (or head).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Merges completed before this step.
    pub merge_id: u64,
    pub losses: Vec<f64>,
}

/// Loss of the merged model on the fixed evaluation batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeSummary {
    pub step: u64,
    pub merge_id: u64,
    /// `‖Δ‖_F` per layer.
    pub delta_norms: Vec<f64>,
    /// Effective rank of `Δ` per layer; `None` when analysis is off or `Δ = 0`.
    pub delta_ranks: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSnapshot {
    /// Effective rank of the change in effective weight since step 0.
    pub change_rank: Option<f64>,
    pub weight_rank: Option<f64>,
    /// Effective rank of the most recent merged update.
    pub last_delta_rank: Option<f64>,
    /// Head alignment taken just before the merge at this step.
    pub alignment: Option<AlignmentReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub merge_id: u64,
    /// Effective weight per layer.
    pub weights: Vec<Matrix>,
    /// `Σ_l ‖W_eff,l(t) − W_eff,l(0)‖_F`
    pub weight_deviation: f64,
    /// Empty when analysis is off.
    pub layers: Vec<LayerSnapshot>,
}

impl Snapshot {
    fn layer_mean(&self, f: impl Fn(&LayerSnapshot) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.layers.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Layer-mean effective rank of the cumulative weight change.
    pub fn change_rank(&self) -> Option<f64> {
        self.layer_mean(|l| l.change_rank)
    }

    pub fn mean_cosine(&self) -> Option<f64> {
        self.layer_mean(|l| l.alignment.as_ref().and_then(|a| a.mean_cosine))
    }

    /// Layer mean of the plain pairwise Grassmann mean.
    pub fn mean_grassman(&self) -> Option<f64> {
        self.layer_mean(|l| l.alignment.as_ref().and_then(|a| a.grassman_pair_mean))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub mode: Mode,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
    pub merges: Vec<MergeSummary>,
    pub snapshots: Vec<Snapshot>,
    /// Only filled when `record_updates` is set.
    pub updates: Vec<UpdateRecord>,
    pub initial_weights: Vec<Matrix>,
    /// Samples per step lost to `⌊B/N⌋`.
    pub dropped_samples: usize,
    /// Step at which `stop_at_loss` ended the run.
    pub stopped_at: Option<u64>,
}

impl Trajectory {
    fn new(mode: Mode, initial_weights: Vec<Matrix>, dropped_samples: usize) -> Self {
        Trajectory {
            mode,
            steps: Vec::new(),
            evals: Vec::new(),
            merges: Vec::new(),
            snapshots: Vec::new(),
            updates: Vec::new(),
            initial_weights,
            dropped_samples,
            stopped_at: None,
        }
    }

    pub fn final_eval_loss(&self) -> Option<f64> {
        self.evals.last().map(|e| e.loss)
    }

    /// First evaluated step whose loss is at or below `threshold`.
    pub fn steps_to_loss(&self, threshold: f64) -> Option<u64> {
        self.evals
            .iter()
            .find(|e| e.loss <= threshold)
            .map(|e| e.step)
    }

    pub fn snapshot_at(&self, step: u64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    pub fn final_weights(&self) -> Option<&[Matrix]> {
        self.snapshots.last().map(|s| s.weights.as_slice())
    }
}

/// Final state of a run alongside its trajectory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    /// Base weights are the high-precision master copy.
    pub network: Network,
    /// Workers (or per-head states for the multi-head baseline).
    pub workers: Vec<WorkerState>,
    pub task: LeastSquaresTask,
}

struct Setup {
    root: RandomSource,
    task: LeastSquaresTask,
    net: Network,
    eval: Batch,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let root = RandomSource::new(cfg.seed);
    let DatasetSpec::LeastSquares { m, n, rank } = cfg.dataset;
    let task = gen_least_squares(m, n, rank, &mut root.split_named("task"))?;
    let dims = cfg.dims();
    let base_rng = root.split_named("base");
    let head_rng = root.split_named("heads");
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = match cfg.base_init {
            Some(scheme) => init_matrix(fan_out, fan_in, scheme, &mut base_rng.split(l as u64)),
            None => Matrix::zeros(fan_out, fan_in),
        };
        let mut layer = LoraLinear::new(
            weight,
            cfg.effective_rank(),
            cfg.alpha,
            cfg.effective_heads(),
        )?;
        if cfg.mode != Mode::Full {
            layer.init_heads(cfg.init, &head_rng.split(l as u64));
        }
        layers.push(layer);
    }
    let activations = vec![cfg.activation; dims.len() - 2];
    let net = Network::new(layers, activations, LossKind::Mse)?;
    let eval = task.sample_batch(cfg.eval_batch, &mut root.split_named("eval"))?;
    Ok(Setup {
        root,
        task,
        net,
        eval,
    })
}

fn new_workers(cfg: &RunConfig, net: &Network, root: &RandomSource) -> Vec<WorkerState> {
    let data = root.split_named("data");
    let reinit = root.split_named("reinit");
    (0..net.num_heads())
        .map(|h| {
            WorkerState::new(
                net,
                h,
                &cfg.optimizer,
                data.split(h as u64),
                reinit.split(h as u64),
            )
        })
        .collect()
}

fn rank_or_none(m: &Matrix) -> Result<Option<f64>> {
    match effective_rank(m) {
        Ok(r) => Ok(Some(r)),
        Err(Error::ZeroMatrix) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Handles evaluation, snapshots and early stopping for every run kind.
struct Recorder<'a> {
    cfg: &'a RunConfig,
    eval: Batch,
    traj: Trajectory,
    last_delta: Option<Vec<Matrix>>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, eval: Batch, initial: Vec<Matrix>) -> Self {
        Recorder {
            cfg,
            eval,
            traj: Trajectory::new(cfg.mode, initial, cfg.dropped_samples()),
            last_delta: None,
        }
    }

    fn snapshot_due(&self, step: u64) -> bool {
        step % self.cfg.snapshot_every() == 0
    }

    fn wants_alignment(&self, step: u64, net: &Network) -> bool {
        self.cfg.analysis && step > 0 && net.num_heads() >= 2 && self.snapshot_due(step)
    }

    fn alignment(&self, step: u64, net: &Network) -> Result<Option<Vec<AlignmentReport>>> {
        if !self.wants_alignment(step, net) {
            return Ok(None);
        }
        net.layers()
            .iter()
            .map(head_alignment)
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn record_merge(&mut self, rec: UpdateRecord) -> Result<()> {
        let delta_ranks = if self.cfg.analysis {
            rec.delta
                .iter()
                .map(rank_or_none)
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; rec.delta.len()]
        };
        self.traj.merges.push(MergeSummary {
            step: rec.step,
            merge_id: rec.merge_id,
            delta_norms: rec.delta.iter().map(Matrix::frobenius_norm).collect(),
            delta_ranks,
        });
        self.last_delta = Some(rec.delta.clone());
        if self.cfg.record_updates {
            self.traj.updates.push(rec);
        }
        Ok(())
    }

    /// Records evaluation and snapshot for `step`; returns true when the run
    /// should stop.
    fn observe(
        &mut self,
        step: u64,
        merge_id: u64,
        weights: Vec<Matrix>,
        net: &Network,
        alignment: Option<Vec<AlignmentReport>>,
    ) -> Result<bool> {
        let mut stop = false;
        if step % self.cfg.eval_every() == 0 || step == self.cfg.steps {
            let loss = net.loss_with_weights(&weights, &self.eval)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "evaluation loss diverged at step {step}"
                )));
            }
            self.traj.evals.push(EvalPoint { step, loss });
            stop = self.cfg.stop_at_loss.is_some_and(|t| loss <= t);
        }
        if self.snapshot_due(step) || step == self.cfg.steps || stop {
            let mut deviation = 0.0;
            for (w, w0) in weights.iter().zip(&self.traj.initial_weights) {
                deviation += w.sub(w0)?.frobenius_norm();
            }
            let layers = if self.cfg.analysis {
                let mut alignment = alignment.map(|a| a.into_iter());
                let mut out = Vec::with_capacity(weights.len());
                for (l, (w, w0)) in weights.iter().zip(&self.traj.initial_weights).enumerate() {
                    let last_delta_rank = match &self.last_delta {
                        Some(d) => rank_or_none(&d[l])?,
                        None => None,
                    };
                    out.push(LayerSnapshot {
                        change_rank: rank_or_none(&w.sub(w0)?)?,
                        weight_rank: rank_or_none(w)?,
                        last_delta_rank,
                        alignment: alignment.as_mut().and_then(|a| a.next()),
                    });
                }
                out
            } else {
                Vec::new()
            };
            self.traj.snapshots.push(Snapshot {
                step,
                merge_id,
                weights,
                weight_deviation: deviation,
                layers,
            });
        }
        if stop {
            self.traj.stopped_at = Some(step);
        }
        Ok(stop)
    }
}

/// Workers' copy of the base: quantized when requested.
fn refresh_base_view(net: &mut Network, master: &[Matrix], bits: Option<u32>) -> Result<()> {
    if let Some(bits) = bits {
        for (layer, w) in net.layers_mut().iter_mut().zip(master) {
            *layer.weight_mut() = quantize_emulate(w, bits)?;
        }
    }
    Ok(())
}

fn restore_master(net: &mut Network, master: &[Matrix]) {
    for (layer, w) in net.layers_mut().iter_mut().zip(master) {
        *layer.weight_mut() = w.clone();
    }
}

/// Effective weights measured against the master base.
fn master_view(
    net: &Network,
    master: &[Matrix],
    workers: &[WorkerState],
    exact: bool,
) -> Result<Vec<Matrix>> {
    let mut weights = merged_view_weights(net, workers, exact)?;
    for ((w, layer), m) in weights.iter_mut().zip(net.layers()).zip(master) {
        w.axpy(-1.0, layer.weight())?;
        w.axpy(1.0, m)?;
    }
    Ok(weights)
}

fn run_workers(cfg: &RunConfig, merges: bool) -> Result<RunOutcome> {
    let Setup {
        root,
        task,
        mut net,
        eval,
    } = setup(cfg)?;
    let mut workers = new_workers(cfg, &net, &root);
    let exact = cfg.policy.exact_correction;
    let per_worker = cfg.per_worker_batch();
    let mut master = net.base_weights();
    refresh_base_view(&mut net, &master, cfg.quantize_bits)?;

    let mut rec = Recorder::new(cfg, eval, master_view(&net, &master, &workers, exact)?);
    let initial = rec.traj.initial_weights.clone();
    rec.observe(0, 0, initial, &net, None)?;
    let mut merge_id = 0;
    for step in 1..=cfg.steps {
        let results: Vec<Result<(f64, _)>> = workers
            .par_iter_mut()
            .map(|w| {
                let batch = task.sample_batch(per_worker, &mut w.stream)?;
                worker_gradients(&net, w, &batch, exact)
            })
            .collect();
        let mut losses = Vec::with_capacity(workers.len());
        for (w, r) in workers.iter_mut().zip(results) {
            let (loss, grads) = r?;
            apply_worker_update(&mut net, w, &grads, &cfg.optimizer)?;
            losses.push(loss);
        }
        rec.traj.steps.push(StepRecord {
            step,
            merge_id,
            losses,
        });

        let alignment = rec.alignment(step, &net)?;
        if merges && step % cfg.policy.period == 0 {
            restore_master(&mut net, &master);
            let update = merge(
                &mut net,
                &mut workers,
                &cfg.policy,
                cfg.init,
                step,
                merge_id,
            )?;
            merge_id += 1;
            master = net.base_weights();
            refresh_base_view(&mut net, &master, cfg.quantize_bits)?;
            rec.record_merge(update)?;
        }
        let weights = master_view(&net, &master, &workers, exact)?;
        if rec.observe(step, merge_id, weights, &net, alignment)? {
            break;
        }
    }
    restore_master(&mut net, &master);
    Ok(RunOutcome {
        trajectory: rec.traj,
        network: net,
        workers,
        task,
    })
}

/// Parallel workers with periodic merges.
pub fn run_lte(cfg: &RunConfig) -> Result<RunOutcome> {
    run_workers(cfg, true)
}

/// A single head trained with coefficient `s` and never merged.
pub fn run_lora(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Lora;
    run_workers(&cfg, false)
}

/// All heads trained jointly through the multi-head forward; head `h` takes
/// its gradient from shard `h`.
pub fn run_mhlora(cfg: &RunConfig) -> Result<RunOutcome> {
    let Setup {
        root,
        task,
        mut net,
        eval,
    } = setup(cfg)?;
    let mut heads = new_workers(cfg, &net, &root);
    let per_head = cfg.per_worker_batch();
    let master = net.base_weights();
    refresh_base_view(&mut net, &master, cfg.quantize_bits)?;

    let mut rec = Recorder::new(cfg, eval, master_view(&net, &master, &heads, false)?);
    let initial = rec.traj.initial_weights.clone();
    rec.observe(0, 0, initial, &net, None)?;
    for step in 1..=cfg.steps {
        let results: Vec<Result<(f64, _)>> = heads
            .par_iter_mut()
            .map(|h| {
                let batch = task.sample_batch(per_head, &mut h.stream)?;
                net.loss_and_grad(&batch, ForwardMode::MultiHead)
            })
            .collect();
        let mut losses = Vec::with_capacity(heads.len());
        for (h, r) in heads.iter_mut().zip(results) {
            let (loss, grads) = r?;
            apply_worker_update(&mut net, h, &grads, &cfg.optimizer)?;
            losses.push(loss);
        }
        rec.traj.steps.push(StepRecord {
            step,
            merge_id: 0,
            losses,
        });
        let alignment = rec.alignment(step, &net)?;
        let weights = master_view(&net, &master, &heads, false)?;
        if rec.observe(step, 0, weights, &net, alignment)? {
            break;
        }
    }
    restore_master(&mut net, &master);
    Ok(RunOutcome {
        trajectory: rec.traj,
        network: net,
        workers: heads,
        task,
    })
}

/// Trains the base weights directly on batches of size `B`.
pub fn run_full(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Full;
    let Setup {
        root,
        task,
        mut net,
        eval,
    } = setup(&cfg)?;
    let mut stream = root.split_named("data").split(0);
    let mut states: Vec<ParamState> = net
        .layers()
        .iter()
        .map(|l| cfg.optimizer.new_state(l.shape().0, l.shape().1))
        .collect();
    let mut rec = Recorder::new(&cfg, eval, net.effective_weights());
    let initial = rec.traj.initial_weights.clone();
    rec.observe(0, 0, initial, &net, None)?;
    for step in 1..=cfg.steps {
        let batch = task.sample_batch(cfg.batch_size, &mut stream)?;
        let (loss, grads) = net.loss_and_grad(&batch, ForwardMode::FullWeights)?;
        for ((layer, g), state) in net.layers_mut().iter_mut().zip(&grads).zip(&mut states) {
            let gw = g
                .weight
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("missing weight gradient".into()))?;
            state.step(layer.weight_mut(), gw, &cfg.optimizer)?;
        }
        rec.traj.steps.push(StepRecord {
            step,
            merge_id: 0,
            losses: vec![loss],
        });
        let weights = net.effective_weights();
        if rec.observe(step, 0, weights, &net, None)? {
            break;
        }
    }
    Ok(RunOutcome {
        trajectory: rec.traj,
        network: net,
        workers: Vec::new(),
        task,
    })
}

/// Dispatches on `cfg.mode`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    match cfg.mode {
        Mode::Full => run_full(cfg),
        Mode::Lora => run_lora(cfg),
        Mode::Mhlora => run_mhlora(cfg),
        Mode::Lte => run_lte(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lte::MergePolicy;
    use crate::optim::{AdamConfig, OptimizerConfig};

    fn cfg(heads: usize, rank: usize, opt: OptimizerConfig) -> RunConfig {
        let mut c = RunConfig::least_squares(8, 8, 8, heads, rank, opt);
        c.batch_size = 16 * heads;
        c.steps = 60;
        c.snapshot_interval = Some(5);
        c.analysis = false;
        c.seed = 3;
        c
    }

    fn max_weight_gap(a: &Trajectory, b: &Trajectory) -> f64 {
        a.snapshots
            .iter()
            .zip(&b.snapshots)
            .flat_map(|(x, y)| {
                x.weights
                    .iter()
                    .zip(&y.weights)
                    .map(|(p, q)| p.max_abs_diff(q).unwrap())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn lte_with_exact_correction_at_period_one_matches_mhlora() {
        for opt in [
            OptimizerConfig::Sgd { lr: 0.1 },
            OptimizerConfig::Adamw(AdamConfig::new(0.01)),
        ] {
            let mut c = cfg(3, 2, opt);
            c.policy = MergePolicy::exact(1);
            let lte = run_lte(&c).unwrap();
            let mh = run_mhlora(&c).unwrap();
            assert!(max_weight_gap(&lte.trajectory, &mh.trajectory) <= 1e-10);
            for (lh, mhh) in lte.network.layers()[0]
                .heads()
                .iter()
                .zip(mh.network.layers()[0].heads())
            {
                assert!(lh.a.max_abs_diff(&mhh.a).unwrap() <= 1e-10);
                assert!(lh.b.max_abs_diff(&mhh.b).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn single_worker_exact_merging_is_plain_lora() {
        let mut c = cfg(1, 2, OptimizerConfig::Sgd { lr: 0.1 });
        c.policy = MergePolicy::exact(1);
        let lte = run_lte(&c).unwrap();
        let lora = run_lora(&c).unwrap();
        assert!(max_weight_gap(&lte.trajectory, &lora.trajectory) <= 1e-10);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut c = cfg(4, 2, OptimizerConfig::Sgd { lr: 0.1 });
        c.analysis = true;
        let a = run_lte(&c).unwrap().trajectory;
        let b = run_lte(&c).unwrap().trajectory;
        assert_eq!(a, b);
    }

    #[test]
    fn full_training_solves_least_squares() {
        let mut c = cfg(1, 1, OptimizerConfig::Sgd { lr: 0.3 });
        c.steps = 400;
        let out = run_full(&c).unwrap();
        assert!(out.trajectory.final_eval_loss().unwrap() <= 1e-10);
        let w = &out.network.layers()[0];
        assert!(w.weight().max_abs_diff(&out.task.w_star).unwrap() < 1e-5);
    }

    #[test]
    fn mhlora_loss_trends_down() {
        let mut c = cfg(2, 2, OptimizerConfig::Sgd { lr: 0.02 });
        c.dataset = DatasetSpec::LeastSquares {
            m: 8,
            n: 8,
            rank: 4,
        };
        c.batch_size = 512;
        c.steps = 200;
        c.eval_interval = Some(1);
        let t = run_mhlora(&c).unwrap().trajectory;
        let windows: Vec<f64> = t.evals[1..]
            .chunks(10)
            .map(|w| w.iter().map(|e| e.loss).sum::<f64>() / 10.0)
            .collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{w:?}");
        }
        assert!(windows[windows.len() - 1] < 0.5 * windows[0]);
    }

    #[test]
    fn stop_at_loss_ends_early() {
        let mut c = cfg(1, 1, OptimizerConfig::Sgd { lr: 0.3 });
        c.mode = Mode::Full;
        c.steps = 10_000;
        c.stop_at_loss = Some(1e-3);
        let t = run(&c).unwrap().trajectory;
        let stop = t.stopped_at.unwrap();
        assert!(stop < 10_000);
        assert_eq!(t.steps.len() as u64, stop);
        assert_eq!(t.steps_to_loss(1e-3), Some(stop));
    }

    #[test]
    fn merges_follow_the_period() {
        let mut c = cfg(2, 2, OptimizerConfig::Sgd { lr: 0.1 });
        c.policy = MergePolicy::averaged(7);
        c.steps = 30;
        c.analysis = true;
        c.record_updates = true;
        let t = run_lte(&c).unwrap().trajectory;
        let steps: Vec<u64> = t.merges.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![7, 14, 21, 28]);
        assert_eq!(t.updates.len(), 4);
        for u in &t.updates {
            let mut mean = u.worker_deltas[0][0].add(&u.worker_deltas[1][0]).unwrap();
            mean.scale_in_place(0.5);
            assert!(mean.max_abs_diff(&u.delta[0]).unwrap() < 1e-15);
        }
        assert_eq!(t.steps[7].merge_id, 1);
        let snap = t.snapshot_at(5).unwrap();
        assert!(snap.mean_cosine().is_some());
    }

    #[test]
    fn quantized_base_still_trains() {
        let mut c = cfg(2, 2, OptimizerConfig::Sgd { lr: 0.1 });
        c.quantize_bits = Some(4);
        c.base_init = Some(crate::numerics::InitScheme::kaiming());
        c.steps = 100;
        let t = run_lte(&c).unwrap().trajectory;
        assert!(t.final_eval_loss().unwrap() < t.evals[0].loss);
    }

    #[test]
    fn uneven_batch_records_dropped_samples() {
        let mut c = cfg(3, 2, OptimizerConfig::Sgd { lr: 0.1 });
        c.batch_size = 20;
        c.steps = 2;
        let t = run_lte(&c).unwrap().trajectory;
        assert_eq!(t.dropped_samples, 2);
    }

    #[test]
    fn hidden_relu_network_runs() {
        let mut c = cfg(2, 2, OptimizerConfig::Adamw(AdamConfig::new(0.01)));
        c.hidden = vec![6];
        c.activation = crate::network::Activation::Relu;
        c.base_init = Some(crate::numerics::InitScheme::kaiming());
        c.analysis = true;
        let t = run_lte(&c).unwrap().trajectory;
        assert_eq!(t.snapshots[1].weights.len(), 2);
        assert!(t.final_eval_loss().unwrap().is_finite());
    }
}
