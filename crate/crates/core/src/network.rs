//! Small MLPs built from [`LoraLinear`] layers.
//!
//! Samples are columns. The MSE loss uses the ½ convention,
//! `L = ‖out - target‖²_F / (2b)`, so `∂L/∂out = (out - target) / b`;
//! softmax cross-entropy is averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::layers::{LayerGradients, LayerView, LoraLinear, ScaleMode};
use crate::numerics::{Matrix, RandomSource};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
        }
    }

    fn backprop(self, pre: &Matrix, grad: Matrix) -> Matrix {
        match self {
            Activation::Identity => grad,
            Activation::Relu => {
                let mut g = grad;
                for (gv, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `m x b` regression targets.
    Dense(Matrix),
    /// One class index per sample.
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `n x b`
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.cols()
    }
}

/// Which parameterization the forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    /// Base weights only.
    FullWeights,
    /// `W + s B_h A_h` in every layer.
    SingleHead(usize),
    /// `W + (s/N) Σ B_h A_h` in every layer.
    MultiHead,
    /// `W - (s/N) V_l + (s/N) B_h A_h`, with one optional correction per layer.
    WorkerView {
        head: usize,
        corrections: Option<&'a [Matrix]>,
    },
}

impl<'a> ForwardMode<'a> {
    fn layer_view(&self, layer: usize) -> LayerView<'a> {
        match *self {
            ForwardMode::FullWeights => LayerView::Base,
            ForwardMode::SingleHead(index) => LayerView::Head {
                index,
                scale: ScaleMode::Full,
                correction: None,
            },
            ForwardMode::MultiHead => LayerView::AllHeads,
            ForwardMode::WorkerView { head, corrections } => LayerView::Head {
                index: head,
                scale: ScaleMode::Shared,
                correction: corrections.map(|c| &c[layer]),
            },
        }
    }
}

/// Intermediates retained for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer.
    pub inputs: Vec<Matrix>,
    /// Output of every layer before its activation.
    pub pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.pre_activations.last().expect("network has layers")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LoraLinear>,
    activations: Vec<Activation>,
    loss: LossKind,
}

impl Network {
    /// `activations[i]` sits between layer `i` and layer `i + 1`.
    pub fn new(
        layers: Vec<LoraLinear>,
        activations: Vec<Activation>,
        loss: LossKind,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers need {} activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].shape().1 != pair[0].shape().0 {
                return Err(Error::shape(
                    "network",
                    format!(
                        "layer {} outputs {} but layer {} takes {}",
                        i,
                        pair[0].shape().0,
                        i + 1,
                        pair[1].shape().1
                    ),
                ));
            }
            if pair[1].num_heads() != pair[0].num_heads() {
                return Err(Error::InvalidArgument(
                    "every layer must carry the same number of heads".into(),
                ));
            }
        }
        Ok(Network {
            layers,
            activations,
            loss,
        })
    }

    pub fn layers(&self) -> &[LoraLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraLinear] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].num_heads()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape().1
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("network has layers").shape().0
    }

    pub fn base_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.weight().clone()).collect()
    }

    /// `W + (s/N) Σ B_h A_h` per layer.
    pub fn effective_weights(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(LoraLinear::effective_weight)
            .collect()
    }

    pub fn forward(&self, inputs: &Matrix, mode: ForwardMode<'_>) -> Result<ForwardCache> {
        if let ForwardMode::WorkerView {
            corrections: Some(c),
            ..
        } = mode
        {
            if c.len() != self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} corrections for {} layers",
                    c.len(),
                    self.layers.len()
                )));
            }
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut a = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a, mode.layer_view(i))?;
            let next = self.activations.get(i).map(|act| act.apply(&z));
            cache.inputs.push(a);
            cache.pre_activations.push(z);
            match next {
                Some(n) => a = n,
                None => break,
            }
        }
        Ok(cache)
    }

    /// Forward pass through plain dense matrices with this network's
    /// activations, e.g. merged effective weights.
    pub fn forward_with_weights(&self, weights: &[Matrix], inputs: &Matrix) -> Result<Matrix> {
        if weights.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} layers",
                weights.len(),
                self.layers.len()
            )));
        }
        let mut a = weights[0].matmul(inputs)?;
        for (act, w) in self.activations.iter().zip(&weights[1..]) {
            a = w.matmul(&act.apply(&a))?;
        }
        Ok(a)
    }

    pub fn loss_with_weights(&self, weights: &[Matrix], batch: &Batch) -> Result<f64> {
        let out = self.forward_with_weights(weights, &batch.inputs)?;
        Ok(loss_and_output_grad(self.loss, &out, &batch.targets)?.0)
    }

    pub fn loss(&self, batch: &Batch, mode: ForwardMode<'_>) -> Result<f64> {
        let cache = self.forward(&batch.inputs, mode)?;
        Ok(loss_and_output_grad(self.loss, cache.output(), &batch.targets)?.0)
    }

    /// Loss and parameter gradients for `mode`. Base-weight gradients are
    /// included only for [`ForwardMode::FullWeights`].
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        mode: ForwardMode<'_>,
    ) -> Result<(f64, Vec<LayerGradients>)> {
        let with_weight = matches!(mode, ForwardMode::FullWeights);
        self.loss_and_grad_with(batch, mode, with_weight)
    }

    pub fn loss_and_grad_with(
        &self,
        batch: &Batch,
        mode: ForwardMode<'_>,
        with_weight: bool,
    ) -> Result<(f64, Vec<LayerGradients>)> {
        let cache = self.forward(&batch.inputs, mode)?;
        let (loss, mut up) = loss_and_output_grad(self.loss, cache.output(), &batch.targets)?;
        let mut grads = vec![LayerGradients::default(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (g, dx) =
                self.layers[i].backward(&cache.inputs[i], &up, mode.layer_view(i), with_weight)?;
            grads[i] = g;
            if i > 0 {
                up = self.activations[i - 1].backprop(&cache.pre_activations[i - 1], dx);
            }
        }
        Ok((loss, grads))
    }
}

/// Loss value and `∂L/∂out`.
pub fn loss_and_output_grad(
    kind: LossKind,
    out: &Matrix,
    targets: &Targets,
) -> Result<(f64, Matrix)> {
    let b = out.cols();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    match (kind, targets) {
        (LossKind::Mse, Targets::Dense(t)) => {
            let diff = out.sub(t)?;
            let loss = 0.5 * inv_b * diff.as_slice().iter().map(|d| d * d).sum::<f64>();
            Ok((loss, diff.scale(inv_b)))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != b {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for a batch of {b}",
                    labels.len()
                )));
            }
            let classes = out.rows();
            let mut grad = Matrix::zeros(classes, b);
            let mut loss = 0.0;
            for (j, &y) in labels.iter().enumerate() {
                if y >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "label {y} out of range for {classes} classes"
                    )));
                }
                let max = (0..classes).map(|i| out.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..classes).map(|i| (out.get(i, j) - max).exp()).sum();
                let log_denom = denom.ln();
                loss -= out.get(y, j) - max - log_denom;
                for i in 0..classes {
                    let p = (out.get(i, j) - max - log_denom).exp();
                    let onehot = if i == y { 1.0 } else { 0.0 };
                    grad.set(i, j, (p - onehot) * inv_b);
                }
            }
            Ok((loss * inv_b, grad))
        }
        _ => Err(Error::InvalidArgument(
            "targets do not match the loss (MSE needs dense targets, cross-entropy needs class indices)"
                .into(),
        )),
    }
}

/// Identifies one scalar parameter of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Weight {
        layer: usize,
        index: usize,
    },
    HeadA {
        layer: usize,
        head: usize,
        index: usize,
    },
    HeadB {
        layer: usize,
        head: usize,
        index: usize,
    },
}

impl ParamRef {
    fn value_mut<'n>(&self, net: &'n mut Network) -> &'n mut f64 {
        match *self {
            ParamRef::Weight { layer, index } => {
                &mut net.layers[layer].weight_mut().as_mut_slice()[index]
            }
            ParamRef::HeadA { layer, head, index } => {
                &mut net.layers[layer].head_mut(head).a.as_mut_slice()[index]
            }
            ParamRef::HeadB { layer, head, index } => {
                &mut net.layers[layer].head_mut(head).b.as_mut_slice()[index]
            }
        }
    }

    fn analytic(&self, grads: &[LayerGradients]) -> f64 {
        match *self {
            ParamRef::Weight { layer, index } => grads[layer]
                .weight
                .as_ref()
                .map_or(0.0, |g| g.as_slice()[index]),
            ParamRef::HeadA { layer, head, index } => grads[layer]
                .head(head)
                .map_or(0.0, |g| g.a.as_slice()[index]),
            ParamRef::HeadB { layer, head, index } => grads[layer]
                .head(head)
                .map_or(0.0, |g| g.b.as_slice()[index]),
        }
    }
}

/// Every parameter the given mode reads.
pub fn mode_parameters(net: &Network, mode: ForwardMode<'_>) -> Vec<ParamRef> {
    let heads: Vec<usize> = match mode {
        ForwardMode::FullWeights => vec![],
        ForwardMode::SingleHead(h) | ForwardMode::WorkerView { head: h, .. } => vec![h],
        ForwardMode::MultiHead => (0..net.num_heads()).collect(),
    };
    let mut out = Vec::new();
    for (layer, l) in net.layers.iter().enumerate() {
        out.extend((0..l.weight().len()).map(|index| ParamRef::Weight { layer, index }));
        for &head in &heads {
            let h = l.head(head);
            out.extend((0..h.a.len()).map(|index| ParamRef::HeadA { layer, head, index }));
            out.extend((0..h.b.len()).map(|index| ParamRef::HeadB { layer, head, index }));
        }
    }
    out
}

/// Outcome of a finite-difference probe.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    /// `(analytic, numeric)` at the worst relative error.
    pub worst_pair: (f64, f64),
    /// The loss was exactly zero at the probe point; `error()` then reports
    /// the absolute error.
    pub zero_loss: bool,
}

impl FdReport {
    pub fn error(&self) -> f64 {
        if self.zero_loss {
            self.max_abs_error
        } else {
            self.max_rel_error
        }
    }
}

/// Gradient entries below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-8;

/// `|a - b| / max(FD_FLOOR, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FD_FLOOR)
}

/// Finite-difference formula used by [`fd_check_probes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(x+h) - L(x-h)) / 2h`, error O(h^2).
    Central,
    /// Central differences at `h` and `h/2` combined as `(4 D(h/2) - D(h)) / 3`,
    /// error O(h^4). Allows a larger step, which keeps round-off small.
    Richardson,
}

/// Compares analytic gradients (base weights included) against central
/// differences on a random subset of at least 32 of the mode's parameters.
pub fn fd_check(
    net: &Network,
    batch: &Batch,
    mode: ForwardMode<'_>,
    step: f64,
    rng: &mut RandomSource,
) -> Result<FdReport> {
    fd_check_probes(net, batch, mode, step, Stencil::Central, 32, rng)
}

fn central_difference(
    work: &mut Network,
    p: ParamRef,
    batch: &Batch,
    mode: ForwardMode<'_>,
    step: f64,
) -> Result<f64> {
    let original = *p.value_mut(work);
    *p.value_mut(work) = original + step;
    let plus = work.loss(batch, mode)?;
    *p.value_mut(work) = original - step;
    let minus = work.loss(batch, mode)?;
    *p.value_mut(work) = original;
    Ok((plus - minus) / (2.0 * step))
}

pub fn fd_check_probes(
    net: &Network,
    batch: &Batch,
    mode: ForwardMode<'_>,
    step: f64,
    stencil: Stencil,
    probes: usize,
    rng: &mut RandomSource,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (loss, grads) = net.loss_and_grad_with(batch, mode, true)?;
    let params = mode_parameters(net, mode);
    let chosen = rng.sample_indices(params.len(), probes.max(32));
    let mut work = net.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probes: chosen.len(),
        worst_pair: (0.0, 0.0),
        zero_loss: loss == 0.0,
    };
    for i in chosen {
        let p = params[i];
        let numeric = match stencil {
            Stencil::Central => central_difference(&mut work, p, batch, mode, step)?,
            Stencil::Richardson => {
                let coarse = central_difference(&mut work, p, batch, mode, step)?;
                let fine = central_difference(&mut work, p, batch, mode, step / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            }
        };
        let analytic = p.analytic(&grads);
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        let rel = relative_error(analytic, numeric);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_pair = (analytic, numeric);
        }
    }
    Ok(report)
}
