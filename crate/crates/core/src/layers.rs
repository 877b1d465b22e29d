//! LoRA-parameterized linear layers.
//!
//! A [`LoraLinear`] holds a frozen base weight `W` (`m x n`) and `N` heads
//! `(B_h, A_h)` with `B_h: m x r`, `A_h: r x n`. Inputs are column batches
//! (`n x batch`). The scale `s = alpha / r` multiplies a head's product in
//! single-head mode; in the multi-head and worker-view modes every head is
//! weighted by `s / N`. Which coefficient is active is always explicit
//! through [`ScaleMode`] or [`LayerView`].

use serde::{Deserialize, Serialize};

use crate::numerics::{init_matrix, InitScheme, Matrix, RandomSource};
use crate::{Error, Result};

/// One adapter pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraHead {
    /// `r x n`
    pub a: Matrix,
    /// `m x r`
    pub b: Matrix,
}

impl LoraHead {
    pub fn zeros(m: usize, n: usize, r: usize) -> Self {
        LoraHead {
            a: Matrix::zeros(r, n),
            b: Matrix::zeros(m, r),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `B · A`
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("head factors are conformant")
    }
}

/// Coefficient applied to a single head's product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `s`: plain single-head LoRA.
    Full,
    /// `s / N`: the head's share of the multi-head average.
    Shared,
}

/// How a layer combines its base weight and heads in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum LayerView<'a> {
    /// `W x`; heads ignored.
    Base,
    /// `W x - c V x + c B_h A_h x`, with `c` chosen by `scale` and `V` the
    /// optional correction matrix.
    Head {
        index: usize,
        scale: ScaleMode,
        correction: Option<&'a Matrix>,
    },
    /// `W x + (s/N) Σ_h B_h A_h x`
    AllHeads,
}

/// Gradient of one head's factors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub head: usize,
    pub a: Matrix,
    pub b: Matrix,
}

/// Gradients of one layer. `weight` is present only when requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGradients {
    pub weight: Option<Matrix>,
    pub heads: Vec<HeadGradient>,
}

impl LayerGradients {
    pub fn head(&self, index: usize) -> Option<&HeadGradient> {
        self.heads.iter().find(|g| g.head == index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    weight: Matrix,
    heads: Vec<LoraHead>,
    alpha: f64,
    rank: usize,
}

impl LoraLinear {
    /// Layer with `num_heads` all-zero heads of rank `rank` over `weight`.
    pub fn new(weight: Matrix, rank: usize, alpha: f64, num_heads: usize) -> Result<Self> {
        let (m, n) = weight.shape();
        if rank == 0 || rank > m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} must be in 1..={} for a {m}x{n} layer",
                m.min(n)
            )));
        }
        if num_heads == 0 {
            return Err(Error::InvalidArgument(
                "a layer needs at least one head".into(),
            ));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(LoraLinear {
            heads: (0..num_heads)
                .map(|_| LoraHead::zeros(m, n, rank))
                .collect(),
            weight,
            alpha,
            rank,
        })
    }

    /// Rebuilds a layer from stored parts, checking every shape.
    pub fn from_parts(weight: Matrix, heads: Vec<LoraHead>, alpha: f64) -> Result<Self> {
        let rank = heads
            .first()
            .map(LoraHead::rank)
            .ok_or_else(|| Error::InvalidArgument("a layer needs at least one head".into()))?;
        let mut layer = LoraLinear::new(weight, rank, alpha, heads.len())?;
        let (m, n) = layer.shape();
        for (i, h) in heads.iter().enumerate() {
            if h.a.shape() != (rank, n) || h.b.shape() != (m, rank) {
                return Err(Error::shape(
                    "from_parts",
                    format!("head {i}: A {:?}, B {:?}", h.a.shape(), h.b.shape()),
                ));
            }
        }
        layer.heads = heads;
        Ok(layer)
    }

    /// Initializes every `A_h` from `scheme` (head `h` draws from
    /// `rng.split(h)`) and zeroes every `B_h`.
    pub fn init_heads(&mut self, scheme: InitScheme, rng: &RandomSource) {
        for h in 0..self.heads.len() {
            self.reinit_head(h, scheme, &mut rng.split(h as u64));
        }
    }

    pub fn reinit_head(&mut self, index: usize, scheme: InitScheme, rng: &mut RandomSource) {
        let (m, n) = self.shape();
        let head = &mut self.heads[index];
        head.a = init_matrix(self.rank, n, scheme, rng);
        head.b = Matrix::zeros(m, self.rank);
    }

    /// `(m, n)` of the base weight.
    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// `s = alpha / r`
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn coefficient(&self, mode: ScaleMode) -> f64 {
        match mode {
            ScaleMode::Full => self.scale(),
            ScaleMode::Shared => self.scale() / self.heads.len() as f64,
        }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn heads(&self) -> &[LoraHead] {
        &self.heads
    }

    pub fn head(&self, index: usize) -> &LoraHead {
        &self.heads[index]
    }

    pub fn head_mut(&mut self, index: usize) -> &mut LoraHead {
        &mut self.heads[index]
    }

    fn check_head(&self, index: usize) -> Result<()> {
        if index >= self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "head {index} out of range for {} heads",
                self.heads.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.rows() != self.weight.cols() {
            return Err(Error::shape(
                op,
                format!(
                    "input has {} rows, layer expects {}",
                    x.rows(),
                    self.weight.cols()
                ),
            ));
        }
        Ok(())
    }

    fn check_correction(&self, v: Option<&Matrix>) -> Result<()> {
        match v {
            Some(v) if v.shape() != self.weight.shape() => Err(Error::shape(
                "correction",
                format!("{:?} vs weight {:?}", v.shape(), self.weight.shape()),
            )),
            _ => Ok(()),
        }
    }

    /// `W x + s B_h A_h x`
    pub fn lora_forward(&self, head: usize, x: &Matrix) -> Result<Matrix> {
        self.forward(
            x,
            LayerView::Head {
                index: head,
                scale: ScaleMode::Full,
                correction: None,
            },
        )
    }

    /// `W x + (s/N) Σ_h B_h A_h x`
    pub fn mhlora_forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x, LayerView::AllHeads)
    }

    /// `W x + (s/N) B_h A_h x`: what worker `h` sees between merges.
    pub fn worker_view_forward(&self, head: usize, x: &Matrix) -> Result<Matrix> {
        self.forward(
            x,
            LayerView::Head {
                index: head,
                scale: ScaleMode::Shared,
                correction: None,
            },
        )
    }

    pub fn forward(&self, x: &Matrix, view: LayerView<'_>) -> Result<Matrix> {
        self.check_input(x, "forward")?;
        let mut out = self.weight.matmul(x)?;
        match view {
            LayerView::Base => {}
            LayerView::Head {
                index,
                scale,
                correction,
            } => {
                self.check_head(index)?;
                self.check_correction(correction)?;
                let c = self.coefficient(scale);
                if let Some(v) = correction {
                    out.axpy(-c, &v.matmul(x)?)?;
                }
                let h = &self.heads[index];
                out.axpy(c, &h.b.matmul(&h.a.matmul(x)?)?)?;
            }
            LayerView::AllHeads => {
                let c = self.coefficient(ScaleMode::Shared);
                for h in &self.heads {
                    out.axpy(c, &h.b.matmul(&h.a.matmul(x)?)?)?;
                }
            }
        }
        Ok(out)
    }

    /// `W + (s/N) Σ_h B_h A_h`
    pub fn effective_weight(&self) -> Matrix {
        self.view_weight(LayerView::AllHeads)
            .expect("all-heads view is always valid")
    }

    /// The dense matrix a view applies to its input.
    pub fn view_weight(&self, view: LayerView<'_>) -> Result<Matrix> {
        let mut w = self.weight.clone();
        match view {
            LayerView::Base => {}
            LayerView::Head {
                index,
                scale,
                correction,
            } => {
                self.check_head(index)?;
                self.check_correction(correction)?;
                let c = self.coefficient(scale);
                if let Some(v) = correction {
                    w.axpy(-c, v)?;
                }
                w.axpy(c, &self.heads[index].product())?;
            }
            LayerView::AllHeads => {
                let c = self.coefficient(ScaleMode::Shared);
                for h in &self.heads {
                    w.axpy(c, &h.product())?;
                }
            }
        }
        Ok(w)
    }

    /// Gradients of head `head` for an upstream gradient `∂L/∂out`:
    /// `dB = c · up · (A x)ᵀ`, `dA = c · Bᵀ · up · xᵀ`, and `dW = up · xᵀ`
    /// when `with_weight` is set.
    pub fn lora_backward(
        &self,
        head: usize,
        x: &Matrix,
        upstream: &Matrix,
        scale: ScaleMode,
        with_weight: bool,
    ) -> Result<LayerGradients> {
        let view = LayerView::Head {
            index: head,
            scale,
            correction: None,
        };
        Ok(self.backward(x, upstream, view, with_weight)?.0)
    }

    /// Parameter gradients for `view` plus the gradient with respect to the
    /// layer input.
    pub fn backward(
        &self,
        x: &Matrix,
        upstream: &Matrix,
        view: LayerView<'_>,
        with_weight: bool,
    ) -> Result<(LayerGradients, Matrix)> {
        self.check_input(x, "backward")?;
        let (m, _) = self.shape();
        if upstream.rows() != m || upstream.cols() != x.cols() {
            return Err(Error::shape(
                "backward",
                format!(
                    "upstream {:?}, expected ({m}, {})",
                    upstream.shape(),
                    x.cols()
                ),
            ));
        }
        let weight = if with_weight {
            Some(upstream.matmul_t(x)?)
        } else {
            None
        };
        let mut dx = self.weight.t_matmul(upstream)?;
        let mut heads = Vec::new();
        let mut head_grad = |index: usize, c: f64, dx: &mut Matrix| -> Result<()> {
            let h = &self.heads[index];
            let ax = h.a.matmul(x)?;
            let bt_up = h.b.t_matmul(upstream)?;
            let b = upstream.matmul_t(&ax)?.scale(c);
            let a = bt_up.matmul_t(x)?.scale(c);
            dx.axpy(c, &h.a.t_matmul(&bt_up)?)?;
            heads.push(HeadGradient { head: index, a, b });
            Ok(())
        };
        match view {
            LayerView::Base => {}
            LayerView::Head {
                index,
                scale,
                correction,
            } => {
                self.check_head(index)?;
                self.check_correction(correction)?;
                let c = self.coefficient(scale);
                head_grad(index, c, &mut dx)?;
                if let Some(v) = correction {
                    dx.axpy(-c, &v.t_matmul(upstream)?)?;
                }
            }
            LayerView::AllHeads => {
                let c = self.coefficient(ScaleMode::Shared);
                for index in 0..self.heads.len() {
                    head_grad(index, c, &mut dx)?;
                }
            }
        }
        Ok((LayerGradients { weight, heads }, dx))
    }
}

/// Splits `B · A` (inner dimension `d`) into two lower-rank products:
/// the first `k` columns of `B` with the first `k` rows of `A`, and the rest.
pub fn split_product(
    b: &Matrix,
    a: &Matrix,
    k: usize,
) -> Result<((Matrix, Matrix), (Matrix, Matrix))> {
    let d = b.cols();
    if a.rows() != d {
        return Err(Error::shape(
            "split_product",
            format!("B {:?}, A {:?}", b.shape(), a.shape()),
        ));
    }
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!(
            "split point {k} must be in 1..{d}"
        )));
    }
    Ok((
        (b.columns(0, k)?, a.row_range(0, k)?),
        (b.columns(k, d)?, a.row_range(k, d)?),
    ))
}
