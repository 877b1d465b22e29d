//! Measurements on weights, heads and trajectories.

use serde::{Deserialize, Serialize};

use crate::layers::LoraLinear;
use crate::lte::Trajectory;
use crate::network::{Batch, Targets};
use crate::numerics::svd::{singular_values, svd};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Relative cutoff below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `exp` of the Shannon entropy of the normalized singular values.
pub fn effective_rank(m: &Matrix) -> Result<f64> {
    let s = singular_values(m)?;
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let entropy: f64 = s
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp().clamp(1.0, s.len() as f64))
}

fn numerical_rank(singular: &[f64]) -> usize {
    let top = singular.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    singular
        .iter()
        .filter(|&&v| v > RANK_TOLERANCE * top)
        .count()
}

/// Orthonormal basis of the column space with its numerical rank.
fn left_basis(m: &Matrix) -> Result<(Matrix, usize)> {
    let d = svd(m)?;
    let rank = numerical_rank(&d.singular);
    Ok((d.u, rank))
}

/// Principal angles between the spans of two orthonormal bases with the same
/// number of columns, ascending.
///
/// Cosines come from `UᵀV`; sines from `V − U(UᵀV)`. Small angles are taken
/// from the sine, which keeps them accurate near zero where `acos` loses
/// half the digits.
pub fn principal_angles(u: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    if u.shape() != v.shape() {
        return Err(Error::shape(
            "principal_angles",
            format!("{:?} vs {:?}", u.shape(), v.shape()),
        ));
    }
    let c = u.t_matmul(v)?;
    let cos = singular_values(&c)?;
    let mut resid = v.clone();
    resid.axpy(-1.0, &u.matmul(&c)?)?;
    let mut sin = singular_values(&resid)?;
    sin.reverse();
    Ok(cos
        .iter()
        .zip(&sin)
        .map(|(&c, &s)| {
            let (c, s) = (c.clamp(0.0, 1.0), s.clamp(0.0, 1.0));
            if c * c >= 0.5 {
                s.asin()
            } else {
                c.acos()
            }
        })
        .collect())
}

/// Root-sum-square of the principal angles between the leading
/// `k`-dimensional column spaces of `p` and `q`.
pub fn grassman_distance(p: &Matrix, q: &Matrix, k: usize) -> Result<f64> {
    if p.rows() != q.rows() {
        return Err(Error::shape(
            "grassman_distance",
            format!("{} vs {} rows", p.rows(), q.rows()),
        ));
    }
    let (u, rank_p) = left_basis(p)?;
    let (v, rank_q) = left_basis(q)?;
    grassman_from_bases(&u, rank_p, &v, rank_q, k)
}

fn grassman_from_bases(
    u: &Matrix,
    rank_u: usize,
    v: &Matrix,
    rank_v: usize,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > rank_u || k > rank_v {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds available ranks {rank_u} and {rank_v}"
        )));
    }
    let angles = principal_angles(&u.columns(0, k)?, &v.columns(0, k)?)?;
    Ok(angles.iter().map(|t| t * t).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrassmanPair {
    pub i: usize,
    pub j: usize,
    /// Subspace dimension used: `min(r, rank_i, rank_j)`.
    pub k: usize,
    pub distance: f64,
}

/// Pairwise similarity of the heads of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `N × N` cosine similarities of the vectorized `B_i A_i`.
    pub cosine: Matrix,
    /// Mean over pairs `i < j` of non-zero heads.
    pub mean_cosine: Option<f64>,
    /// Unordered pairs of non-zero heads.
    pub grassman: Vec<GrassmanPair>,
    /// Plain mean over `grassman`.
    pub grassman_pair_mean: Option<f64>,
    /// `(1/(2N)) Σ_{i≠j} d_ij` over ordered pairs.
    pub grassman_inv_2n: Option<f64>,
    /// Heads whose product is zero.
    pub excluded: Vec<usize>,
}

pub fn head_alignment(layer: &LoraLinear) -> Result<AlignmentReport> {
    let n = layer.num_heads();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "alignment needs at least two heads".into(),
        ));
    }
    let products: Vec<Matrix> = layer.heads().iter().map(|h| h.product()).collect();
    let norms: Vec<f64> = products.iter().map(Matrix::frobenius_norm).collect();
    let excluded: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();

    let mut cosine = Matrix::identity(n);
    let mut cos_sum = 0.0;
    let mut cos_count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let c = if norms[i] > 0.0 && norms[j] > 0.0 {
                let c = (products[i].dot(&products[j])? / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                cos_sum += c;
                cos_count += 1;
                c
            } else {
                0.0
            };
            cosine.set(i, j, c);
            cosine.set(j, i, c);
        }
    }

    let bases: Vec<Option<(Matrix, usize)>> = products
        .iter()
        .zip(&norms)
        .map(|(p, &norm)| {
            if norm > 0.0 {
                left_basis(p).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let mut grassman = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if let (Some((u, ru)), Some((v, rv))) = (&bases[i], &bases[j]) {
                let k = layer.rank().min(*ru).min(*rv);
                if k == 0 {
                    continue;
                }
                let distance = grassman_from_bases(u, *ru, v, *rv, k)?;
                grassman.push(GrassmanPair { i, j, k, distance });
            }
        }
    }
    let total: f64 = grassman.iter().map(|p| p.distance).sum();
    let (grassman_pair_mean, grassman_inv_2n) = if grassman.is_empty() {
        (None, None)
    } else {
        (
            Some(total / grassman.len() as f64),
            Some(2.0 * total / (2.0 * n as f64)),
        )
    };
    Ok(AlignmentReport {
        cosine,
        mean_cosine: (cos_count > 0).then(|| cos_sum / cos_count as f64),
        grassman,
        grassman_pair_mean,
        grassman_inv_2n,
        excluded,
    })
}

/// Effective-weight distance between two runs at one snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub step: u64,
    /// `‖W_a − W_b‖_F` per layer.
    pub per_layer: Vec<f64>,
    pub total: f64,
}

pub fn trajectory_deviation(a: &Trajectory, b: &Trajectory) -> Result<Vec<DeviationPoint>> {
    let steps_a: Vec<u64> = a.snapshots.iter().map(|s| s.step).collect();
    let steps_b: Vec<u64> = b.snapshots.iter().map(|s| s.step).collect();
    if steps_a != steps_b {
        return Err(Error::InvalidArgument(format!(
            "snapshot schedules differ: {} vs {} snapshots",
            steps_a.len(),
            steps_b.len()
        )));
    }
    a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(sa, sb)| {
            if sa.weights.len() != sb.weights.len() {
                return Err(Error::shape(
                    "trajectory_deviation",
                    "runs have different depths",
                ));
            }
            let per_layer = sa
                .weights
                .iter()
                .zip(&sb.weights)
                .map(|(x, y)| Ok(x.sub(y)?.frobenius_norm()))
                .collect::<Result<Vec<f64>>>()?;
            Ok(DeviationPoint {
                step: sa.step,
                total: per_layer.iter().sum(),
                per_layer,
            })
        })
        .collect()
}

/// Sign of the `g AᵀA` term in the effective-gradient formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `s(BBᵀg − gAᵀA)`
    AsPrinted,
    /// `s(BBᵀg + gAᵀA)`
    Consistent,
}

impl SignConvention {
    pub const ALL: [SignConvention; 2] = [SignConvention::AsPrinted, SignConvention::Consistent];

    fn sign(self) -> f64 {
        match self {
            SignConvention::AsPrinted => -1.0,
            SignConvention::Consistent => 1.0,
        }
    }
}

/// The two parts of `ĝ`: `s(BBᵀg ± gAᵀA)` and `−s²η g(BA)ᵀg`.
pub fn effective_gradient_terms(
    a: &Matrix,
    b: &Matrix,
    g: &Matrix,
    s: f64,
    eta: f64,
    convention: SignConvention,
) -> Result<(Matrix, Matrix)> {
    if b.rows() != g.rows() || a.cols() != g.cols() || b.cols() != a.rows() {
        return Err(Error::shape(
            "effective_gradient",
            format!("B {:?}, A {:?}, g {:?}", b.shape(), a.shape(), g.shape()),
        ));
    }
    let mut first = b.matmul(&b.t_matmul(g)?)?;
    first.axpy(convention.sign(), &g.matmul(&a.t_matmul(a)?)?)?;
    first.scale_in_place(s);
    let ba = b.matmul(a)?;
    let mut second = g.matmul(&ba.t_matmul(g)?)?;
    second.scale_in_place(-s * s * eta);
    Ok((first, second))
}

/// `ĝ` such that one SGD step on `(A, B)` moves the product `BA` by `−η ĝ`.
pub fn effective_gradient(
    a: &Matrix,
    b: &Matrix,
    g: &Matrix,
    s: f64,
    eta: f64,
    convention: SignConvention,
) -> Result<Matrix> {
    let (mut first, second) = effective_gradient_terms(a, b, g, s, eta, convention)?;
    first.axpy(1.0, &second)?;
    Ok(first)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionResiduals {
    pub convention: SignConvention,
    /// `‖ΔŴ + η s ĝ₁‖_F` per η with only the first-order term.
    pub first_order: Vec<f64>,
    /// Same with both terms.
    pub full: Vec<f64>,
}

impl ConventionResiduals {
    /// `residual(η_i) / residual(η_{i+1})` for the first-order residuals.
    pub fn first_order_ratios(&self) -> Vec<f64> {
        self.first_order.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveUpdateReport {
    pub etas: Vec<f64>,
    /// `‖s(B′A′ − BA)‖_F` per η.
    pub actual_norms: Vec<f64>,
    pub conventions: Vec<ConventionResiduals>,
    /// The convention with the smaller full residual at the smallest η;
    /// `None` on a tie (e.g. `A = B = 0`).
    pub confirmed: Option<SignConvention>,
}

impl EffectiveUpdateReport {
    pub fn residuals(&self, convention: SignConvention) -> &ConventionResiduals {
        self.conventions
            .iter()
            .find(|c| c.convention == convention)
            .expect("every convention is evaluated")
    }
}

/// Takes one real SGD step on `(A, B)` of a single LoRA layer under the
/// least-squares loss and compares the change of the effective weight,
/// `ΔŴ = s(B′A′ − BA)`, with `−η s ĝ` for each η and sign convention.
pub fn verify_effective_update(
    w: &Matrix,
    a: &Matrix,
    b: &Matrix,
    batch: &Batch,
    s: f64,
    etas: &[f64],
) -> Result<EffectiveUpdateReport> {
    let Targets::Dense(y) = &batch.targets else {
        return Err(Error::InvalidArgument(
            "effective update check needs dense targets".into(),
        ));
    };
    let mut w_hat = w.clone();
    w_hat.axpy(s, &b.matmul(a)?)?;
    let mut resid = w_hat.matmul(&batch.inputs)?;
    resid.axpy(-1.0, y)?;
    let mut g = resid.matmul_t(&batch.inputs)?;
    g.scale_in_place(1.0 / batch.size() as f64);
    let grad_b = g.matmul_t(a)?.scale(s);
    let grad_a = b.t_matmul(&g)?.scale(s);
    let ba = b.matmul(a)?;

    let mut actual_norms = Vec::with_capacity(etas.len());
    let mut conventions: Vec<ConventionResiduals> = SignConvention::ALL
        .iter()
        .map(|&convention| ConventionResiduals {
            convention,
            first_order: Vec::new(),
            full: Vec::new(),
        })
        .collect();
    for &eta in etas {
        let mut b2 = b.clone();
        b2.axpy(-eta, &grad_b)?;
        let mut a2 = a.clone();
        a2.axpy(-eta, &grad_a)?;
        let mut actual = b2.matmul(&a2)?;
        actual.axpy(-1.0, &ba)?;
        actual.scale_in_place(s);
        actual_norms.push(actual.frobenius_norm());
        for c in conventions.iter_mut() {
            let (first, second) = effective_gradient_terms(a, b, &g, s, eta, c.convention)?;
            let mut r1 = actual.clone();
            r1.axpy(eta * s, &first)?;
            let mut r2 = r1.clone();
            r2.axpy(eta * s, &second)?;
            c.first_order.push(r1.frobenius_norm());
            c.full.push(r2.frobenius_norm());
        }
    }
    let confirmed = match (conventions[0].full.last(), conventions[1].full.last()) {
        (Some(p), Some(c)) if c < p => Some(SignConvention::Consistent),
        (Some(p), Some(c)) if p < c => Some(SignConvention::AsPrinted),
        _ => None,
    };
    Ok(EffectiveUpdateReport {
        etas: etas.to_vec(),
        actual_norms,
        conventions,
        confirmed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTracePoint {
    pub step: u64,
    pub layer: usize,
    /// Effective rank of the merged update at this step.
    pub update_rank: Option<f64>,
    /// Effective rank of the cumulative change of the effective weight.
    pub change_rank: Option<f64>,
    pub weight_rank: Option<f64>,
}

/// Merge-update ranks and snapshot ranks in step order. `None` marks zero
/// matrices or values that were not recorded.
pub fn update_rank_trace(run: &Trajectory) -> Vec<RankTracePoint> {
    let mut out = Vec::new();
    for m in &run.merges {
        for (layer, &rank) in m.delta_ranks.iter().enumerate() {
            out.push(RankTracePoint {
                step: m.step,
                layer,
                update_rank: rank,
                change_rank: None,
                weight_rank: None,
            });
        }
    }
    for s in &run.snapshots {
        for (layer, l) in s.layers.iter().enumerate() {
            match out
                .iter_mut()
                .find(|p| p.step == s.step && p.layer == layer)
            {
                Some(p) => {
                    p.change_rank = l.change_rank;
                    p.weight_rank = l.weight_rank;
                }
                None => out.push(RankTracePoint {
                    step: s.step,
                    layer,
                    update_rank: None,
                    change_rank: l.change_rank,
                    weight_rank: l.weight_rank,
                }),
            }
        }
    }
    out.sort_by_key(|p| (p.step, p.layer));
    out
}
