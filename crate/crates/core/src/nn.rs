//! Two-layer tanh MLP blocks with hand-derived gradients, the SGD step, the
//! cosine kernel, and the finite-difference gradient checker.
//!
//! A "block" is the unit every encoder is assembled from:
//!
//! ```text
//! p = W2 * tanh(W1 * x + b1) + b2          (then y = p / |p| for heads)
//! ```
//!
//! Its four tensors live in a [`ParamSet`] under `{prefix}.w1`, `{prefix}.b1`,
//! `{prefix}.w2`, `{prefix}.b2`. Projection heads (`normalize = true`)
//! L2-normalize the output so cosine and dot product coincide downstream.
//!
//! Tensors store f32; every kernel here promotes to f64, accumulates in f64,
//! and rounds only when materializing a tensor. That keeps the analytic
//! gradients and the central-difference oracle in agreement to well below
//! the 1e-4 contract.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{FreezeMask, ParamSet, Tag, Tensor};

/// Pre-activations below this norm cannot be normalized.
pub const NORM_EPS: f64 = 1e-9;

/// Identifies one MLP block inside a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSlice<'a> {
    pub prefix: &'a str,
    /// Projection heads normalize their output to unit length.
    pub normalize: bool,
}

impl<'a> MlpSlice<'a> {
    pub fn trunk(prefix: &'a str) -> Self {
        MlpSlice {
            prefix,
            normalize: false,
        }
    }

    pub fn head(prefix: &'a str) -> Self {
        MlpSlice {
            prefix,
            normalize: true,
        }
    }

    pub fn w1(&self) -> String {
        format!("{}.w1", self.prefix)
    }
    pub fn b1(&self) -> String {
        format!("{}.b1", self.prefix)
    }
    pub fn w2(&self) -> String {
        format!("{}.w2", self.prefix)
    }
    pub fn b2(&self) -> String {
        format!("{}.b2", self.prefix)
    }
}

/// Insert a freshly initialized block: weights uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_block(
    params: &mut ParamSet,
    prefix: &str,
    tag: Tag,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut Rng,
) {
    let matrix = |rows: usize, cols: usize, rng: &mut Rng| {
        let a = 1.0 / math::sqrt(cols as f64);
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.range_f64(-a, a) as f32)
            .collect();
        Tensor::new(alloc::vec![rows, cols], data).expect("sized to shape")
    };
    params.insert(&format!("{prefix}.w1"), tag, matrix(hidden, in_dim, rng));
    params.insert(&format!("{prefix}.b1"), tag, Tensor::zeros(alloc::vec![hidden]));
    params.insert(&format!("{prefix}.w2"), tag, matrix(out_dim, hidden, rng));
    params.insert(&format!("{prefix}.b2"), tag, Tensor::zeros(alloc::vec![out_dim]));
}

fn require_matrix<'p>(params: &'p ParamSet, name: &str, in_dim: usize) -> Result<&'p Tensor> {
    let t = params.require(name)?;
    if t.shape().len() != 2 || t.shape()[1] != in_dim {
        return Err(Error::Shape {
            name: name.to_string(),
            expected: format!("[*, {in_dim}]"),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(t)
}

fn require_vector<'p>(params: &'p ParamSet, name: &str, dim: usize) -> Result<&'p Tensor> {
    let t = params.require(name)?;
    if t.shape() != [dim] {
        return Err(Error::Shape {
            name: name.to_string(),
            expected: format!("[{dim}]"),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(t)
}

/// y[o] = sum_i w[o,i] * x[i], accumulated in f64.
pub(crate) fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    let wd = w.data();
    let mut y = alloc::vec![0.0f64; rows];
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &wd[o * cols..(o + 1) * cols];
        let mut acc = 0.0f64;
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += (*wi as f64) * xi;
        }
        *yo = acc;
    }
    y
}

/// dx[i] = sum_o w[o,i] * dy[o].
pub(crate) fn matvec_t(w: &Tensor, dy: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    let wd = w.data();
    let mut dx = alloc::vec![0.0f64; cols];
    for o in 0..rows {
        let row = &wd[o * cols..(o + 1) * cols];
        let g = dy[o];
        for (dxi, wi) in dx.iter_mut().zip(row.iter()) {
            *dxi += (*wi as f64) * g;
        }
    }
    dx
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

/// Forward cache for one block; owns everything backward needs.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub x: Vec<f64>,
    pub hidden: Vec<f64>, // tanh(W1 x + b1)
    pub out: Vec<f64>,    // W2 hidden + b2, normalized when the slice is a head
    pub norm: f64,        // pre-normalization norm (1.0 when not normalizing)
}

pub(crate) fn block_forward_f64(
    params: &ParamSet,
    slice: &MlpSlice,
    x: &[f64],
) -> Result<BlockCache> {
    let w1 = require_matrix(params, &slice.w1(), x.len())?;
    let hidden_dim = w1.shape()[0];
    let b1 = require_vector(params, &slice.b1(), hidden_dim)?;
    let w2 = require_matrix(params, &slice.w2(), hidden_dim)?;
    let out_dim = w2.shape()[0];
    let b2 = require_vector(params, &slice.b2(), out_dim)?;

    let mut u = matvec(w1, x);
    for (ui, bi) in u.iter_mut().zip(b1.data()) {
        *ui += *bi as f64;
    }
    let hidden: Vec<f64> = u.iter().map(|&v| math::tanh(v)).collect();

    let mut pre_out = matvec(w2, &hidden);
    for (pi, bi) in pre_out.iter_mut().zip(b2.data()) {
        *pi += *bi as f64;
    }

    let (out, norm) = if slice.normalize {
        let n = l2_norm(&pre_out);
        if n < NORM_EPS {
            return Err(Error::DegenerateEmbedding(format!(
                "`{}` produced a zero-norm output",
                slice.prefix
            )));
        }
        (pre_out.iter().map(|&p| p / n).collect(), n)
    } else {
        (pre_out, 1.0)
    };

    Ok(BlockCache {
        x: x.to_vec(),
        hidden,
        out,
        norm,
    })
}

/// Gradient buffers for one block, accumulated in f64 across a batch.
#[derive(Debug, Clone)]
pub(crate) struct BlockGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl BlockGrads {
    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        BlockGrads {
            w1: alloc::vec![0.0; hidden_dim * in_dim],
            b1: alloc::vec![0.0; hidden_dim],
            w2: alloc::vec![0.0; out_dim * hidden_dim],
            b2: alloc::vec![0.0; out_dim],
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    pub fn for_slice(params: &ParamSet, slice: &MlpSlice) -> Result<Self> {
        let w1 = params.require(&slice.w1())?;
        let w2 = params.require(&slice.w2())?;
        Ok(BlockGrads::zeros(w1.shape()[1], w1.shape()[0], w2.shape()[0]))
    }

    /// Write accumulated gradients into a ParamSet, skipping frozen tags.
    pub fn emit(
        &self,
        params: &ParamSet,
        slice: &MlpSlice,
        mask: &FreezeMask,
        grads: &mut ParamSet,
    ) -> Result<()> {
        let tag = params
            .tag_of(&slice.w1())
            .ok_or_else(|| Error::Consistency(format!("missing tensor `{}`", slice.w1())))?;
        if mask.freezes(tag) {
            return Ok(());
        }
        grads.insert(
            &slice.w1(),
            tag,
            Tensor::from_f64(alloc::vec![self.hidden_dim, self.in_dim], &self.w1)?,
        );
        grads.insert(&slice.b1(), tag, Tensor::from_f64(alloc::vec![self.hidden_dim], &self.b1)?);
        grads.insert(
            &slice.w2(),
            tag,
            Tensor::from_f64(alloc::vec![self.out_dim, self.hidden_dim], &self.w2)?,
        );
        grads.insert(&slice.b2(), tag, Tensor::from_f64(alloc::vec![self.out_dim], &self.b2)?);
        Ok(())
    }
}

/// Backward through one block. `upstream` is dL/d(out). Accumulates parameter
/// gradients into `acc` and returns dL/dx.
pub(crate) fn block_backward_f64(
    params: &ParamSet,
    slice: &MlpSlice,
    cache: &BlockCache,
    upstream: &[f64],
    acc: &mut BlockGrads,
) -> Result<Vec<f64>> {
    let w1 = params.require(&slice.w1())?;
    let w2 = params.require(&slice.w2())?;

    // Through normalization: dp = (dy - y (y . dy)) / |p|
    let dp: Vec<f64> = if slice.normalize {
        let dot: f64 = cache.out.iter().zip(upstream.iter()).map(|(y, g)| y * g).sum();
        cache
            .out
            .iter()
            .zip(upstream.iter())
            .map(|(y, g)| (g - y * dot) / cache.norm)
            .collect()
    } else {
        upstream.to_vec()
    };

    // p = W2 h + b2
    for (o, &dpo) in dp.iter().enumerate().take(acc.out_dim) {
        acc.b2[o] += dpo;
        let row = &mut acc.w2[o * acc.hidden_dim..(o + 1) * acc.hidden_dim];
        for (wi, hi) in row.iter_mut().zip(cache.hidden.iter()) {
            *wi += dpo * hi;
        }
    }
    let dh = matvec_t(w2, &dp);

    // h = tanh(u): du = dh * (1 - h^2)
    let du: Vec<f64> = dh
        .iter()
        .zip(cache.hidden.iter())
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();

    for (o, &duo) in du.iter().enumerate().take(acc.hidden_dim) {
        acc.b1[o] += duo;
        let row = &mut acc.w1[o * acc.in_dim..(o + 1) * acc.in_dim];
        for (wi, xi) in row.iter_mut().zip(cache.x.iter()) {
            *wi += duo * xi;
        }
    }
    Ok(matvec_t(w1, &du))
}

/// Run one block forward: `W2 tanh(W1 x + b1) + b2`, L2-normalized when the
/// slice is a projection head.
pub fn mlp_forward(params: &ParamSet, slice: &MlpSlice, x: &Tensor) -> Result<Tensor> {
    let cache = block_forward_f64(params, slice, &x.to_f64())?;
    Tensor::from_f64(alloc::vec![cache.out.len()], &cache.out)
}

/// Backward through one block. Returns the gradients for every unfrozen
/// tensor of the slice (frozen tags are absent from the result) plus
/// dL/d(input) for chaining.
pub fn mlp_backward(
    params: &ParamSet,
    slice: &MlpSlice,
    x: &Tensor,
    upstream: &Tensor,
    mask: &FreezeMask,
) -> Result<(ParamSet, Tensor)> {
    let cache = block_forward_f64(params, slice, &x.to_f64())?;
    if upstream.len() != cache.out.len() {
        return Err(Error::Shape {
            name: format!("{}.upstream", slice.prefix),
            expected: format!("[{}]", cache.out.len()),
            got: format!("{:?}", upstream.shape()),
        });
    }
    let mut acc = BlockGrads::for_slice(params, slice)?;
    let dx = block_backward_f64(params, slice, &cache, &upstream.to_f64(), &mut acc)?;
    let mut grads = ParamSet::new();
    acc.emit(params, slice, mask, &mut grads)?;
    Ok((grads, Tensor::from_f64(alloc::vec![dx.len()], &dx)?))
}

/// One plain SGD step: `theta <- theta - lr * g` for unfrozen entries.
/// Frozen entries and entries without gradients are copied bitwise.
pub fn sgd_step(
    params: &ParamSet,
    grads: &ParamSet,
    lr: f64,
    mask: &FreezeMask,
) -> Result<ParamSet> {
    if lr <= 0.0 {
        return Err(Error::Precondition("learning rate must be > 0".to_string()));
    }
    for (name, g) in grads.iter() {
        match params.get(name) {
            None => {
                return Err(Error::Consistency(format!(
                    "gradient for `{name}` has no matching parameter"
                )))
            }
            Some(t) if t.shape() != g.tensor.shape() => {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: format!("{:?}", t.shape()),
                    got: format!("{:?}", g.tensor.shape()),
                })
            }
            _ => {}
        }
    }
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let updated = match grads.get(name) {
            Some(g) if !mask.freezes(p.tag) => {
                let data: Vec<f32> = p
                    .tensor
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&w, &gi)| ((w as f64) - lr * (gi as f64)) as f32)
                    .collect();
                Tensor::new(p.tensor.shape().to_vec(), data)?
            }
            _ => p.tensor.clone(),
        };
        out.insert(name, p.tag, updated);
    }
    Ok(out)
}

/// Cosine similarity of two equal-length vectors, accumulated in f64 and
/// clamped to [-1, 1]. Zero vectors have no defined similarity.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            name: "cosine rhs".to_string(),
            expected: format!("[{}]", a.len()),
            got: format!("{:?}", b.shape()),
        });
    }
    cosine_f64(&a.to_f64(), &b.to_f64())
}

pub(crate) fn cosine_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Relative error with an absolute floor: gradients above 1e-3 are judged
/// relatively, smaller ones on absolute agreement against that scale, which
/// keeps central-difference truncation noise on dead coordinates from
/// swamping the measurement.
pub fn gradcheck_relative_error(numeric: f64, analytic: f64) -> f64 {
    let denom = math::abs(numeric).max(math::abs(analytic)).max(1e-3);
    math::abs(numeric - analytic) / denom
}

/// Central-difference check of `analytic` against `loss` at `params`.
///
/// Every scalar listed in `analytic` is perturbed by ±eps (in storage
/// precision; the quotient divides by the actually-realized difference of the
/// two f32 points) and the worst relative error is returned.
pub fn finite_diff_gradcheck<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
    loss: F,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    gradcheck_inner(params, analytic, eps, None, &loss)
}

/// Same check restricted to a deterministic sample of coordinates per tensor;
/// used where sweeping every scalar of a full model would be wasteful.
pub fn finite_diff_gradcheck_sampled<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
    loss: F,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    gradcheck_inner(params, analytic, eps, Some((coords_per_tensor, seed)), &loss)
}

fn gradcheck_inner<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
    sample: Option<(usize, u64)>,
    loss: &F,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Precondition("gradcheck eps must be > 0".to_string()));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss at base point".to_string()));
    }
    let mut worst = 0.0f64;
    let mut scratch = params.clone();
    for (name, gp) in analytic.iter() {
        let n = gp.tensor.len();
        let indices: Vec<usize> = match sample {
            Some((k, seed)) if n > k => {
                let mut rng = Rng::seeded(seed).stream(crate::rng::mix(0x6772_6164, fnv1a(name)));
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let original = params
                .require(name)?
                .data()[i];
            let plus = ((original as f64) + eps) as f32;
            let minus = ((original as f64) - eps) as f32;
            let span = (plus as f64) - (minus as f64);
            if span == 0.0 {
                return Err(Error::Numeric(format!(
                    "eps {eps} vanishes at `{name}`[{i}] = {original}"
                )));
            }
            scratch.get_mut(name).expect("cloned from params").data_mut()[i] = plus;
            let lp = loss(&scratch)?;
            scratch.get_mut(name).expect("cloned from params").data_mut()[i] = minus;
            let lm = loss(&scratch)?;
            scratch.get_mut(name).expect("cloned from params").data_mut()[i] = original;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing `{name}`[{i}]"
                )));
            }
            let numeric = (lp - lm) / span;
            let err = gradcheck_relative_error(numeric, gp.tensor.data()[i] as f64);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
