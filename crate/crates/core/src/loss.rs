//! Training objectives: the symmetric contrastive loss for the dual encoder
//! and the softmax cross-entropy helpers the caption scorer builds on.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::l2_norm;
use crate::tensor::Tensor;

/// Numerically stable softmax in f64.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of a softmax row against a target index. Returns the loss
/// and dL/d(logits).
pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -math::ln(probs[target].max(1e-300));
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Symmetric contrastive loss over a batch of paired, L2-normalized
/// embeddings: cross-entropy over image-to-text rows and text-to-image
/// columns of the scaled similarity matrix, averaged.
///
/// Returns the loss and the gradients with respect to each embedding.
pub fn info_nce_loss(
    img_embs: &[Tensor],
    txt_embs: &[Tensor],
    temperature: f64,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    if img_embs.len() != txt_embs.len() {
        return Err(Error::Consistency(
            "image and text batches differ in length".to_string(),
        ));
    }
    let batch = img_embs.len();
    if batch < 2 {
        return Err(Error::DegenerateBatch(
            "contrastive loss needs a batch of at least 2".to_string(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::Precondition("temperature must be > 0".to_string()));
    }
    let imgs: Vec<Vec<f64>> = img_embs.iter().map(Tensor::to_f64).collect();
    let txts: Vec<Vec<f64>> = txt_embs.iter().map(Tensor::to_f64).collect();
    for (label, batch_embs) in [("image", &imgs), ("text", &txts)] {
        for (i, e) in batch_embs.iter().enumerate() {
            if (l2_norm(e) - 1.0).abs() > 1e-3 {
                return Err(Error::Precondition(alloc::format!(
                    "{label} embedding {i} is not L2-normalized"
                )));
            }
        }
    }

    let (loss, dimgs, dtxts) = info_nce_f64(&imgs, &txts, temperature);
    let to_tensors = |rows: Vec<Vec<f64>>| -> Result<Vec<Tensor>> {
        rows.into_iter()
            .map(|r| Tensor::from_f64(alloc::vec![r.len()], &r))
            .collect()
    };
    Ok((loss, to_tensors(dimgs)?, to_tensors(dtxts)?))
}

/// f64 core shared with the fused training path. Inputs are assumed paired;
/// normalization is the caller's contract.
pub(crate) fn info_nce_f64(
    imgs: &[Vec<f64>],
    txts: &[Vec<f64>],
    temperature: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let batch = imgs.len();
    let dim = imgs[0].len();
    // S[i][j] = <img_i, txt_j> / tau
    let mut sims = alloc::vec![alloc::vec![0.0f64; batch]; batch];
    for i in 0..batch {
        for j in 0..batch {
            let dot: f64 = imgs[i].iter().zip(txts[j].iter()).map(|(a, b)| a * b).sum();
            sims[i][j] = dot / temperature;
        }
    }

    let mut loss = 0.0f64;
    let mut dsims = alloc::vec![alloc::vec![0.0f64; batch]; batch];
    let half = 0.5 / batch as f64;

    // Image-to-text rows.
    for i in 0..batch {
        let (l, g) = cross_entropy(&sims[i], i);
        loss += l * half;
        for j in 0..batch {
            dsims[i][j] += g[j] * half;
        }
    }
    // Text-to-image columns.
    for j in 0..batch {
        let col: Vec<f64> = (0..batch).map(|i| sims[i][j]).collect();
        let (l, g) = cross_entropy(&col, j);
        loss += l * half;
        for i in 0..batch {
            dsims[i][j] += g[i] * half;
        }
    }

    let mut dimgs = alloc::vec![alloc::vec![0.0f64; dim]; batch];
    let mut dtxts = alloc::vec![alloc::vec![0.0f64; dim]; batch];
    for i in 0..batch {
        for j in 0..batch {
            let g = dsims[i][j] / temperature;
            if g != 0.0 {
                for d in 0..dim {
                    dimgs[i][d] += g * txts[j][d];
                    dtxts[j][d] += g * imgs[i][d];
                }
            }
        }
    }
    (loss, dimgs, dtxts)
}
