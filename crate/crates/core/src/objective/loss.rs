use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One alive scale's contribution to the reconstruction loss.
#[derive(Debug)]
pub struct ScaleTerm {
    /// Caller's identifier for the scale (the head index in practice).
    pub key: usize,
    /// Prediction `[images · s², bins]`.
    pub pred: NodeId,
    /// Target with the prediction's shape.
    pub target: Tensor,
    /// Per-row mask weight `m ∈ [0, 1]`.
    pub mask: Vec<f64>,
    pub images: usize,
    /// Loss weight `w_l`.
    pub weight: f64,
}

#[derive(Debug)]
pub struct LossOutput {
    pub total: NodeId,
    /// `(key, node)` per scale, already multiplied by `w_l`.
    pub terms: Vec<(usize, NodeId)>,
    /// No alive scale remained: the objective is exhausted.
    pub empty: bool,
}

/// Mask-weighted multi-scale reconstruction loss.
///
/// Each scale contributes `w_l · ½ Σ_i m_i ‖y_i − ŷ_i‖² / Σ_i m_i`,
/// normalized per image and averaged over images; this is the negative
/// unit-variance Gaussian log-likelihood with its constant dropped.
pub fn local_mim_loss(g: &mut Graph, terms: Vec<ScaleTerm>) -> Result<LossOutput> {
    if terms.is_empty() {
        let total = g.constant(Tensor::scalar(0.0));
        return Ok(LossOutput {
            total,
            terms: Vec::new(),
            empty: true,
        });
    }
    let mut nodes = Vec::with_capacity(terms.len());
    for term in terms {
        let rows = term.mask.len();
        if rows == 0 || term.images == 0 || rows % term.images != 0 {
            return Err(Error::dim(format!(
                "scale {}: {rows} mask rows for {} images",
                term.key, term.images
            )));
        }
        let per_image = rows / term.images;
        let mut weights = vec![0.0; rows];
        for (chunk, wchunk) in term.mask.chunks(per_image).zip(weights.chunks_mut(per_image)) {
            let count: f64 = chunk.iter().sum();
            if count > 0.0 {
                let k = 1.0 / (count * term.images as f64);
                for (w, m) in wchunk.iter_mut().zip(chunk) {
                    *w = m * k;
                }
            }
        }
        let raw = g.weighted_sq_error(term.pred, term.target, weights)?;
        let node = if term.weight == 1.0 { raw } else { g.scale(raw, term.weight) };
        nodes.push((term.key, node));
    }
    let mut total = nodes[0].1;
    for &(_, n) in &nodes[1..] {
        total = g.add(total, n)?;
    }
    Ok(LossOutput {
        total,
        terms: nodes,
        empty: false,
    })
}
