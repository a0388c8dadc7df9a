//! Binary cross entropy, summed masked-LM cross entropy, and the caption
//! pretraining objective whose MLM term only counts for true captions.

use crate::encoder::{self, TokenSequence};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionInput, ReferenceMatrix};
use crate::model::ModelConfig;
use crate::numerics::{sigmoid, Graph, Tensor, Var};
use crate::vision::{BoundingBox, Image};

pub const PROB_FLOOR: f64 = 1e-12;

/// `−[l·ln p + (1−l)·ln(1−p)]` on a length-1 probability.
pub fn bce_loss(g: &mut Graph, p: Var, label: u8) -> Result<Var> {
    let v = g.tape.data(p);
    if v.len() != 1 {
        return Err(Error::Dimension(format!("bce on {} probabilities", v.len())));
    }
    if !(0.0..=1.0).contains(&v[0]) {
        return Err(Error::Contract(format!("probability {} outside [0,1]", v[0])));
    }
    let picked = match label {
        1 => p,
        0 => g.tape.affine(p, -1.0, 1.0),
        _ => return Err(Error::Contract(format!("label {label} is not 0 or 1"))),
    };
    let log = g.tape.clamp_log(picked, PROB_FLOOR);
    let s = g.tape.sum(log);
    Ok(g.tape.scale(s, -1.0))
}

/// Plain-number BCE with the same clamping.
pub fn bce_value(p: f64, label: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || label > 1 {
        return Err(Error::Contract(format!("bce of p={p}, l={label}")));
    }
    let q = if label == 1 { p } else { 1.0 - p };
    Ok(-q.max(PROB_FLOOR).ln())
}

/// BCE on `σ(margin)`.
pub fn bce_from_margin(g: &mut Graph, margin: Var, label: u8) -> Result<Var> {
    let p = g.tape.sigmoid(margin);
    bce_loss(g, p, label)
}

/// `Σ_k −log softmax(logits[pos_k])[id_k]`; zero when there are no targets.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let (n, v) = g.tape.value(logits).dims2()?;
    if targets.is_empty() {
        return Ok(g.tape.constant(Tensor::scalar(0.0)));
    }
    let mut flat = Vec::with_capacity(targets.len());
    for &(pos, id) in targets {
        if pos >= n {
            return Err(Error::Dimension(format!("target position {pos} of {n}")));
        }
        if id >= v {
            return Err(Error::Vocab(format!("target id {id} outside vocabulary of {v}")));
        }
        flat.push(pos * v + id);
    }
    let logp = g.tape.log_softmax(logits);
    let picked = g.tape.pick(logp, &flat)?;
    let s = g.tape.sum(picked);
    Ok(g.tape.scale(s, -1.0))
}

/// One caption pretraining example. The only box is the whole image,
/// referenced by the `[IMG]` token.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub tokens: TokenSequence,
    pub boxes: Vec<BoundingBox>,
    pub refs: ReferenceMatrix,
    /// `(position, original piece id)` for every masked position.
    pub targets: Vec<(usize, usize)>,
    /// 1 for the true caption, 0 for an impostor.
    pub label: u8,
}

/// `L = BCE + [l = 1]·MLM`.
pub fn pretrain_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    item: &PretrainItem,
    image: &Image,
    features: Option<&[Vec<f64>]>,
) -> Result<Var> {
    if item.targets.iter().any(|&(pos, _)| pos >= item.tokens.len()) {
        return Err(Error::Dimension("MLM target beyond the caption".into()));
    }
    let input = FusionInput {
        tokens: &item.tokens,
        boxes: &item.boxes,
        refs: &item.refs,
        image,
        features,
    };
    let h = fusion::contextual(g, cfg, &input)?;
    let margin = fusion::margin_from(g, cfg, &input, h)?;
    let bce = bce_from_margin(g, margin, item.label)?;
    if item.label == 0 || item.targets.is_empty() {
        return Ok(bce);
    }
    let rows: Vec<usize> = item.targets.iter().map(|&(p, _)| p).collect();
    let logits = encoder::mlm_logits(g, h, Some(&rows))?;
    let local: Vec<(usize, usize)> = item
        .targets
        .iter()
        .enumerate()
        .map(|(k, &(_, id))| (k, id))
        .collect();
    let mlm = mlm_loss(g, logits, &local)?;
    g.tape.add(bce, mlm)
}

/// Mean of per-item losses.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// `p(l = 1)` from a margin value.
pub fn probability(margin: f64) -> f64 {
    sigmoid(margin)
}
