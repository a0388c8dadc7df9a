//! Box position embeddings, visual tokens, early fusion into the token
//! embeddings, and the two scoring heads (dual encoder and B2T2).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, TokenSequence, INIT_STD};
use crate::error::{Error, Result};
use crate::model::{Architecture, FusionMode, ModelConfig};
use crate::numerics::{truncated_normal, Graph, ParamStore, Tensor, Var};
use crate::vision::{self, BoundingBox, Image};

pub const M: &str = "fusion.M";
pub const D: &str = "fusion.D";
pub const X: &str = "fusion.X";
pub const Y: &str = "fusion.Y";
pub const CLASS_VECTORS: &str = "fusion.a";
pub const CLASS_BIAS: &str = "fusion.b";

/// Slack allowed when checking that normalized corners lie in `[0, k]`.
const NORMALIZED_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Rows `k` of the X and Y position tables.
    pub grid_size: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { grid_size: 14 }
    }
}

/// Binary m×n matrix; entry (i, j) is set iff token j refers to box i.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ReferenceMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ReferenceMatrix {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged reference matrix".into()));
        }
        let mut r = Self::zeros(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => r.set(i, j),
                    _ => return Err(Error::Contract(format!("reference entry {v}"))),
                }
            }
        }
        r.validate()?;
        Ok(r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.cols + j] = true;
    }

    pub fn clear_row(&mut self, i: usize) {
        self.bits[i * self.cols..(i + 1) * self.cols].fill(false);
    }

    pub fn clear(&mut self) {
        self.bits.fill(false);
    }

    pub fn row_is_referenced(&self, i: usize) -> bool {
        self.bits[i * self.cols..(i + 1) * self.cols]
            .iter()
            .any(|&b| b)
    }

    pub fn column_sum(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, j)).count()
    }

    /// Number of columns with a set entry.
    pub fn referencing_columns(&self) -> usize {
        (0..self.cols).filter(|&j| self.column_sum(j) > 0).count()
    }

    /// Box referenced by token `j`, if any.
    pub fn box_of_token(&self, j: usize) -> Option<usize> {
        (0..self.rows).find(|&i| self.get(i, j))
    }

    pub fn referenced_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| self.row_is_referenced(i))
            .collect()
    }

    /// Each token refers to at most one box.
    pub fn validate(&self) -> Result<()> {
        match (0..self.cols).find(|&j| self.column_sum(j) > 1) {
            Some(j) => Err(Error::Contract(format!(
                "token {j} references {} boxes",
                self.column_sum(j)
            ))),
            None => Ok(()),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| u8::from(self.get(i, j))).collect())
            .collect()
    }

    /// Keeps the first `cols` columns.
    pub fn truncate_cols(&self, cols: usize) -> Self {
        let mut out = Self::zeros(self.rows, cols.min(self.cols));
        for i in 0..self.rows {
            for j in 0..out.cols {
                if self.get(i, j) {
                    out.set(i, j);
                }
            }
        }
        out
    }

    /// Transposed selection as a dense n×rows.len() matrix.
    fn transposed_dense(&self, rows: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(&[self.cols, rows.len()]);
        let data = t.data_mut();
        for (c, &i) in rows.iter().enumerate() {
            for j in 0..self.cols {
                if self.get(i, j) {
                    data[j * rows.len() + c] = 1.0;
                }
            }
        }
        t
    }
}

/// Adds M, D, X, Y, a and b to `store`.
pub fn init_params<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let h = cfg.encoder.hidden;
    let d = cfg.vision.out_dim;
    let k = cfg.fusion.grid_size;
    store.insert(M, truncated_normal(&[h, d], INIT_STD, rng), true);
    store.insert(D, truncated_normal(&[d, h], INIT_STD, rng), true);
    store.insert(X, truncated_normal(&[k, d / 4], INIT_STD, rng), true);
    store.insert(Y, truncated_normal(&[k, d / 4], INIT_STD, rng), true);
    store.insert(
        CLASS_VECTORS,
        truncated_normal(&[2, h], INIT_STD, rng),
        true,
    );
    store.insert(CLASS_BIAS, Tensor::zeros(&[2]), true);
}

/// Maps pixel corners to the `[0, k]` grid after clipping to the image.
pub fn normalize_box(b: &BoundingBox, width: usize, height: usize, k: usize) -> [f64; 4] {
    let (w, h, k) = (width as f64, height as f64, k as f64);
    [
        b.x1.clamp(0.0, w) * k / w,
        b.y1.clamp(0.0, h) * k / h,
        b.x2.clamp(0.0, w) * k / w,
        b.y2.clamp(0.0, h) * k / h,
    ]
}

/// Grid rows `(⌊x1⌋, ⌊y1⌋, ⌊x2⌋, ⌊y2⌋)` clamped to `[0, k-1]`.
pub fn grid_indices(normalized: [f64; 4], k: usize) -> Result<[usize; 4]> {
    let kf = k as f64;
    let mut out = [0; 4];
    for (o, &c) in out.iter_mut().zip(&normalized) {
        if !c.is_finite() || c < -NORMALIZED_TOLERANCE || c > kf + NORMALIZED_TOLERANCE {
            return Err(Error::Contract(format!(
                "normalized corner {c} outside [0, {k}]"
            )));
        }
        *o = (c.max(0.0).floor() as usize).min(k - 1);
    }
    Ok(out)
}

/// π(b) = concat(X[⌊x1⌋], Y[⌊y1⌋], X[⌊x2⌋], Y[⌊y2⌋]) as a 1×d row.
pub fn pi(g: &mut Graph, normalized: [f64; 4], k: usize) -> Result<Var> {
    let [x1, y1, x2, y2] = grid_indices(normalized, k)?;
    let xt = g.param(X)?;
    let yt = g.param(Y)?;
    let parts = [
        g.tape.row(xt, x1)?,
        g.tape.row(yt, y1)?,
        g.tape.row(xt, x2)?,
        g.tape.row(yt, y2)?,
    ];
    g.tape.concat(&parts, 1)
}

/// `(Φ + π) · Mᵀ` for stacked rows; `positions` is `None` when π is ablated.
pub fn visual_tokens(g: &mut Graph, features: Var, positions: Option<Var>) -> Result<Var> {
    let summed = match positions {
        Some(p) => g.tape.add(features, p)?,
        None => features,
    };
    let m = g.param(M)?;
    let mt = g.tape.transpose(m)?;
    g.tape.matmul(summed, mt)
}

/// `E′ = E + Σ_i R_iᵀ · vtokens[i]`.
pub fn fuse(g: &mut Graph, embedded: Var, refs: &ReferenceMatrix, vtokens: Var) -> Result<Var> {
    let rows: Vec<usize> = (0..refs.rows()).collect();
    fuse_rows(g, embedded, refs, &rows, vtokens)
}

/// `fuse` restricted to the boxes in `rows` (`vtokens` row c ↔ box `rows[c]`).
pub fn fuse_rows(
    g: &mut Graph,
    embedded: Var,
    refs: &ReferenceMatrix,
    rows: &[usize],
    vtokens: Var,
) -> Result<Var> {
    let (n, h) = g.tape.value(embedded).dims2()?;
    let (m, vh) = g.tape.value(vtokens).dims2()?;
    if n != refs.cols() || m != rows.len() || vh != h {
        return Err(Error::Dimension(format!(
            "fuse: embeddings {n}x{h}, refs {}x{}, visual tokens {m}x{vh}",
            refs.rows(),
            refs.cols()
        )));
    }
    let rt = g.tape.constant(refs.transposed_dense(rows));
    let added = g.tape.matmul(rt, vtokens)?;
    g.tape.add(embedded, added)
}

/// Two class logits `Ψ · a_lᵀ + b_l` as a 1×2 row.
pub fn class_logits(g: &mut Graph, passage: Var) -> Result<Var> {
    let a = g.param(CLASS_VECTORS)?;
    let b = g.param(CLASS_BIAS)?;
    let at = g.tape.transpose(a)?;
    let logits = g.tape.matmul(passage, at)?;
    g.tape.add_bias(logits, b)
}

/// Bilinear dual-encoder logit `Φ · D · Ψᵀ` (1×1).
pub fn dual_logit(g: &mut Graph, passage: Var, image_features: Var) -> Result<Var> {
    let d = g.param(D)?;
    let phid = g.tape.matmul(image_features, d)?;
    let pt = g.tape.transpose(passage)?;
    g.tape.matmul(phid, pt)
}

/// Everything one example contributes to a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionInput<'a> {
    pub tokens: &'a TokenSequence,
    /// Box 0 must be the full image.
    pub boxes: &'a [BoundingBox],
    pub refs: &'a ReferenceMatrix,
    pub image: &'a Image,
    /// Cached `Φ(crop(I, b_i))` per box, valid only for a frozen backbone.
    pub features: Option<&'a [Vec<f64>]>,
}

impl FusionInput<'_> {
    fn check(&self) -> Result<()> {
        if self.refs.cols() != self.tokens.len() || self.refs.rows() != self.boxes.len() {
            return Err(Error::Dimension(format!(
                "reference matrix {}x{} for {} boxes and {} tokens",
                self.refs.rows(),
                self.refs.cols(),
                self.boxes.len(),
                self.tokens.len()
            )));
        }
        if let Some(f) = self.features {
            if f.len() != self.boxes.len() {
                return Err(Error::Dimension(format!(
                    "{} cached features for {} boxes",
                    f.len(),
                    self.boxes.len()
                )));
            }
        }
        self.refs.validate()
    }
}

/// Φ of box `i` as a 1×d row.
fn box_features(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput, i: usize) -> Result<Var> {
    if let Some(cache) = input.features {
        let row = Tensor::new(vec![1, cache[i].len()], cache[i].clone())?;
        return Ok(g.tape.constant(row));
    }
    let crop = vision::crop(input.image, &input.boxes[i], Some(cfg.vision.input_size))?;
    vision::phi(g, &cfg.vision, &crop)
}

/// Stacked visual tokens for the given box rows.
fn visual_tokens_for(
    g: &mut Graph,
    cfg: &ModelConfig,
    input: &FusionInput,
    rows: &[usize],
) -> Result<Var> {
    let mut feats = Vec::with_capacity(rows.len());
    let mut positions = Vec::with_capacity(rows.len());
    for &i in rows {
        feats.push(box_features(g, cfg, input, i)?);
        if cfg.variant.position_embeddings() {
            let b = input.boxes[i];
            let norm = normalize_box(
                &b,
                input.image.width(),
                input.image.height(),
                cfg.fusion.grid_size,
            );
            positions.push(pi(g, norm, cfg.fusion.grid_size)?);
        }
    }
    let stacked = if feats.len() == 1 {
        feats[0]
    } else {
        g.tape.concat(&feats, 0)?
    };
    let pos = match positions.len() {
        0 => None,
        1 => Some(positions[0]),
        _ => Some(g.tape.concat(&positions, 0)?),
    };
    visual_tokens(g, stacked, pos)
}

/// Final-layer hidden states with visual tokens entering per the fusion mode.
pub fn contextual(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput) -> Result<Var> {
    input.check()?;
    let enc = &cfg.encoder;
    let mask = &input.tokens.attention_mask;
    let embedded = encoder::embed_tokens(g, enc, input.tokens)?;
    let rows = match cfg.variant.mode() {
        FusionMode::TextOnly => Vec::new(),
        _ => input.refs.referenced_rows(),
    };
    let contextual = if rows.is_empty() {
        encoder::encode(g, enc, embedded, mask)?
    } else if cfg.variant.mode() == FusionMode::LateFusion {
        let last = enc.num_layers.checked_sub(1).ok_or_else(|| {
            Error::Config("late fusion needs at least one encoder layer".into())
        })?;
        let (lower, _) = encoder::encode_layers(g, enc, embedded, mask, 0..last)?;
        let v = visual_tokens_for(g, cfg, input, &rows)?;
        let injected = fuse_rows(g, lower, input.refs, &rows, v)?;
        encoder::encode_layers(g, enc, injected, mask, last..enc.num_layers)?.0
    } else {
        let v = visual_tokens_for(g, cfg, input, &rows)?;
        let fused = fuse_rows(g, embedded, input.refs, &rows, v)?;
        encoder::encode(g, enc, fused, mask)?
    };
    Ok(contextual)
}

/// B2T2 class logits (1×2).
pub fn b2t2_logits(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput) -> Result<Var> {
    let h = contextual(g, cfg, input)?;
    let passage = encoder::psi(g, h)?;
    class_logits(g, passage)
}

/// `p(l | I, B, R, T)` over l ∈ {0, 1}.
pub fn b2t2_class_distribution(
    g: &mut Graph,
    cfg: &ModelConfig,
    input: &FusionInput,
) -> Result<Var> {
    let logits = b2t2_logits(g, cfg, input)?;
    g.tape.softmax(logits, 1)
}

/// Dual-encoder logit `Φ(I)ᵀ D Ψ(E(T))`; boxes and references are not read.
pub fn dual_encoder_logit(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput) -> Result<Var> {
    let embedded = encoder::embed_tokens(g, &cfg.encoder, input.tokens)?;
    let h = encoder::encode(g, &cfg.encoder, embedded, &input.tokens.attention_mask)?;
    dual_head(g, cfg, input, h)
}

fn dual_head(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput, contextual: Var) -> Result<Var> {
    let passage = encoder::psi(g, contextual)?;
    let full = match input.features {
        Some(cache) if !cache.is_empty() => {
            g.tape
                .constant(Tensor::new(vec![1, cache[0].len()], cache[0].clone())?)
        }
        _ => {
            let img = vision::resize_bilinear(
                input.image,
                cfg.vision.input_size,
                cfg.vision.input_size,
            );
            vision::phi(g, &cfg.vision, &img)?
        }
    };
    dual_logit(g, passage, full)
}

/// `p(l = 1 | I, T) = σ(Φ(I)ᵀ D Ψ(E(T)))`.
pub fn dual_score(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput) -> Result<Var> {
    let logit = dual_encoder_logit(g, cfg, input)?;
    Ok(g.tape.sigmoid(logit))
}

/// The scalar decision margin: `logit₁ − logit₀` for B2T2, the bilinear
/// logit for the dual encoder. `p(l=1)` is the logistic function of it.
pub fn margin(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput) -> Result<Var> {
    let h = contextual(g, cfg, input)?;
    margin_from(g, cfg, input, h)
}

/// `margin` given already computed final-layer states.
pub fn margin_from(
    g: &mut Graph,
    cfg: &ModelConfig,
    input: &FusionInput,
    contextual: Var,
) -> Result<Var> {
    match cfg.variant.architecture() {
        Architecture::B2t2 => {
            let passage = encoder::psi(g, contextual)?;
            let logits = class_logits(g, passage)?;
            let l0 = g.tape.pick(logits, &[0])?;
            let l1 = g.tape.pick(logits, &[1])?;
            g.tape.sub(l1, l0)
        }
        Architecture::DualEncoder => {
            let logit = dual_head(g, cfg, input, contextual)?;
            g.tape.reshape(logit, vec![1])
        }
    }
}

/// `p(l = 1)` under either architecture, as a length-1 vector.
pub fn positive_probability(g: &mut Graph, cfg: &ModelConfig, input: &FusionInput) -> Result<Var> {
    match cfg.variant.architecture() {
        Architecture::B2t2 => {
            let p = b2t2_class_distribution(g, cfg, input)?;
            g.tape.pick(p, &[1])
        }
        Architecture::DualEncoder => {
            let p = dual_score(g, cfg, input)?;
            g.tape.reshape(p, vec![1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone(), true);
        }
        s
    }

    fn table(k: usize, w: usize, base: f64) -> Tensor {
        Tensor::new(vec![k, w], (0..k * w).map(|v| base + v as f64).collect()).unwrap()
    }

    fn pi_rows(norm: [f64; 4], k: usize) -> Vec<f64> {
        let store = store_with(&[(X, table(k, 2, 0.0)), (Y, table(k, 2, 1000.0))]);
        let mut g = Graph::new(&store);
        let p = pi(&mut g, norm, k).unwrap();
        g.tape.data(p).to_vec()
    }

    fn expected_pi(idx: [usize; 4]) -> Vec<f64> {
        let x = |i: usize| vec![(2 * i) as f64, (2 * i + 1) as f64];
        let y = |i: usize| vec![1000.0 + (2 * i) as f64, 1000.0 + (2 * i + 1) as f64];
        [x(idx[0]), y(idx[1]), x(idx[2]), y(idx[3])].concat()
    }

    #[test]
    fn pi_full_image_clamps_upper_corner() {
        assert_eq!(
            pi_rows([0.0, 0.0, 56.0, 56.0], 56),
            expected_pi([0, 0, 55, 55])
        );
    }

    #[test]
    fn pi_degenerate_corner() {
        assert_eq!(pi_rows([0.0; 4], 56), expected_pi([0, 0, 0, 0]));
    }

    #[test]
    fn pi_floors_each_corner() {
        assert_eq!(
            pi_rows([10.7, 3.2, 40.0, 55.9], 56),
            expected_pi([10, 3, 40, 55])
        );
    }

    #[test]
    fn pi_rejects_unnormalized_input() {
        assert!(matches!(
            grid_indices([0.0, 0.0, 57.5, 10.0], 56),
            Err(Error::Contract(_))
        ));
        assert!(grid_indices([-0.5, 0.0, 1.0, 1.0], 56).is_err());
    }

    #[test]
    fn full_image_box_normalizes_to_grid_extent() {
        let b = BoundingBox::new(0.0, 0.0, 32.0, 24.0);
        assert_eq!(normalize_box(&b, 32, 24, 14), [0.0, 0.0, 14.0, 14.0]);
    }

    #[test]
    fn visual_token_hand_matvec() {
        // h = 2, d = 4
        let m = Tensor::new(vec![2, 4], vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.5, 0.0, 3.0]).unwrap();
        let store = store_with(&[(M, m)]);
        let mut g = Graph::new(&store);
        let phi = g
            .tape
            .constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pos = g
            .tape
            .constant(Tensor::new(vec![1, 4], vec![0.0, 1.0, -1.0, 0.5]).unwrap());
        // φ + π = [1, 3, 2, 4.5]
        let v = visual_tokens(&mut g, phi, Some(pos)).unwrap();
        assert_eq!(g.tape.data(v), &[1.0 + 4.0 - 4.5, 0.5 + 1.5 + 13.5]);
        let v = visual_tokens(&mut g, phi, None).unwrap();
        assert_eq!(g.tape.data(v), &[1.0 + 6.0 - 4.0, 0.5 + 1.0 + 12.0]);
    }

    #[test]
    fn zero_m_gives_zero_token() {
        let store = store_with(&[(M, Tensor::zeros(&[3, 4]))]);
        let mut g = Graph::new(&store);
        let phi = g.tape.constant(Tensor::filled(&[1, 4], 2.0));
        let v = visual_tokens(&mut g, phi, None).unwrap();
        assert!(g.tape.data(v).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = g
            .tape
            .constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v = g
            .tape
            .constant(Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());

        let none = ReferenceMatrix::zeros(1, 3);
        let out = fuse(&mut g, e, &none, v).unwrap();
        assert_eq!(g.tape.data(out), g.tape.data(e));

        let mut one = ReferenceMatrix::zeros(1, 3);
        one.set(0, 1);
        let out = fuse(&mut g, e, &one, v).unwrap();
        assert_eq!(g.tape.data(out), &[1.0, 2.0, 13.0, 24.0, 5.0, 6.0]);

        one.set(0, 2);
        let out = fuse(&mut g, e, &one, v).unwrap();
        assert_eq!(g.tape.data(out), &[1.0, 2.0, 13.0, 24.0, 15.0, 26.0]);
    }

    #[test]
    fn fuse_shape_mismatch() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = g.tape.constant(Tensor::zeros(&[3, 2]));
        let v = g.tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            fuse(&mut g, e, &ReferenceMatrix::zeros(1, 3), v),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dual_logit_examples() {
        let store = store_with(&[(D, Tensor::eye(2))]);
        let mut g = Graph::new(&store);
        let psi = g
            .tape
            .constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let phi = g
            .tape
            .constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let s = dual_logit(&mut g, psi, phi).unwrap();
        assert_eq!(g.tape.data(s), &[11.0]);
        let p = g.tape.sigmoid(s);
        assert!((g.tape.data(p)[0] - 0.999983).abs() < 1e-6);

        let zero = store_with(&[(D, Tensor::zeros(&[2, 2]))]);
        let mut g = Graph::new(&zero);
        let psi = g.tape.constant(Tensor::filled(&[1, 2], 5.0));
        let phi = g.tape.constant(Tensor::filled(&[1, 2], -3.0));
        let s = dual_logit(&mut g, psi, phi).unwrap();
        let p = g.tape.sigmoid(s);
        assert_eq!(g.tape.data(p), &[0.5]);
    }

    #[test]
    fn class_head_examples() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let store = store_with(&[(CLASS_VECTORS, a), (CLASS_BIAS, Tensor::zeros(&[2]))]);
        let mut g = Graph::new(&store);
        let psi = g
            .tape
            .constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let logits = class_logits(&mut g, psi).unwrap();
        let p = g.tape.softmax(logits, 1).unwrap();
        let expected = 2f64.exp() / (1.0 + 2f64.exp());
        assert!((g.tape.data(p)[1] - expected).abs() < 1e-15);
        assert!((g.tape.data(p)[1] - 0.8808).abs() < 1e-4);

        let sym = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.3, -0.2]).unwrap();
        let store = store_with(&[(CLASS_VECTORS, sym), (CLASS_BIAS, Tensor::filled(&[2], 0.7))]);
        let mut g = Graph::new(&store);
        let psi = g
            .tape
            .constant(Tensor::new(vec![1, 2], vec![4.0, 1.0]).unwrap());
        let logits = class_logits(&mut g, psi).unwrap();
        let p = g.tape.softmax(logits, 1).unwrap();
        assert_eq!(g.tape.data(p), &[0.5, 0.5]);
    }

    #[test]
    fn reference_matrix_column_constraint() {
        assert!(ReferenceMatrix::from_rows(&[vec![1, 0], vec![1, 0]]).is_err());
        let r = ReferenceMatrix::from_rows(&[vec![1, 0, 1], vec![0, 1, 0]]).unwrap();
        assert_eq!(r.referencing_columns(), 3);
        assert_eq!(r.box_of_token(1), Some(1));
        assert_eq!(r.referenced_rows(), vec![0, 1]);
    }
}
