//! Small post-LN transformer encoder: token embeddings `E`, the contextual
//! stack, the `[CLS]` passage embedding `Ψ`, and a weight-tied MLM head.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{truncated_normal, Graph, ParamStore, Tensor, Var};

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const MASK_ID: usize = 3;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub type_vocab: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            hidden: 64,
            ffn_dim: 256,
            vocab_size: 512,
            type_vocab: 2,
            max_positions: 64,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden {} must be a positive multiple of num_heads {}",
                self.hidden, self.num_heads
            ));
        }
        if self.max_positions < 4 {
            return bad(format!("max_positions {} < 4", self.max_positions));
        }
        if self.type_vocab < 2 {
            return bad("type_vocab must be at least 2".into());
        }
        if self.vocab_size <= MASK_ID {
            return bad("vocab_size must cover the reserved ids".into());
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}

/// Word-piece ids, segment ids and an attention mask for one passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub piece_ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    /// A fully attended sequence.
    pub fn new(piece_ids: Vec<usize>, type_ids: Vec<usize>) -> Self {
        let attention_mask = vec![true; piece_ids.len()];
        TokenSequence {
            piece_ids,
            type_ids,
            attention_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }

    /// Right-pads to `len` with `[PAD]` positions that are masked out.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.len() < len {
            out.piece_ids.push(PAD_ID);
            out.type_ids.push(0);
            out.attention_mask.push(false);
        }
        out
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let n = self.piece_ids.len();
        if n == 0 || self.type_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::Dimension(format!(
                "token sequence lengths {}/{}/{}",
                n,
                self.type_ids.len(),
                self.attention_mask.len()
            )));
        }
        if n > cfg.max_positions {
            return Err(Error::Dimension(format!(
                "sequence of {n} tokens exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if self.piece_ids[0] != CLS_ID {
            return Err(Error::Contract("position 0 must hold [CLS]".into()));
        }
        if let Some(&id) = self.piece_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Vocab(format!(
                "piece id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if let Some(&id) = self.type_ids.iter().find(|&&id| id >= cfg.type_vocab) {
            return Err(Error::Vocab(format!(
                "type id {id} outside type vocabulary of {}",
                cfg.type_vocab
            )));
        }
        Ok(())
    }
}

fn layer_name(layer: usize, leaf: &str) -> String {
    format!("encoder.layer{layer}.{leaf}")
}

/// Adds freshly initialized encoder parameters to `store`.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) {
    let h = cfg.hidden;
    let tn = |shape: &[usize], rng: &mut R| truncated_normal(shape, INIT_STD, rng);
    store.insert("encoder.embed.word", tn(&[cfg.vocab_size, h], rng), true);
    store.insert("encoder.embed.type", tn(&[cfg.type_vocab, h], rng), true);
    store.insert(
        "encoder.embed.position",
        tn(&[cfg.max_positions, h], rng),
        true,
    );
    store.insert("encoder.mlm.bias", Tensor::zeros(&[cfg.vocab_size]), true);
    for l in 0..cfg.num_layers {
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(layer_name(l, w), tn(&[h, h], rng), true);
        }
        for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo", "ln1.beta", "ln2.beta"] {
            store.insert(layer_name(l, b), Tensor::zeros(&[h]), true);
        }
        store.insert(layer_name(l, "ln1.gamma"), Tensor::filled(&[h], 1.0), true);
        store.insert(layer_name(l, "ln2.gamma"), Tensor::filled(&[h], 1.0), true);
        store.insert(layer_name(l, "ffn.w1"), tn(&[h, cfg.ffn_dim], rng), true);
        store.insert(layer_name(l, "ffn.b1"), Tensor::zeros(&[cfg.ffn_dim]), true);
        store.insert(layer_name(l, "ffn.w2"), tn(&[cfg.ffn_dim, h], rng), true);
        store.insert(layer_name(l, "ffn.b2"), Tensor::zeros(&[h]), true);
    }
}

/// `E(T)[j] = word[piece_j] + type[type_j] + position[j]`.
pub fn embed_tokens(g: &mut Graph, cfg: &EncoderConfig, seq: &TokenSequence) -> Result<Var> {
    seq.validate(cfg)?;
    let word = g.param("encoder.embed.word")?;
    let types = g.param("encoder.embed.type")?;
    let pos = g.param("encoder.embed.position")?;
    let positions: Vec<usize> = (0..seq.len()).collect();
    let w = g.tape.gather_rows(word, &seq.piece_ids)?;
    let t = g.tape.gather_rows(types, &seq.type_ids)?;
    let p = g.tape.gather_rows(pos, &positions)?;
    let wt = g.tape.add(w, t)?;
    g.tape.add(wt, p)
}

fn linear(g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = g.param(w)?;
    let b = g.param(b)?;
    let xw = g.tape.matmul(x, w)?;
    g.tape.add_bias(xw, b)
}

/// Multi-head self-attention; returns the projected output and per-head
/// attention probabilities.
fn self_attention(
    g: &mut Graph,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let q = linear(g, x, &layer_name(layer, "attn.wq"), &layer_name(layer, "attn.bq"))?;
    let k = linear(g, x, &layer_name(layer, "attn.wk"), &layer_name(layer, "attn.bk"))?;
    let v = linear(g, x, &layer_name(layer, "attn.wv"), &layer_name(layer, "attn.bv"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut probs = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let qh = g.tape.slice_cols(q, head * dh, dh)?;
        let kh = g.tape.slice_cols(k, head * dh, dh)?;
        let vh = g.tape.slice_cols(v, head * dh, dh)?;
        let kt = g.tape.transpose(kh)?;
        let scores = g.tape.matmul(qh, kt)?;
        let scores = g.tape.scale(scores, scale);
        let p = g.tape.masked_softmax(scores, mask)?;
        heads.push(g.tape.matmul(p, vh)?);
        probs.push(p);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat(&heads, 1)?
    };
    let out = linear(g, ctx, &layer_name(layer, "attn.wo"), &layer_name(layer, "attn.bo"))?;
    Ok((out, probs))
}

fn encoder_layer(
    g: &mut Graph,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let (attn, probs) = self_attention(g, cfg, layer, x, mask)?;
    let attn = g.dropout(attn);
    let res = g.tape.add(x, attn)?;
    let gamma = g.param(&layer_name(layer, "ln1.gamma"))?;
    let beta = g.param(&layer_name(layer, "ln1.beta"))?;
    let h1 = g.tape.layer_norm(res, gamma, beta, LAYER_NORM_EPS)?;
    let f = linear(g, h1, &layer_name(layer, "ffn.w1"), &layer_name(layer, "ffn.b1"))?;
    let f = g.tape.gelu(f);
    let f = linear(g, f, &layer_name(layer, "ffn.w2"), &layer_name(layer, "ffn.b2"))?;
    let f = g.dropout(f);
    let res = g.tape.add(h1, f)?;
    let gamma = g.param(&layer_name(layer, "ln2.gamma"))?;
    let beta = g.param(&layer_name(layer, "ln2.beta"))?;
    Ok((g.tape.layer_norm(res, gamma, beta, LAYER_NORM_EPS)?, probs))
}

/// Runs layers `layers` of the stack over `x`, collecting attention maps.
pub fn encode_layers(
    g: &mut Graph,
    cfg: &EncoderConfig,
    x: Var,
    mask: &[bool],
    layers: Range<usize>,
) -> Result<(Var, Vec<Var>)> {
    let shape = g.tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.hidden || shape[0] != mask.len() {
        return Err(Error::Dimension(format!(
            "encoder input {shape:?} with mask of {}",
            mask.len()
        )));
    }
    let mut h = x;
    let mut maps = Vec::new();
    for layer in layers {
        let (out, probs) = encoder_layer(g, cfg, layer, h, mask)?;
        h = out;
        maps.extend(probs);
    }
    Ok((h, maps))
}

/// The full contextual stack.
pub fn encode(g: &mut Graph, cfg: &EncoderConfig, x: Var, mask: &[bool]) -> Result<Var> {
    encode_layers(g, cfg, x, mask, 0..cfg.num_layers).map(|(h, _)| h)
}

/// Passage embedding: the `[CLS]` row of the final layer, as a 1×h matrix.
pub fn psi(g: &mut Graph, contextual: Var) -> Result<Var> {
    g.tape.row(contextual, 0)
}

/// Vocabulary logits `H · wordᵀ + bias` for the given rows (all rows when `None`).
pub fn mlm_logits(g: &mut Graph, contextual: Var, rows: Option<&[usize]>) -> Result<Var> {
    let h = match rows {
        Some(r) => g.tape.gather_rows(contextual, r)?,
        None => contextual,
    };
    let word = g.param("encoder.embed.word")?;
    let wt = g.tape.transpose(word)?;
    let logits = g.tape.matmul(h, wt)?;
    let bias = g.param("encoder.mlm.bias")?;
    g.tape.add_bias(logits, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (EncoderConfig, ParamStore) {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden: 4,
            ffn_dim: 8,
            vocab_size: 10,
            type_vocab: 2,
            max_positions: 8,
            dropout_rate: 0.0,
        };
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, store)
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let (cfg, mut store) = toy();
        for n in ["encoder.embed.word", "encoder.embed.type", "encoder.embed.position"] {
            store.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let seq = TokenSequence::new(vec![0, 5, 6], vec![0, 0, 1]);
        let e = embed_tokens(&mut g, &cfg, &seq).unwrap();
        assert!(g.tape.data(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_is_sum_of_rows() {
        let (cfg, store) = toy();
        let mut g = Graph::new(&store);
        let seq = TokenSequence::new(vec![0], vec![1]);
        let e = embed_tokens(&mut g, &cfg, &seq).unwrap();
        let w = store.get("encoder.embed.word").unwrap().row(0).unwrap();
        let t = store.get("encoder.embed.type").unwrap().row(1).unwrap();
        let p = store.get("encoder.embed.position").unwrap().row(0).unwrap();
        let expected: Vec<f64> = (0..4).map(|k| w[k] + t[k] + p[k]).collect();
        assert_eq!(g.tape.data(e), expected.as_slice());
    }

    #[test]
    fn type_ids_shift_by_type_row_difference() {
        let (cfg, store) = toy();
        let mut g = Graph::new(&store);
        let a = embed_tokens(&mut g, &cfg, &TokenSequence::new(vec![0, 7], vec![0, 0])).unwrap();
        let b = embed_tokens(&mut g, &cfg, &TokenSequence::new(vec![0, 7], vec![0, 1])).unwrap();
        let types = store.get("encoder.embed.type").unwrap();
        let diff: Vec<f64> = (0..4)
            .map(|k| types.row(1).unwrap()[k] - types.row(0).unwrap()[k])
            .collect();
        let (da, db) = (g.tape.data(a), g.tape.data(b));
        assert_eq!(&da[..4], &db[..4]);
        for k in 0..4 {
            assert!((db[4 + k] - da[4 + k] - diff[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_vocab_id_is_rejected() {
        let (cfg, store) = toy();
        let mut g = Graph::new(&store);
        let seq = TokenSequence::new(vec![0, 10], vec![0, 0]);
        assert!(matches!(
            embed_tokens(&mut g, &cfg, &seq),
            Err(Error::Vocab(_))
        ));
    }

    #[test]
    fn empty_stack_is_identity() {
        let (mut cfg, store) = toy();
        cfg.num_layers = 0;
        let mut g = Graph::new(&store);
        let x = g
            .tape
            .constant(Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap());
        let y = encode(&mut g, &cfg, x, &[true, true]).unwrap();
        assert_eq!(g.tape.data(y), g.tape.data(x));
    }

    #[test]
    fn psi_reads_row_zero() {
        let (_, store) = toy();
        let mut g = Graph::new(&store);
        let x = g
            .tape
            .constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 9.0, 9.0, 7.0, 7.0]).unwrap());
        let p = psi(&mut g, x).unwrap();
        assert_eq!(g.tape.data(p), &[1.0, 2.0]);
    }

    #[test]
    fn mlm_logits_shape_and_zero_case() {
        let (_, store) = toy();
        let mut g = Graph::new(&store);
        let h = g.tape.constant(Tensor::zeros(&[3, 4]));
        let logits = mlm_logits(&mut g, h, None).unwrap();
        assert_eq!(g.tape.shape(logits), &[3, 10]);
        assert!(g.tape.data(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        cfg = EncoderConfig {
            max_positions: 3,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
