//! Causal self-attentive next-item model (SASRec-style) and its item table.
//!
//! Sequences are left-padded to a fixed window, so the most recent item
//! always sits in the last row and the behavior latent is the hidden state
//! of that row. Positional embeddings are indexed right-aligned: a window
//! shorter than `n` uses the last rows of `pos_emb`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, PclError, Result};
use crate::rng::Rng;
use crate::tensor::graph::{dot, AttentionMask};
use crate::tensor::{checkpoint, AdamState, Graph, ParameterGroup, Tensor, Var};

pub const PAD: usize = 0;
const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Embedding width.
    pub d: usize,
    /// Maximum sequence length.
    pub n: usize,
    pub blocks: usize,
    pub heads: usize,
    #[serde(serialize_with = "crate::config::short_f32")]
    pub dropout: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d: 64, n: 50, blocks: 2, heads: 2, dropout: 0.2 }
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig { d: 16, n: 20, blocks: 1, heads: 2, dropout: 0.2 }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.d >= 1 && self.n >= 1, Config, "d and n must be positive");
        ensure!(self.blocks >= 1, Config, "need at least one block");
        ensure!(
            self.heads >= 1 && self.d.is_multiple_of(self.heads),
            Config,
            "d={} is not divisible by h={}",
            self.d,
            self.heads
        );
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout {} outside [0, 1)", self.dropout);
        Ok(())
    }
}

/// A batch of left-padded windows stacked row-wise.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub len: usize,
}

impl SeqBatch {
    /// Left-pads (or keeps the most recent `len` of) each sequence.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S], len: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(left_pad(s.as_ref(), len));
        }
        let valid = ids.iter().map(|&i| i != PAD).collect();
        SeqBatch { ids, valid, len }
    }

    pub fn groups(&self) -> usize {
        self.ids.len() / self.len
    }

    /// Row index of the most recent position of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        (0..self.groups()).map(|g| g * self.len + self.len - 1).collect()
    }

    /// Sequences with no real item.
    pub fn degenerate(&self) -> Vec<bool> {
        self.last_rows().iter().map(|&r| !self.valid[r]).collect()
    }
}

/// Most recent `len` items, left-padded with [`PAD`].
pub fn left_pad(items: &[usize], len: usize) -> Vec<usize> {
    let tail = &items[items.len().saturating_sub(len)..];
    let mut out = vec![PAD; len - tail.len()];
    out.extend_from_slice(tail);
    out
}

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub hidden: Tensor,
    pub latent: Vec<f32>,
    /// True when the sequence had no real item; the latent is then zero.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    num_items: usize,
    params: ParameterGroup,
    frozen: bool,
}

fn block_name(l: usize, part: &str) -> String {
    format!("block{l}.{part}")
}

impl Backbone {
    /// Fresh model over items `1..=num_items`; row 0 of the table is padding.
    pub fn new(config: BackboneConfig, num_items: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        ensure!(num_items >= 1, Config, "empty item catalog");
        let (d, dh) = (config.d, config.head_dim());
        let mut p = ParameterGroup::new();
        let mut table = Tensor::randn(&[num_items + 1, d], INIT_STD, rng);
        table.data_mut()[..d].iter_mut().for_each(|x| *x = 0.0);
        p.insert("item_table", table);
        p.insert("pos_emb", Tensor::randn(&[config.n, d], INIT_STD, rng));
        let attn_std = (1.0 / d as f32).sqrt();
        for l in 0..config.blocks {
            for m in 0..config.heads {
                for w in ["wq", "wk", "wv"] {
                    p.insert(block_name(l, &format!("attn.{w}{m}")), Tensor::randn(&[d, dh], attn_std, rng));
                }
            }
            p.insert(block_name(l, "attn.wo"), Tensor::randn(&[d, d], attn_std, rng));
            for ln in ["ln1", "ln2"] {
                p.insert(block_name(l, &format!("{ln}.gamma")), Tensor::new(vec![d], vec![1.0; d])?);
                p.insert(block_name(l, &format!("{ln}.beta")), Tensor::zeros(&[d]));
            }
            p.insert(block_name(l, "ffn.w1"), Tensor::randn(&[d, d], attn_std, rng));
            p.insert(block_name(l, "ffn.b1"), Tensor::zeros(&[d]));
            p.insert(block_name(l, "ffn.w2"), Tensor::randn(&[d, d], attn_std, rng));
            p.insert(block_name(l, "ffn.b2"), Tensor::zeros(&[d]));
        }
        p.insert("final_ln.gamma", Tensor::new(vec![d], vec![1.0; d])?);
        p.insert("final_ln.beta", Tensor::zeros(&[d]));
        Ok(Backbone { config, num_items, params: p, frozen: false })
    }

    /// Rebuilds a model from checkpoint tensors. Shapes determine `d`, `n`,
    /// the block count and the head count.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>, dropout: f32) -> Result<Self> {
        let mut p = ParameterGroup::new();
        for (name, t) in tensors {
            p.insert(name, t);
        }
        let table = p.require("item_table").map_err(|_| PclError::Load("checkpoint has no item_table".into()))?;
        let d = table.cols();
        let num_items = table.rows() - 1;
        let n = p.require("pos_emb").map_err(|_| PclError::Load("checkpoint has no pos_emb".into()))?.rows();
        let blocks = (0..).take_while(|l| p.contains(&block_name(*l, "attn.wo"))).count();
        let heads = (0..).take_while(|m| p.contains(&block_name(0, &format!("attn.wq{m}")))).count();
        let config = BackboneConfig { d, n, blocks, heads, dropout };
        config.validate().map_err(|e| PclError::Load(format!("inconsistent checkpoint: {e}")))?;
        let fresh = Backbone::new(config.clone(), num_items, &mut Rng::new(0))?;
        for (name, t) in fresh.params.iter() {
            let got = p.get(name).ok_or_else(|| PclError::Load(format!("checkpoint is missing `{name}`")))?;
            ensure!(got.shape() == t.shape(), Load, "`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape());
        }
        ensure!(p.len() == fresh.params.len(), Load, "checkpoint has unexpected tensors");
        Ok(Backbone { config, num_items, params: p, frozen: false })
    }

    pub fn load(path: &std::path::Path, dropout: f32) -> Result<Self> {
        Backbone::from_tensors(checkpoint::load(path)?, dropout)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save_group(path, &self.params)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &ParameterGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterGroup {
        &mut self.params
    }

    pub fn item_table(&self) -> &Tensor {
        self.params.get("item_table").expect("item_table always present")
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Parameters excluding the item table.
    pub fn num_body_parameters(&self) -> usize {
        self.num_parameters() - self.item_table().numel()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every tensor frozen. Idempotent.
    pub fn freeze(&mut self) {
        self.params.freeze_all();
        self.frozen = true;
    }

    /// A trainable copy, for baselines that fine-tune a private model.
    pub fn unfrozen_clone(&self) -> Self {
        let mut b = self.clone();
        let names: Vec<String> = b.params.names().cloned().collect();
        for n in names {
            b.params.unfreeze(&n);
        }
        b.frozen = false;
        b
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.bind(&self.params, name)
    }

    /// Runs the transformer stack over `emb` (rows of `batch`), returning
    /// hidden states with padded rows zeroed. Dropout is applied only when
    /// `dropout` is given and the model is not frozen.
    pub fn encode(&self, g: &mut Graph, emb: Var, batch: &SeqBatch, mut dropout: Option<&mut Rng>) -> Result<Var> {
        let d = self.config.d;
        ensure!(
            g.shape(emb) == [batch.ids.len(), d],
            Dimension,
            "embedding rows {:?} do not match a batch of {} x {d}",
            g.shape(emb),
            batch.ids.len()
        );
        ensure!(batch.len <= self.config.n, Dimension, "window {} exceeds n={}", batch.len, self.config.n);
        let rate = if self.frozen { 0.0 } else { self.config.dropout };
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask =
                        (0..g.value(x).len()).map(|_| if rng.uniform_f32() < rate { 0.0 } else { keep }).collect();
                    g.mul_const(x, mask)
                }
                _ => Ok(x),
            }
        };
        let pos = self.bind(g, "pos_emb")?;
        let mut x = g.add_tail(emb, pos, batch.len, batch.len)?;
        x = drop(g, x)?;
        x = g.mask_rows(x, &batch.valid)?;
        let mask = AttentionMask { causal: true, key_valid: Some(batch.valid.clone()) };
        for l in 0..self.config.blocks {
            let gamma = self.bind(g, &block_name(l, "ln1.gamma"))?;
            let beta = self.bind(g, &block_name(l, "ln1.beta"))?;
            let h = g.layer_norm(x, gamma, beta, LN_EPS)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for m in 0..self.config.heads {
                let wq = self.bind(g, &block_name(l, &format!("attn.wq{m}")))?;
                let wk = self.bind(g, &block_name(l, &format!("attn.wk{m}")))?;
                let wv = self.bind(g, &block_name(l, &format!("attn.wv{m}")))?;
                let q = g.matmul(h, wq)?;
                let k = g.matmul(h, wk)?;
                let v = g.matmul(h, wv)?;
                heads.push(g.attention(q, k, v, batch.len, &mask)?);
            }
            let cat = g.concat_cols(&heads)?;
            let wo = self.bind(g, &block_name(l, "attn.wo"))?;
            let a = g.matmul(cat, wo)?;
            let a = drop(g, a)?;
            x = g.add(x, a)?;

            let gamma = self.bind(g, &block_name(l, "ln2.gamma"))?;
            let beta = self.bind(g, &block_name(l, "ln2.beta"))?;
            let h = g.layer_norm(x, gamma, beta, LN_EPS)?;
            let w1 = self.bind(g, &block_name(l, "ffn.w1"))?;
            let b1 = self.bind(g, &block_name(l, "ffn.b1"))?;
            let w2 = self.bind(g, &block_name(l, "ffn.w2"))?;
            let b2 = self.bind(g, &block_name(l, "ffn.b2"))?;
            let f = g.matmul(h, w1)?;
            let f = g.add_bias(f, b1)?;
            let f = g.relu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add_bias(f, b2)?;
            let f = drop(g, f)?;
            x = g.add(x, f)?;
            x = g.mask_rows(x, &batch.valid)?;
        }
        let gamma = self.bind(g, "final_ln.gamma")?;
        let beta = self.bind(g, "final_ln.beta")?;
        let x = g.layer_norm(x, gamma, beta, LN_EPS)?;
        g.mask_rows(x, &batch.valid)
    }

    /// Single-sequence inference. `pad_mask[j]` is true for padding rows.
    pub fn encode_sequence(&self, emb: &Tensor, pad_mask: &[bool]) -> Result<EncodedSequence> {
        let len = pad_mask.len();
        ensure!(
            emb.shape() == [len, self.config.d] && len >= 1,
            Dimension,
            "expected {len}x{} embeddings, got {:?}",
            self.config.d,
            emb.shape()
        );
        let batch = SeqBatch {
            ids: pad_mask.iter().map(|&p| if p { PAD } else { 1 }).collect(),
            valid: pad_mask.iter().map(|&p| !p).collect(),
            len,
        };
        let mut g = Graph::inference();
        let e = g.constant(emb);
        let h = self.encode(&mut g, e, &batch, None)?;
        let hidden = g.tensor(h);
        let latent = hidden.row(len - 1).to_vec();
        Ok(EncodedSequence { hidden, latent, degenerate: pad_mask[len - 1] })
    }

    /// Hidden states of plain (unprompted) item sequences.
    pub fn latents<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let batch = SeqBatch::from_sequences(chunk, self.config.n);
            let mut g = Graph::inference();
            let table = self.bind(&mut g, "item_table")?;
            let emb = g.embedding(table, &batch.ids)?;
            let h = self.encode(&mut g, emb, &batch, None)?;
            let last = g.gather_rows(h, &batch.last_rows())?;
            out.extend(g.value(last).chunks(self.config.d).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Dot-product scores of `latent` against the given item rows.
    pub fn score_items(&self, latent: &[f32], candidates: &[usize]) -> Result<Vec<f32>> {
        score_against(self.item_table(), latent, candidates)
    }

    /// One optimizer step of next-item BCE over a batch of training
    /// sequences. Every non-pad position predicts its successor against
    /// `negatives` uniformly sampled items. Returns the batch loss.
    pub fn pretrain_step<S: AsRef<[usize]>>(
        &mut self,
        batch: &[S],
        negatives: usize,
        adam: &mut AdamState,
        rng: &mut Rng,
    ) -> Result<f32> {
        ensure!(!self.frozen, Contract, "pretrain_step on a frozen backbone");
        ensure!(negatives >= 1, Config, "need at least one negative per position");
        let n = self.config.n;
        let inputs: Vec<&[usize]> = batch
            .iter()
            .map(|s| {
                let s = s.as_ref();
                &s[..s.len().saturating_sub(1)]
            })
            .collect();
        let targets: Vec<usize> = batch
            .iter()
            .flat_map(|s| {
                let s = s.as_ref();
                left_pad(if s.is_empty() { s } else { &s[1..] }, n)
            })
            .collect();
        let seqs = SeqBatch::from_sequences(&inputs, n);
        let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r] != PAD).collect();
        if rows.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let table = self.bind(&mut g, "item_table")?;
        let emb = g.embedding(table, &seqs.ids)?;
        let h = self.encode(&mut g, emb, &seqs, Some(rng))?;

        let mut h_rows = Vec::with_capacity(rows.len() * (1 + negatives));
        let mut items = Vec::with_capacity(h_rows.capacity());
        let mut labels = Vec::with_capacity(h_rows.capacity());
        for &r in &rows {
            h_rows.push(r);
            items.push(targets[r]);
            labels.push(1.0);
        }
        for _ in 0..negatives {
            for &r in &rows {
                h_rows.push(r);
                items.push(sample_negative(rng, self.num_items, targets[r]));
                labels.push(0.0);
            }
        }
        let hs = g.gather_rows(h, &h_rows)?;
        let es = g.embedding(table, &items)?;
        let logits = g.row_dot(hs, es)?;
        let loss = g.bce_with_logits(logits, &labels)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss)?;
        self.params.accumulate(&grads);
        adam.step(&mut self.params)?;
        Ok(value)
    }
}

/// Uniform item in `1..=num_items` other than `exclude` (when possible).
pub fn sample_negative(rng: &mut Rng, num_items: usize, exclude: usize) -> usize {
    if num_items == 1 {
        return 1;
    }
    loop {
        let c = 1 + rng.below(num_items);
        if c != exclude {
            return c;
        }
    }
}

pub fn score_against(table: &Tensor, latent: &[f32], candidates: &[usize]) -> Result<Vec<f32>> {
    ensure!(!candidates.is_empty(), Contract, "no candidates to score");
    ensure!(latent.len() == table.cols(), Dimension, "latent of {} vs width {}", latent.len(), table.cols());
    candidates
        .iter()
        .map(|&i| {
            if i == PAD || i >= table.rows() {
                Err(PclError::Index(format!("item {i} outside 1..={}", table.rows() - 1)))
            } else {
                Ok(dot(latent, table.row(i)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamConfig;

    fn tiny(d: usize, n: usize, heads: usize) -> Backbone {
        let cfg = BackboneConfig { d, n, blocks: 1, heads, dropout: 0.0 };
        Backbone::new(cfg, 10, &mut Rng::new(42)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { d: 6, heads: 4, ..BackboneConfig::desk() }.validate().is_err());
        assert!(BackboneConfig { blocks: 0, ..BackboneConfig::desk() }.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
    }

    #[test]
    fn left_padding_keeps_most_recent() {
        assert_eq!(left_pad(&[1, 2, 3], 5), vec![0, 0, 1, 2, 3]);
        assert_eq!(left_pad(&[1, 2, 3, 4], 2), vec![3, 4]);
    }

    #[test]
    fn all_pad_sequence_is_degenerate_zero() {
        let b = tiny(4, 5, 2);
        let out = b.encode_sequence(&Tensor::zeros(&[5, 4]), &[true; 5]).unwrap();
        assert!(out.degenerate);
        assert!(out.latent.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_embedding_shape() {
        let b = tiny(4, 5, 2);
        assert!(matches!(b.encode_sequence(&Tensor::zeros(&[5, 3]), &[false; 5]), Err(PclError::Dimension(_))));
    }

    #[test]
    fn causal_outputs_ignore_later_positions() {
        let b = tiny(8, 6, 2);
        let mut rng = Rng::new(9);
        let emb = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let base = b.encode_sequence(&emb, &[false; 6]).unwrap().hidden;
        for j in 1..6 {
            let mut e2 = emb.clone();
            for x in &mut e2.data_mut()[j * 8..] {
                *x += 3.0;
            }
            let out = b.encode_sequence(&e2, &[false; 6]).unwrap().hidden;
            assert_eq!(&out.data()[..j * 8], &base.data()[..j * 8], "position {j} leaked");
        }
    }

    #[test]
    fn left_pad_does_not_change_latent() {
        let b = tiny(8, 6, 2);
        let seq = [3usize, 5, 7];
        let short = b.latents(&[seq.to_vec()]).unwrap();
        // Same items embedded in a 3-row window versus the padded 6-row one.
        let mut g = Graph::inference();
        let table = b.bind(&mut g, "item_table").unwrap();
        let batch = SeqBatch::from_sequences(&[seq], 3);
        let emb = g.embedding(table, &batch.ids).unwrap();
        let h = b.encode(&mut g, emb, &batch, None).unwrap();
        assert_eq!(&g.value(h)[2 * 8..], short[0].as_slice());
    }

    #[test]
    fn orthonormal_scores() {
        let mut b = tiny(4, 3, 1);
        let mut table = Tensor::zeros(&[5, 4]);
        for i in 1..5 {
            table.data_mut()[i * 4 + (i - 1)] = 1.0;
        }
        b.params.insert("item_table", table);
        let scores = b.score_items(&[0.0, 0.0, 1.0, 0.0], &[1, 2, 3, 4]).unwrap();
        assert_eq!(scores, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(b.score_items(&[0.0; 4], &[0]), Err(PclError::Index(_))));
        assert!(b.score_items(&[0.0; 4], &[]).is_err());
    }

    #[test]
    fn score_linearity() {
        let b = tiny(4, 3, 1);
        let latent = [0.3, -1.0, 2.0, 0.5];
        let scaled: Vec<f32> = latent.iter().map(|x| x * 2.0).collect();
        let a = b.score_items(&latent, &[1, 2, 3]).unwrap();
        let s = b.score_items(&scaled, &[1, 2, 3]).unwrap();
        for (x, y) in a.iter().zip(&s) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn pretrain_after_freeze_is_contract_error() {
        let mut b = tiny(4, 3, 1);
        b.freeze();
        b.freeze();
        let mut adam = AdamState::new(AdamConfig::default());
        let r = b.pretrain_step(&[vec![1, 2, 3]], 1, &mut adam, &mut Rng::new(0));
        assert!(matches!(r, Err(PclError::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = tiny(4, 3, 2);
        let bytes = b.checkpoint_bytes().unwrap();
        let back = Backbone::from_tensors(checkpoint::decode(&bytes).unwrap(), 0.0).unwrap();
        assert_eq!(back.config(), b.config());
        assert_eq!(back.checkpoint_bytes().unwrap(), bytes);
    }
}
