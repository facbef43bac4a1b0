//! Bidirectional character-level transformer encoder with a masked-token
//! prediction head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    clip_grad_norm, AdamW, AdamWConfig, Checkpoint, CheckpointMeta, ParamId, ParamStore,
    Reduction, Tape, Tensor, TensorError, Var,
};
use crate::error::{ModelError, ModelResult};
use crate::nn::{multi_head_attention, padding_visibility, Binder, LayerNorm, Linear};
use crate::text::{Vocabulary, CLS, MASK, PAD, SEP};

pub const NAMESPACE: &str = "encoder/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 128,
            ffn_dim: 512,
            max_positions: 512,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_positions < 2 {
            return Err(ModelError::Config("max_positions must be at least 2".into()));
        }
        Ok(())
    }
}

/// Which end of an over-long text to drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// Keep the most recent characters (dialogue).
    Left,
    /// Keep the head (documents).
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_vector: Vec<f64>,
    pub hidden_states: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    /// Share of selected positions replaced by `[MASK]`.
    pub mask: f64,
    /// Share replaced by a random ordinary token; the rest stay unchanged.
    pub random: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
        }
    }
}

impl MaskPolicy {
    pub const ALL_MASK: MaskPolicy = MaskPolicy {
        mask: 1.0,
        random: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub flagged: Vec<bool>,
    pub attention_mask: Vec<bool>,
}

impl MaskedBatch {
    pub fn flagged_positions(&self) -> Vec<usize> {
        self.flagged
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_flagged(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

fn is_structural(id: usize) -> bool {
    matches!(id, CLS | SEP | PAD)
}

/// Selects each non-structural position with probability `rate` and
/// corrupts it according to `policy`.
pub fn mask_tokens_with<R: Rng + ?Sized>(
    ids: &[usize],
    rate: f64,
    policy: MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> ModelResult<MaskedBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(ModelError::contract(format!("mask rate {rate} outside [0, 1]")));
    }
    let first_ordinary = crate::text::RESERVED.len();
    let mut input_ids = ids.to_vec();
    let mut flagged = vec![false; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if is_structural(id) || rng.random::<f64>() >= rate {
            continue;
        }
        flagged[i] = true;
        let u: f64 = rng.random();
        if u < policy.mask {
            input_ids[i] = MASK;
        } else if u < policy.mask + policy.random {
            input_ids[i] = if vocab_size > first_ordinary {
                rng.random_range(first_ordinary..vocab_size)
            } else {
                MASK
            };
        }
    }
    Ok(MaskedBatch {
        input_ids,
        original_ids: ids.to_vec(),
        flagged,
        attention_mask: ids.iter().map(|&id| id != PAD).collect(),
    })
}

pub fn mask_tokens(
    ids: &[usize],
    rate: f64,
    seed: u64,
    policy: MaskPolicy,
    vocab_size: usize,
) -> ModelResult<MaskedBatch> {
    mask_tokens_with(ids, rate, policy, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct DiagEncoder {
    config: EncoderConfig,
    vocab: Arc<Vocabulary>,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
    mlm: Linear,
    version: String,
}

impl DiagEncoder {
    pub fn new(config: EncoderConfig, vocab: Arc<Vocabulary>, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, std) = (config.d_model, config.init_std);
        let tok_emb = p.insert("encoder/tok_emb", Tensor::randn(&[vocab.len(), d], std, &mut rng));
        let pos_emb = p.insert(
            "encoder/pos_emb",
            Tensor::randn(&[config.max_positions, d], std, &mut rng),
        );
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = format!("encoder/l{l}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::init(&mut p, &format!("{n}/ln1"), d),
                q: Linear::init(&mut p, &format!("{n}/q"), d, d, std, true, &mut rng),
                k: Linear::init(&mut p, &format!("{n}/k"), d, d, std, true, &mut rng),
                v: Linear::init(&mut p, &format!("{n}/v"), d, d, std, true, &mut rng),
                o: Linear::init(&mut p, &format!("{n}/o"), d, d, std, true, &mut rng),
                ln2: LayerNorm::init(&mut p, &format!("{n}/ln2"), d),
                ff1: Linear::init(&mut p, &format!("{n}/ff1"), d, config.ffn_dim, std, true, &mut rng),
                ff2: Linear::init(&mut p, &format!("{n}/ff2"), config.ffn_dim, d, std, true, &mut rng),
            });
        }
        let ln_f = LayerNorm::init(&mut p, "encoder/ln_f", d);
        let mlm = Linear::init(&mut p, "encoder/mlm", d, vocab.len(), std, true, &mut rng);
        let mut enc = Self {
            config,
            vocab,
            params: p,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            mlm,
            version: String::new(),
        };
        enc.refresh_version();
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Content hash of the weights; stored embeddings are tagged with it.
    pub fn version(&self) -> &str {
        &self.version
    }

    fn refresh_version(&mut self) {
        self.version = self.params.checksum(NAMESPACE);
    }

    /// Mutable access for tests and tools that edit weights directly; the
    /// version tag is recomputed when the guard is dropped.
    pub fn params_mut(&mut self) -> ParamsGuard<'_> {
        ParamsGuard { enc: self }
    }

    /// `[CLS] text [SEP]` with the body truncated to fit the position budget.
    pub fn text_ids(&self, text: &str, truncation: Truncation) -> Vec<usize> {
        self.segments_ids(&[text], truncation)
    }

    /// `[CLS] s1 [SEP] s2 ... [SEP]`; an empty list yields `[CLS][SEP]`.
    pub fn segments_ids<S: AsRef<str>>(&self, segments: &[S], truncation: Truncation) -> Vec<usize> {
        let mut body = Vec::new();
        for (i, s) in segments.iter().enumerate() {
            if i > 0 {
                body.push(SEP);
            }
            body.extend(self.vocab.encode(s.as_ref()));
        }
        let budget = self.config.max_positions - 2;
        if body.len() > budget {
            body = match truncation {
                Truncation::Left => body[body.len() - budget..].to_vec(),
                Truncation::Right => body[..budget].to_vec(),
            };
        }
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(CLS);
        ids.extend(body);
        ids.push(SEP);
        ids
    }

    /// Hidden states `(n, d_model)` recorded on the binder's tape.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        ids: &[usize],
        attention_mask: &[bool],
    ) -> ModelResult<Var<'t>> {
        let n = ids.len();
        if n == 0 {
            return Err(ModelError::contract("empty encoder input"));
        }
        if attention_mask.len() != n {
            return Err(TensorError::Dimension {
                op: "encoder_mask",
                left: vec![n],
                right: vec![attention_mask.len()],
            }
            .into());
        }
        if n > self.config.max_positions {
            return Err(ModelError::contract(format!(
                "input of {n} tokens exceeds {} positions",
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(TensorError::Index {
                op: "encoder_tokens",
                index: bad,
                size: self.vocab.len(),
            }
            .into());
        }
        let tape = b.tape();
        let positions: Vec<usize> = (0..n).collect();
        let mut x = tape
            .embedding(b.get(self.tok_emb), ids)?
            .add(&tape.embedding(b.get(self.pos_emb), &positions)?)?;
        let visible = padding_visibility(attention_mask);
        for layer in &self.layers {
            let h = layer.ln1.forward(b, &x)?;
            let q = layer.q.forward(b, &h)?;
            let k = layer.k.forward(b, &h)?;
            let v = layer.v.forward(b, &h)?;
            let att = multi_head_attention(&q, &k, &v, self.config.heads, &visible)?;
            x = x.add(&layer.o.forward(b, &att.output)?)?;
            let h = layer.ln2.forward(b, &x)?;
            let f = layer.ff2.forward(b, &layer.ff1.forward(b, &h)?.gelu()?)?;
            x = x.add(&f)?;
        }
        Ok(self.ln_f.forward(b, &x)?)
    }

    /// Encodes `ids`; inputs beyond the position budget keep their head.
    pub fn encode(&self, ids: &[usize], attention_mask: &[bool]) -> ModelResult<EncoderOutput> {
        let max = self.config.max_positions;
        let (ids, mask) = if ids.len() > max {
            tracing::warn!(len = ids.len(), max, "encoder input truncated");
            (&ids[..max], &attention_mask[..max.min(attention_mask.len())])
        } else {
            (ids, attention_mask)
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let h = self.forward(&b, ids, mask)?;
        let hidden_states = (*h.value()).clone();
        Ok(EncoderOutput {
            cls_vector: hidden_states.row(0).to_vec(),
            hidden_states,
        })
    }

    pub fn encode_text(&self, text: &str, truncation: Truncation) -> ModelResult<EncoderOutput> {
        let ids = self.text_ids(text, truncation);
        let mask = vec![true; ids.len()];
        self.encode(&ids, &mask)
    }

    /// Pooled `[CLS]` representation of `text`.
    pub fn cls(&self, text: &str, truncation: Truncation) -> ModelResult<Vec<f64>> {
        Ok(self.encode_text(text, truncation)?.cls_vector)
    }

    /// Logits `(positions, |V|)` of the prediction head.
    pub fn mlm_logits<'t>(
        &self,
        b: &Binder<'t, '_>,
        hidden: &Var<'t>,
        positions: &[usize],
    ) -> ModelResult<Var<'t>> {
        let rows = b.tape().embedding(*hidden, positions)?;
        Ok(self.mlm.forward(b, &rows)?)
    }

    /// Per-position vocabulary distributions for already computed hidden
    /// states.
    pub fn mlm_probabilities(&self, hidden_states: &Tensor, positions: &[usize]) -> ModelResult<Tensor> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let h = tape.constant(hidden_states.clone());
        let logits = self.mlm_logits(&b, &h, positions)?;
        Ok((*logits.softmax(1)?.value()).clone())
    }

    /// Summed negative log-likelihood over flagged positions and the flagged
    /// count.
    pub fn mlm_loss_sum<'t>(&self, b: &Binder<'t, '_>, batch: &MaskedBatch) -> ModelResult<(Var<'t>, usize)> {
        let positions = batch.flagged_positions();
        if positions.is_empty() {
            return Err(ModelError::contract("masked batch has no flagged positions"));
        }
        let hidden = self.forward(b, &batch.input_ids, &batch.attention_mask)?;
        let logits = self.mlm_logits(b, &hidden, &positions)?;
        let targets: Vec<Option<usize>> = positions.iter().map(|&p| Some(batch.original_ids[p])).collect();
        Ok((logits.cross_entropy(&targets, Reduction::Sum)?, positions.len()))
    }

    /// Mean negative log-likelihood of the original tokens at flagged
    /// positions.
    pub fn mlm_loss(&self, batch: &MaskedBatch) -> ModelResult<f64> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let (sum, count) = self.mlm_loss_sum(&b, batch)?;
        Ok(sum.value().item() / count as f64)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = CheckpointMeta::new(seed, serde_json::json!({ "encoder": self.config }));
        let mut ck = Checkpoint::new(meta);
        ck.add_store(&self.params, &[NAMESPACE]);
        ck
    }

    /// Rebuilds an encoder from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, vocab: Arc<Vocabulary>) -> ModelResult<Self> {
        let config: EncoderConfig = serde_json::from_value(ck.meta.hyperparameters["encoder"].clone())
            .map_err(|e| ModelError::Config(format!("encoder config: {e}")))?;
        let mut enc = Self::new(config, vocab, ck.meta.seed)?;
        enc.params.assign_from(ck, NAMESPACE)?;
        enc.refresh_version();
        Ok(enc)
    }
}

/// Mutable view of encoder weights that re-tags the version on drop.
pub struct ParamsGuard<'a> {
    enc: &'a mut DiagEncoder,
}

impl std::ops::Deref for ParamsGuard<'_> {
    type Target = ParamStore;
    fn deref(&self) -> &ParamStore {
        &self.enc.params
    }
}

impl std::ops::DerefMut for ParamsGuard<'_> {
    fn deref_mut(&mut self) -> &mut ParamStore {
        &mut self.enc.params
    }
}

impl Drop for ParamsGuard<'_> {
    fn drop(&mut self) {
        self.enc.refresh_version();
    }
}

trait AssignFrom {
    fn assign_from(&mut self, ck: &Checkpoint, prefix: &str) -> ModelResult<()>;
}

impl AssignFrom for ParamStore {
    fn assign_from(&mut self, ck: &Checkpoint, prefix: &str) -> ModelResult<()> {
        let expected = self.ids_with_prefix(prefix).len();
        let loaded = ck.load_into(self, &[prefix])?;
        if loaded != expected {
            return Err(ModelError::Config(format!(
                "checkpoint holds {loaded} of {expected} tensors under {prefix}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub clip_norm: f64,
    /// Lines held as a fixed masked evaluation set.
    pub eval_lines: usize,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            mask_rate: 0.15,
            clip_norm: 1.0,
            eval_lines: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    /// Evaluation loss before any update.
    pub initial_loss: f64,
    /// Evaluation loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean training loss within each epoch.
    pub train_losses: Vec<f64>,
    pub steps: u64,
}

impl MlmReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

fn sentence_ids(enc: &DiagEncoder, line: &str) -> Vec<usize> {
    enc.text_ids(line, Truncation::Right)
}

/// Masked-token training over every encoder parameter. Other parameter
/// groups live in separate stores and are never touched.
pub fn pretrain_mlm(enc: &mut DiagEncoder, corpus: &[String], config: &MlmConfig) -> ModelResult<MlmReport> {
    let lines: Vec<&String> = corpus.iter().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(ModelError::contract("empty pretraining corpus"));
    }
    if config.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let vocab_size = enc.vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval: Vec<MaskedBatch> = lines
        .iter()
        .take(config.eval_lines.max(1))
        .enumerate()
        .filter_map(|(i, l)| {
            let ids = sentence_ids(enc, l);
            let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut b = mask_tokens(&ids, config.mask_rate, seed, MaskPolicy::default(), vocab_size).ok()?;
            if b.num_flagged() == 0 {
                force_one_flag(&mut b);
            }
            (b.num_flagged() > 0).then_some(b)
        })
        .collect();
    let eval_loss = |enc: &DiagEncoder| -> ModelResult<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for b in &eval {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &enc.params);
            let (s, c) = enc.mlm_loss_sum(&binder, b)?;
            total += s.value().item();
            count += c;
        }
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    };
    let initial_loss = eval_loss(enc)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut train_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut epoch_total, mut epoch_count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batches: Vec<MaskedBatch> = chunk
                .iter()
                .map(|&i| {
                    let ids = sentence_ids(enc, lines[i]);
                    mask_tokens_with(&ids, config.mask_rate, MaskPolicy::default(), vocab_size, &mut rng)
                })
                .collect::<ModelResult<_>>()?;
            let flagged: usize = batches.iter().map(MaskedBatch::num_flagged).sum();
            if flagged == 0 {
                continue;
            }
            let grads = {
                let tape = Tape::new();
                let binder = Binder::new(&tape, &enc.params);
                let mut total: Option<Var> = None;
                for b in batches.iter().filter(|b| b.num_flagged() > 0) {
                    let (s, _) = enc.mlm_loss_sum(&binder, b)?;
                    total = Some(match total {
                        Some(t) => t.add(&s)?,
                        None => s,
                    });
                }
                let loss = total.expect("at least one flagged batch").scale(1.0 / flagged as f64)?;
                epoch_total += loss.value().item() * flagged as f64;
                epoch_count += flagged;
                tape.backward(loss)?
            };
            enc.params.zero_grad();
            grads.accumulate_into(&mut enc.params)?;
            clip_grad_norm(&mut enc.params, config.clip_norm);
            opt.step(&mut enc.params, config.lr)?;
        }
        enc.refresh_version();
        train_losses.push(epoch_total / epoch_count.max(1) as f64);
        let l = eval_loss(enc)?;
        tracing::info!(epoch, eval_loss = l, "mlm epoch");
        epoch_losses.push(l);
    }
    enc.refresh_version();
    Ok(MlmReport {
        initial_loss,
        epoch_losses,
        train_losses,
        steps: opt.steps_taken(),
    })
}

/// Flags the first eligible position with `[MASK]` so that very short
/// evaluation lines still contribute.
fn force_one_flag(b: &mut MaskedBatch) {
    if let Some(i) = b.original_ids.iter().position(|&id| !is_structural(id)) {
        b.flagged[i] = true;
        b.input_ids[i] = MASK;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            ffn_dim: 32,
            max_positions: 32,
            init_std: 0.1,
        }
    }

    fn tiny() -> DiagEncoder {
        let vocab = Arc::new(Vocabulary::build(["眼睛红肿疼痛流泪视力下降"]));
        DiagEncoder::new(tiny_config(), vocab, 1).unwrap()
    }

    #[test]
    fn rate_zero_flags_nothing() {
        let ids = vec![CLS, 10, 11, 12, SEP];
        let b = mask_tokens(&ids, 0.0, 1, MaskPolicy::default(), 20).unwrap();
        assert_eq!(b.num_flagged(), 0);
        assert_eq!(b.input_ids, ids);
    }

    #[test]
    fn rate_one_all_mask_covers_eligible() {
        let ids = vec![CLS, 10, 11, 12, SEP, PAD];
        let b = mask_tokens(&ids, 1.0, 1, MaskPolicy::ALL_MASK, 20).unwrap();
        assert_eq!(b.flagged, vec![false, true, true, true, false, false]);
        assert_eq!(b.input_ids, vec![CLS, MASK, MASK, MASK, SEP, PAD]);
        assert_eq!(b.attention_mask, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn bad_rate_is_contract_error() {
        assert!(mask_tokens(&[10], 1.5, 0, MaskPolicy::default(), 20).is_err());
        assert!(mask_tokens(&[10], -0.1, 0, MaskPolicy::default(), 20).is_err());
    }

    #[test]
    fn cls_is_first_hidden_row() {
        let enc = tiny();
        let out = enc.encode_text("眼睛红肿", Truncation::Right).unwrap();
        assert_eq!(out.hidden_states.shape(), &[6, 16]);
        assert_eq!(out.cls_vector.as_slice(), out.hidden_states.row(0));
        let again = enc.encode_text("眼睛红肿", Truncation::Right).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn padding_is_invisible() {
        let enc = tiny();
        let mut ids = enc.text_ids("眼睛红", Truncation::Right);
        let real = ids.len();
        ids.extend([PAD, PAD, PAD]);
        let mut mask = vec![true; real];
        mask.extend([false; 3]);
        let a = enc.encode(&ids, &mask).unwrap();
        let mut permuted = ids.clone();
        permuted[real] = 12;
        permuted[real + 2] = 10;
        let b = enc.encode(&permuted, &mask).unwrap();
        let trimmed = enc.encode(&ids[..real], &mask[..real]).unwrap();
        for r in 0..real {
            for ((x, y), z) in a.hidden_states.row(r).iter().zip(b.hidden_states.row(r)).zip(trimmed.hidden_states.row(r)) {
                assert!((x - y).abs() < 1e-9);
                assert!((x - z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn overlong_text_truncates_by_policy() {
        let enc = tiny();
        let text: String = "眼睛".repeat(40) + "疼";
        let left = enc.text_ids(&text, Truncation::Left);
        let right = enc.text_ids(&text, Truncation::Right);
        assert_eq!(left.len(), 32);
        assert_eq!(left[30], enc.vocab().id("疼").unwrap());
        assert_eq!(right[1], enc.vocab().id("眼").unwrap());
        let ids = vec![CLS; 40];
        assert_eq!(enc.encode(&ids, &[true; 40]).unwrap().hidden_states.shape(), &[32, 16]);
    }

    #[test]
    fn mlm_rows_sum_to_one_and_zero_head_is_uniform() {
        let mut enc = tiny();
        let out = enc.encode_text("眼睛红肿", Truncation::Right).unwrap();
        let p = enc.mlm_probabilities(&out.hidden_states, &[1, 2]).unwrap();
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        {
            let mut params = enc.params_mut();
            let (w, b) = (params.id("encoder/mlm/w").unwrap(), params.id("encoder/mlm/b").unwrap());
            params.get_mut(w).value.data_mut().fill(0.0);
            params.get_mut(b).value.data_mut().fill(0.0);
        }
        let p = enc.mlm_probabilities(&out.hidden_states, &[1]).unwrap();
        let v = enc.vocab().len() as f64;
        assert!(p.data().iter().all(|x| (x - 1.0 / v).abs() < 1e-12));
    }

    #[test]
    fn argmax_ignores_constant_bias_shift() {
        let mut enc = tiny();
        let out = enc.encode_text("眼睛红肿", Truncation::Right).unwrap();
        let argmax = |p: &Tensor| {
            (0..p.shape()[0])
                .map(|r| {
                    let row = p.row(r);
                    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
                })
                .collect::<Vec<_>>()
        };
        let before = argmax(&enc.mlm_probabilities(&out.hidden_states, &[1, 2, 3]).unwrap());
        {
            let mut params = enc.params_mut();
            let b = params.id("encoder/mlm/b").unwrap();
            params.get_mut(b).value.data_mut().iter_mut().for_each(|x| *x += 3.5);
        }
        let after = argmax(&enc.mlm_probabilities(&out.hidden_states, &[1, 2, 3]).unwrap());
        assert_eq!(before, after);
    }

    #[test]
    fn loss_requires_flags_and_ignores_unflagged() {
        let enc = tiny();
        let ids = enc.text_ids("眼睛红肿", Truncation::Right);
        let none = mask_tokens(&ids, 0.0, 0, MaskPolicy::default(), enc.vocab().len()).unwrap();
        assert!(enc.mlm_loss(&none).is_err());

        let mut b = none.clone();
        b.flagged[2] = true;
        b.input_ids[2] = MASK;
        let base = enc.mlm_loss(&b).unwrap();
        // Changing the target of an unflagged position leaves the loss alone.
        let mut other = b.clone();
        other.original_ids[3] = enc.vocab().id("疼").unwrap();
        assert_eq!(enc.mlm_loss(&other).unwrap(), base);
    }

    #[test]
    fn version_tracks_weights() {
        let mut enc = tiny();
        let v0 = enc.version().to_string();
        {
            let mut p = enc.params_mut();
            let id = p.id("encoder/ln_f/b").unwrap();
            p.get_mut(id).value.data_mut()[0] = 0.5;
        }
        assert_ne!(enc.version(), v0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = tiny();
        let ck = enc.to_checkpoint(1);
        let back = DiagEncoder::from_checkpoint(&ck, enc.vocab().clone()).unwrap();
        assert_eq!(back.version(), enc.version());
        assert_eq!(
            back.cls("眼睛", Truncation::Left).unwrap(),
            enc.cls("眼睛", Truncation::Left).unwrap()
        );
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut enc = tiny();
        assert!(pretrain_mlm(&mut enc, &[], &MlmConfig::default()).is_err());
    }
}
