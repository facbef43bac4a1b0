//! Decoder-only language model with frozen base weights, low-rank adapters
//! on the query/value projections and role-conditioned attention prefixes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, CheckpointMeta, ParamId, ParamStore, Reduction, Tape, Tensor, TensorError, Var};
use crate::dialogue::{keep_last_chars, Role, Turn, HISTORY_CHAR_BUDGET};
use crate::error::{ModelError, ModelResult};
use crate::nn::{causal_visibility, multi_head_attention, AttentionOutput, Binder, LayerNorm, Linear};
use crate::roles::{PrefixVars, RoleConfig, RoleEncoding, RoleLearner};
use crate::text::{Vocabulary, DOCTOR, EOS, KB, PATIENT};

pub const BASE_NAMESPACE: &str = "base/";
pub const LORA_NAMESPACE: &str = "lora/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    /// Maximum sequence length in tokens.
    pub context: usize,
    pub init_std: f64,
    /// Standard deviation of the output projection.
    pub head_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 256,
            ffn_dim: 1024,
            context: 1536,
            init_std: 0.02,
            head_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the down projection; the up projection starts
    /// at zero.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 2.0,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub roles: RoleConfig,
    /// Width of the encoder `[CLS]` vectors feeding the role learner.
    pub d_enc: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            roles: RoleConfig::default(),
            d_enc: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> ModelResult<()> {
        let d = &self.decoder;
        if d.heads == 0 || d.d_model % d.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                d.d_model, d.heads
            )));
        }
        if self.lora.rank == 0 || self.lora.rank > d.d_model {
            return Err(ModelError::contract(format!(
                "lora rank {} outside 1..={}",
                self.lora.rank, d.d_model
            )));
        }
        if d.context < 4 {
            return Err(ModelError::Config("context too small".into()));
        }
        Ok(())
    }
}

/// Which adapted parts run in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_kb: bool,
    pub no_roles: bool,
    pub only_lora: bool,
    pub only_prefix: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixSource {
    None,
    /// Computed from the doctor and patient histories.
    Roles,
    /// Learned, dialogue-independent.
    Free,
}

impl Ablation {
    pub fn validate(&self) -> ModelResult<()> {
        if self.only_lora && self.only_prefix {
            return Err(ModelError::Config("only_lora and only_prefix are mutually exclusive".into()));
        }
        Ok(())
    }

    pub fn use_lora(&self) -> bool {
        !self.only_prefix
    }

    pub fn use_kb(&self) -> bool {
        !self.no_kb
    }

    pub fn prefix_source(&self) -> PrefixSource {
        if self.only_lora {
            PrefixSource::None
        } else if self.no_roles {
            PrefixSource::Free
        } else {
            PrefixSource::Roles
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraPair {
    pub down: ParamId,
    pub up: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    lora_q: LoraPair,
    lora_v: LoraPair,
}

/// `h · W (+ b) + α · (h · down) · up`. `down` is `(d, r)`, `up` is `(r, d)`.
pub fn lora_fused_projection<'t>(
    h: &Var<'t>,
    weight: &Var<'t>,
    bias: Option<&Var<'t>>,
    down: &Var<'t>,
    up: &Var<'t>,
    alpha: f64,
) -> ModelResult<Var<'t>> {
    let d = weight.value().as_matrix_dims().0;
    let r = down.value().as_matrix_dims().1;
    if r > d || r == 0 {
        return Err(ModelError::contract(format!("lora rank {r} outside 1..={d}")));
    }
    let mut base = h.matmul(weight)?;
    if let Some(b) = bias {
        base = base.add_row(b)?;
    }
    let delta = h.matmul(down)?.matmul(up)?.scale(alpha)?;
    Ok(base.add(&delta)?)
}

/// Multi-head attention of `q` over `concat(prefix_k, k)` and
/// `concat(prefix_v, v)`. Every query sees all prefix rows; sequence keys are
/// causally masked. With no prefix this is plain causal attention.
pub fn prefix_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    prefix: Option<(&Var<'t>, &Var<'t>)>,
    heads: usize,
) -> ModelResult<AttentionOutput<'t>> {
    let n = q.value().as_matrix_dims().0;
    let (k_all, v_all, past) = match prefix {
        None => (*k, *v, 0),
        Some((pk, pv)) => {
            let (lk, lv) = (pk.value().as_matrix_dims().0, pv.value().as_matrix_dims().0);
            if lk != lv {
                return Err(ModelError::contract(format!(
                    "key prefix has {lk} rows, value prefix {lv}"
                )));
            }
            let tape = q.tape();
            (tape.concat_rows(&[*pk, *k])?, tape.concat_rows(&[*pv, *v])?, lk)
        }
    };
    let seq = k.value().as_matrix_dims().0;
    if seq != n {
        return Err(TensorError::Dimension {
            op: "prefix_attention",
            left: vec![n],
            right: vec![seq],
        }
        .into());
    }
    Ok(multi_head_attention(q, &k_all, &v_all, heads, &causal_visibility(n, past))?)
}

/// Token ids of `X_input`: optional knowledge segment, then role-marked
/// dialogue turns, ending with the doctor cue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    /// Tokens belonging to the knowledge segment, marker included.
    pub knowledge_len: usize,
    /// Dialogue turns that survived truncation.
    pub turns_kept: usize,
}

impl ModelInput {
    pub fn knowledge_ids(&self) -> &[usize] {
        &self.ids[..self.knowledge_len]
    }

    pub fn has_knowledge(&self) -> bool {
        self.knowledge_len > 0
    }
}

fn role_marker(role: Role) -> usize {
    match role {
        Role::Patient => PATIENT,
        Role::Doctor => DOCTOR,
    }
}

/// Builds the model input within `budget` tokens. Oldest turns are dropped
/// first (also to respect the history character budget); the knowledge text
/// is then cut from the right; a lone remaining turn keeps its tail.
pub fn assemble_input(knowledge: Option<&str>, history: &[Turn], vocab: &Vocabulary, budget: usize) -> ModelInput {
    let mut turns: Vec<(Role, String)> = history.iter().map(|t| (t.role, t.text.trim().to_string())).collect();
    let chars = |ts: &[(Role, String)]| ts.iter().map(|(_, t)| t.chars().count()).sum::<usize>();
    while turns.len() > 1 && chars(&turns) > HISTORY_CHAR_BUDGET {
        turns.remove(0);
    }
    if let [(_, only)] = turns.as_mut_slice() {
        *only = keep_last_chars(only, HISTORY_CHAR_BUDGET);
    }
    let mut turn_ids: Vec<Vec<usize>> = turns
        .iter()
        .map(|(role, text)| {
            let mut ids = vec![role_marker(*role)];
            ids.extend(vocab.encode(text));
            ids
        })
        .collect();
    let mut know: Vec<usize> = match knowledge {
        Some(k) if !k.trim().is_empty() => {
            let mut ids = vec![KB];
            ids.extend(vocab.encode(k));
            ids
        }
        _ => Vec::new(),
    };
    let total = |know: &[usize], turn_ids: &[Vec<usize>]| know.len() + turn_ids.iter().map(Vec::len).sum::<usize>() + 1;
    while turn_ids.len() > 1 && total(&know, &turn_ids) > budget {
        turn_ids.remove(0);
    }
    let over = total(&know, &turn_ids).saturating_sub(budget);
    if over > 0 && !know.is_empty() {
        let keep = know.len().saturating_sub(over);
        know.truncate(keep);
        if know.len() <= 1 {
            know.clear();
        }
    }
    let over = total(&know, &turn_ids).saturating_sub(budget);
    if over > 0 {
        if let Some(t) = turn_ids.first_mut() {
            let cut = over.min(t.len().saturating_sub(1));
            t.drain(1..1 + cut);
        }
    }
    let knowledge_len = know.len();
    let turns_kept = turn_ids.len();
    let mut ids = know;
    for t in turn_ids {
        ids.extend(t);
    }
    ids.push(DOCTOR);
    ModelInput {
        ids,
        knowledge_len,
        turns_kept,
    }
}

/// Role conditioning for one forward pass: the two `[CLS]` vectors from the
/// frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleCls {
    pub doctor: Vec<f64>,
    pub patient: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DecodeMode {
    #[default]
    Greedy,
    TopK {
        k: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            mode: DecodeMode::Greedy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedModel {
    config: ModelConfig,
    vocab: Arc<Vocabulary>,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    head: ParamId,
    roles: RoleLearner,
    seed: u64,
}

/// Key/value rows visible to new tokens, per layer.
#[derive(Debug, Clone, Default)]
pub struct DecodeCache {
    layers: Vec<(Tensor, Tensor)>,
    /// Sequence tokens already processed.
    pub len: usize,
}

impl AdaptedModel {
    /// Random base weights (frozen), zero-initialised up projections, role
    /// learner and prefix projections.
    pub fn new(config: ModelConfig, vocab: Arc<Vocabulary>, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let dc = &config.decoder;
        let (d, std) = (dc.d_model, dc.init_std);
        let tok_emb = p.insert("base/tok_emb", Tensor::randn(&[vocab.len(), d], std, &mut rng));
        let pos_emb = p.insert("base/pos_emb", Tensor::randn(&[dc.context, d], std, &mut rng));
        let mut layers = Vec::with_capacity(dc.layers);
        for l in 0..dc.layers {
            let n = format!("base/l{l}");
            let ln1 = LayerNorm::init(&mut p, &format!("{n}/ln1"), d);
            let q = Linear::init(&mut p, &format!("{n}/q"), d, d, std, true, &mut rng);
            let k = Linear::init(&mut p, &format!("{n}/k"), d, d, std, true, &mut rng);
            let v = Linear::init(&mut p, &format!("{n}/v"), d, d, std, true, &mut rng);
            let o = Linear::init(&mut p, &format!("{n}/o"), d, d, std, true, &mut rng);
            let ln2 = LayerNorm::init(&mut p, &format!("{n}/ln2"), d);
            let ff1 = Linear::init(&mut p, &format!("{n}/ff1"), d, dc.ffn_dim, std, true, &mut rng);
            let ff2 = Linear::init(&mut p, &format!("{n}/ff2"), dc.ffn_dim, d, std, true, &mut rng);
            layers.push(DecoderLayer {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ff1,
                ff2,
                lora_q: LoraPair { down: ParamId(0), up: ParamId(0) },
                lora_v: LoraPair { down: ParamId(0), up: ParamId(0) },
            });
        }
        let ln_f = LayerNorm::init(&mut p, "base/ln_f", d);
        let head = p.insert("base/head", Tensor::randn(&[d, vocab.len()], dc.head_std, &mut rng));
        let r = config.lora.rank;
        for (l, layer) in layers.iter_mut().enumerate() {
            let mut pair = |name: &str, rng: &mut ChaCha8Rng| LoraPair {
                down: p.insert(
                    format!("lora/l{l}/{name}/down"),
                    Tensor::randn(&[d, r], config.lora.init_std, rng),
                ),
                up: p.insert(format!("lora/l{l}/{name}/up"), Tensor::zeros(&[r, d])),
            };
            layer.lora_q = pair("q", &mut rng);
            layer.lora_v = pair("v", &mut rng);
        }
        let roles = RoleLearner::init(&mut p, config.roles.clone(), config.d_enc, d, dc.layers, &mut rng);
        p.set_frozen(BASE_NAMESPACE, true);
        Ok(Self {
            config,
            vocab,
            store: p,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            head,
            roles,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn roles(&self) -> &RoleLearner {
        &self.roles
    }

    pub fn lora_pairs(&self) -> Vec<(LoraPair, LoraPair)> {
        self.layers.iter().map(|l| (l.lora_q, l.lora_v)).collect()
    }

    /// Per-layer prefixes for the given source, or `None`.
    pub fn prefix_vars<'t>(
        &self,
        b: &Binder<'t, '_>,
        source: PrefixSource,
        cls: Option<&RoleCls>,
    ) -> ModelResult<Option<Vec<PrefixVars<'t>>>> {
        if self.roles.prefix_len() == 0 {
            return Ok(None);
        }
        match source {
            PrefixSource::None => Ok(None),
            PrefixSource::Free => Ok(Some(self.roles.free_prefix_vars(b))),
            PrefixSource::Roles => {
                let cls = cls.ok_or_else(|| ModelError::contract("role prefixes need role encodings"))?;
                Ok(Some(self.roles.prefixes(b, &cls.doctor, &cls.patient)?))
            }
        }
    }

    /// Runs the stack over `ids` placed at positions `start..`. `past` holds
    /// per-layer rows every new token may attend to (prefixes and cached
    /// tokens). Returns final hidden states and each layer's full key/value
    /// rows.
    #[allow(clippy::type_complexity)]
    fn run<'t>(
        &self,
        b: &Binder<'t, '_>,
        ids: &[usize],
        start: usize,
        past: Option<&[(Var<'t>, Var<'t>)]>,
        use_lora: bool,
    ) -> ModelResult<(Var<'t>, Vec<(Var<'t>, Var<'t>)>)> {
        let n = ids.len();
        if n == 0 {
            return Err(ModelError::contract("empty decoder input"));
        }
        if start + n > self.config.decoder.context {
            return Err(ModelError::contract(format!(
                "sequence of {} tokens exceeds context {}",
                start + n,
                self.config.decoder.context
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(TensorError::Index {
                op: "decoder_tokens",
                index: bad,
                size: self.vocab.len(),
            }
            .into());
        }
        let tape = b.tape();
        let positions: Vec<usize> = (start..start + n).collect();
        let mut x = tape
            .embedding(b.get(self.tok_emb), ids)?
            .add(&tape.embedding(b.get(self.pos_emb), &positions)?)?;
        let alpha = self.config.lora.alpha;
        let mut kv = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.ln1.forward(b, &x)?;
            let proj = |lin: &Linear, pair: &LoraPair| -> ModelResult<Var<'t>> {
                if use_lora {
                    lora_fused_projection(
                        &h,
                        &b.get(lin.weight),
                        lin.bias.map(|id| b.get(id)).as_ref(),
                        &b.get(pair.down),
                        &b.get(pair.up),
                        alpha,
                    )
                } else {
                    Ok(lin.forward(b, &h)?)
                }
            };
            let q = proj(&layer.q, &layer.lora_q)?;
            let k = layer.k.forward(b, &h)?;
            let v = proj(&layer.v, &layer.lora_v)?;
            let p = past.map(|p| (&p[l].0, &p[l].1));
            let att = prefix_attention(&q, &k, &v, p, self.config.decoder.heads)?;
            let (k_all, v_all) = match p {
                Some((pk, pv)) => (tape.concat_rows(&[*pk, k])?, tape.concat_rows(&[*pv, v])?),
                None => (k, v),
            };
            kv.push((k_all, v_all));
            x = x.add(&layer.o.forward(b, &att.output)?)?;
            let h = layer.ln2.forward(b, &x)?;
            let f = layer.ff2.forward(b, &layer.ff1.forward(b, &h)?.gelu()?)?;
            x = x.add(&f)?;
        }
        Ok((self.ln_f.forward(b, &x)?, kv))
    }

    fn past_from_prefix<'t>(prefixes: Option<&[PrefixVars<'t>]>) -> Option<Vec<(Var<'t>, Var<'t>)>> {
        prefixes.map(|ps| ps.iter().map(|p| (p.keys, p.values)).collect())
    }

    /// Logits `(n, |V|)` for every position of `ids`.
    pub fn logits<'t>(
        &self,
        b: &Binder<'t, '_>,
        ids: &[usize],
        prefixes: Option<&[PrefixVars<'t>]>,
        use_lora: bool,
    ) -> ModelResult<Var<'t>> {
        let past = Self::past_from_prefix(prefixes);
        let (h, _) = self.run(b, ids, 0, past.as_deref(), use_lora)?;
        Ok(h.matmul(&b.get(self.head))?)
    }

    /// Logits of the unadapted base model.
    pub fn base_logits(&self, ids: &[usize]) -> ModelResult<Tensor> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store);
        let out = self.logits(&b, ids, None, false)?;
        Ok((*out.value()).clone())
    }

    /// Summed cross-entropy of `target` followed by `[EOS]` given `input`.
    /// Input tokens are never scored.
    pub fn target_loss<'t>(
        &self,
        b: &Binder<'t, '_>,
        input: &ModelInput,
        target: &[usize],
        prefixes: Option<&[PrefixVars<'t>]>,
        use_lora: bool,
    ) -> ModelResult<Var<'t>> {
        if input.ids.is_empty() {
            return Err(ModelError::contract("empty model input"));
        }
        let mut seq = input.ids.clone();
        seq.extend_from_slice(target);
        let n_in = input.ids.len();
        let past = Self::past_from_prefix(prefixes);
        let (h, _) = self.run(b, &seq, 0, past.as_deref(), use_lora)?;
        let rows = h.slice_rows(n_in - 1, seq.len())?;
        let logits = rows.matmul(&b.get(self.head))?;
        let targets: Vec<Option<usize>> = target.iter().copied().chain([EOS]).map(Some).collect();
        Ok(logits.cross_entropy(&targets, Reduction::Sum)?)
    }

    /// Token ids of a response text, as scored during training.
    pub fn target_ids(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(text)
    }

    /// Input budget leaving room for `reserve` generated or target tokens
    /// (plus the end marker).
    pub fn input_budget(&self, reserve: usize) -> usize {
        self.config.decoder.context.saturating_sub(reserve + 1).max(2)
    }

    /// Concrete per-layer prefixes for decoding. Free prefixes are returned
    /// in the same shape with empty role vectors.
    pub fn prefix_encoding(&self, source: PrefixSource, cls: Option<&RoleCls>) -> ModelResult<Option<RoleEncoding>> {
        if self.roles.prefix_len() == 0 {
            return Ok(None);
        }
        match source {
            PrefixSource::None => Ok(None),
            PrefixSource::Roles => {
                let cls = cls.ok_or_else(|| ModelError::contract("role prefixes need role encodings"))?;
                Ok(Some(self.roles.encode_cls(&self.store, &cls.doctor, &cls.patient)?))
            }
            PrefixSource::Free => {
                let free = self.roles.free_prefixes();
                Ok(Some(RoleEncoding {
                    doctor_vec: Vec::new(),
                    patient_vec: Vec::new(),
                    doctor_prefix: free.iter().map(|f| self.store.value(f.key).clone()).collect(),
                    patient_prefix: free.iter().map(|f| self.store.value(f.value).clone()).collect(),
                }))
            }
        }
    }

    /// Seeds a decode cache with the prefixes (if any) and the input tokens,
    /// returning last-position logits.
    pub fn prefill(
        &self,
        ids: &[usize],
        roles: Option<&RoleEncoding>,
        use_lora: bool,
    ) -> ModelResult<(DecodeCache, Vec<f64>)> {
        let cache = DecodeCache {
            layers: match roles {
                Some(r) if self.roles.prefix_len() > 0 => r
                    .doctor_prefix
                    .iter()
                    .cloned()
                    .zip(r.patient_prefix.iter().cloned())
                    .collect(),
                _ => Vec::new(),
            },
            len: 0,
        };
        self.extend(cache, ids, use_lora)
    }

    /// Feeds `ids` after the cached tokens.
    pub fn extend(&self, mut cache: DecodeCache, ids: &[usize], use_lora: bool) -> ModelResult<(DecodeCache, Vec<f64>)> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store);
        let past: Option<Vec<(Var, Var)>> = (!cache.layers.is_empty()).then(|| {
            cache
                .layers
                .iter()
                .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
                .collect()
        });
        let (h, kv) = self.run(&b, ids, cache.len, past.as_deref(), use_lora)?;
        let last = h.slice_rows(ids.len() - 1, ids.len())?;
        let logits = last.matmul(&b.get(self.head))?.value().data().to_vec();
        cache.layers = kv.iter().map(|(k, v)| ((*k.value()).clone(), (*v.value()).clone())).collect();
        cache.len += ids.len();
        Ok((cache, logits))
    }

    /// Autoregressive decoding until `[EOS]`, the token limit or the context
    /// end.
    pub fn generate(
        &self,
        input: &ModelInput,
        roles: Option<&RoleEncoding>,
        use_lora: bool,
        opts: GenerateOptions,
    ) -> ModelResult<String> {
        Ok(self.vocab.decode(&self.generate_ids(input, roles, use_lora, opts)?))
    }

    pub fn generate_ids(
        &self,
        input: &ModelInput,
        roles: Option<&RoleEncoding>,
        use_lora: bool,
        opts: GenerateOptions,
    ) -> ModelResult<Vec<usize>> {
        if input.ids.is_empty() {
            return Err(ModelError::contract("empty model input"));
        }
        let mut rng = match opts.mode {
            DecodeMode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeMode::Greedy => None,
        };
        let (mut cache, mut logits) = self.prefill(&input.ids, roles, use_lora)?;
        let mut out = Vec::new();
        for _ in 0..opts.max_new_tokens {
            let next = match (opts.mode, rng.as_mut()) {
                (DecodeMode::TopK { k, .. }, Some(rng)) => sample_top_k(&logits, k.max(1), rng),
                _ => argmax(&logits),
            };
            if next == EOS || cache.len + 1 > self.config.decoder.context {
                break;
            }
            out.push(next);
            if cache.len + 1 >= self.config.decoder.context {
                break;
            }
            (cache, logits) = self.extend(cache, &[next], use_lora)?;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, prefixes: &[&str], extra: serde_json::Value) -> Checkpoint {
        let meta = CheckpointMeta::new(
            self.seed,
            serde_json::json!({ "model": self.config, "extra": extra }),
        );
        let mut ck = Checkpoint::new(meta);
        ck.add_store(&self.store, prefixes);
        ck
    }

    /// Rebuilds the model described by a checkpoint's metadata and loads
    /// every tensor it holds.
    pub fn from_checkpoint(ck: &Checkpoint, vocab: Arc<Vocabulary>) -> ModelResult<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta.hyperparameters["model"].clone())
            .map_err(|e| ModelError::Config(format!("model config: {e}")))?;
        let mut m = Self::new(config, vocab, ck.meta.seed)?;
        ck.load_into(&mut m.store, &[])?;
        Ok(m)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let max = logits[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in idx.iter().zip(&weights) {
        if u < *w {
            return *i;
        }
        u -= w;
    }
    idx[idx.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    pub(crate) fn tiny_config(prefix_len: usize) -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                d_model: 8,
                ffn_dim: 16,
                context: 64,
                init_std: 0.2,
                head_std: 0.2,
            },
            lora: LoraConfig {
                rank: 2,
                alpha: 2.0,
                init_std: 0.2,
            },
            roles: RoleConfig {
                prefix_len,
                projection_std: 0.2,
                ..RoleConfig::default()
            },
            d_enc: 6,
        }
    }

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::build(["眼睛红肿疼痛流泪视力下降请滴眼药水"]))
    }

    #[test]
    fn lora_hand_case() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::eye(2));
        let down = tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let up = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let out = lora_fused_projection(&h, &w, None, &down, &up, 1.0).unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0]);
        let zero_alpha = lora_fused_projection(&h, &w, None, &down, &up, 0.0).unwrap();
        assert_eq!(zero_alpha.value().data(), &[1.0, 1.0]);
        let big = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(lora_fused_projection(&h, &w, None, &big, &up, 1.0).is_err());
    }

    #[test]
    fn prefix_attention_hand_case() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::matrix(1, 2, vec![2.0, 4.0]).unwrap());
        let pk = tape.constant(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
        let pv = tape.constant(Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap());
        let out = prefix_attention(&q, &k, &v, Some((&pk, &pv)), 1).unwrap();
        assert_eq!(out.output.value().data(), &[1.0, 3.0]);
        let short = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(prefix_attention(&q, &k, &v, Some((&pk, &short)), 1).is_err());
    }

    #[test]
    fn prefix_visible_to_every_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let pk = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let pv = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let out = prefix_attention(&q, &k, &v, Some((&pk, &pv)), 2).unwrap();
        for w in &out.weights {
            let w = w.value();
            for r in 0..3 {
                let row = w.row(r);
                assert!(row[0] > 0.0 && row[1] > 0.0);
                for (j, x) in row[2..].iter().enumerate() {
                    assert_eq!(*x == 0.0, j > r);
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_adapters_match_base() {
        let m = AdaptedModel::new(tiny_config(0), vocab(), 3).unwrap();
        let ids = vec![7, 9, 10, 11, 8];
        let base = m.base_logits(&ids).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, m.store());
        let adapted = m.logits(&b, &ids, None, true).unwrap();
        assert_eq!(adapted.value().data(), base.data());
    }

    #[test]
    fn causal_logits() {
        let m = AdaptedModel::new(tiny_config(3), vocab(), 3).unwrap();
        let cls = RoleCls {
            doctor: vec![0.1; 6],
            patient: vec![0.3; 6],
        };
        let run = |ids: &[usize]| {
            let tape = Tape::new();
            let b = Binder::new(&tape, m.store());
            let p = m.prefix_vars(&b, PrefixSource::Roles, Some(&cls)).unwrap();
            let out = m.logits(&b, ids, p.as_deref(), true).unwrap();
            (*out.value()).clone()
        };
        let a = run(&[7, 9, 10, 11]);
        let b = run(&[7, 9, 12, 11]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let m = AdaptedModel::new(tiny_config(3), vocab(), 5).unwrap();
        let roles = m.roles().encode_cls(m.store(), &[0.2; 6], &[-0.1; 6]).unwrap();
        let ids = vec![7, 9, 10, 11, 8, 12];
        let (cache, _) = m.prefill(&ids[..4], Some(&roles), true).unwrap();
        let (cache, _) = m.extend(cache, &ids[4..5], true).unwrap();
        let (_, last) = m.extend(cache, &ids[5..], true).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, m.store());
        let cls = RoleCls {
            doctor: vec![0.2; 6],
            patient: vec![-0.1; 6],
        };
        let p = m.prefix_vars(&b, PrefixSource::Roles, Some(&cls)).unwrap();
        let full = m.logits(&b, &ids, p.as_deref(), true).unwrap();
        for (x, y) in full.value().row(5).iter().zip(&last) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn assemble_orders_and_truncates() {
        let v = vocab();
        let hist = vec![Turn::patient("眼睛红"), Turn::doctor("滴眼药水"), Turn::patient("疼痛")];
        let plain = assemble_input(None, &hist, &v, 100);
        assert!(!plain.has_knowledge());
        assert_eq!(plain.ids[0], PATIENT);
        assert_eq!(*plain.ids.last().unwrap(), DOCTOR);
        let with = assemble_input(Some("视力下降"), &hist, &v, 100);
        assert_eq!(with.ids[0], KB);
        assert_eq!(with.knowledge_len, 5);
        // Budget forces the two oldest turns out before knowledge shrinks.
        let tight = assemble_input(Some("视力下降"), &hist, &v, 5 + 3 + 1);
        assert_eq!(tight.turns_kept, 1);
        assert_eq!(tight.knowledge_len, 5);
        let tighter = assemble_input(Some("视力下降"), &hist, &v, 7);
        assert_eq!(tighter.turns_kept, 1);
        assert_eq!(tighter.knowledge_len, 3);
        assert_eq!(tighter.ids.len(), 7);
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = AdaptedModel::new(tiny_config(2), vocab(), 9).unwrap();
        let input = assemble_input(None, &[Turn::patient("眼睛红")], m.vocab(), 32);
        let roles = m.roles().encode_cls(m.store(), &[0.2; 6], &[0.1; 6]).unwrap();
        let opts = GenerateOptions {
            max_new_tokens: 8,
            mode: DecodeMode::Greedy,
        };
        let a = m.generate_ids(&input, Some(&roles), true, opts).unwrap();
        let b = m.generate_ids(&input, Some(&roles), true, opts).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 8);
    }
}
