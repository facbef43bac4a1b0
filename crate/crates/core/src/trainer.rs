//! Parameter-efficient fine-tuning: example preparation, the per-batch
//! objective, the warmup schedule and the epoch loop with validation
//! checkpointing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::decoder::{
    assemble_input, Ablation, AdaptedModel, ModelConfig, ModelInput, PrefixSource, RoleCls, BASE_NAMESPACE,
    LORA_NAMESPACE,
};
use crate::dialogue::{Dialogue, Turn};
use crate::encoder::DiagEncoder;
use crate::error::{ModelError, ModelResult};
use crate::kb::{compose_document, KbIndex};
use crate::nn::Binder;
use crate::roles::{role_cls, split_history, ROLE_NAMESPACE};

/// Trainable namespaces saved in adapter checkpoints.
pub const ADAPTER_NAMESPACES: [&str; 3] = [LORA_NAMESPACE, ROLE_NAMESPACE, crate::roles::PREFIX_NAMESPACE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    /// Hold the peak rate after warmup.
    #[default]
    Constant,
    /// Half-cosine from the peak down to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub lora_rank: usize,
    pub prefix_len: usize,
    #[serde(flatten)]
    pub ablation: Ablation,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub decay: LrDecay,
    /// Longest scored response, in tokens; longer targets are cut.
    pub max_target_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 32,
            epochs: 5,
            warmup_fraction: 0.10,
            lora_rank: 8,
            prefix_len: 100,
            ablation: Ablation::default(),
            seed: 17,
            weight_decay: 0.01,
            clip_norm: 1.0,
            decay: LrDecay::Constant,
            max_target_tokens: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ModelResult<()> {
        self.ablation.validate()?;
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(ModelError::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.max_target_tokens == 0 {
            return Err(ModelError::Config("batch_size and max_target_tokens must be positive".into()));
        }
        Ok(())
    }

    /// `base` with this run's adapter sizes. Prefixes are dropped entirely
    /// under `only_lora`.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.lora.rank = self.lora_rank;
        c.roles.prefix_len = if self.ablation.only_lora { 0 } else { self.prefix_len };
        c
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, then constant or
/// cosine decay.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let total = total_steps.max(1) as f64;
    let step = (step as f64).min(total);
    let warm = config.warmup_fraction * total;
    if step < warm {
        return config.lr * step / warm;
    }
    match config.decay {
        LrDecay::Constant => config.lr,
        LrDecay::Cosine => {
            let span = total - warm;
            if span <= 0.0 {
                config.lr
            } else {
                0.5 * config.lr * (1.0 + (std::f64::consts::PI * (step - warm) / span).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [usize; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [8, 1, 1],
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Shuffles dialogue ids with the split seed and cuts them by ratio.
/// Dialogues sharing an id always land together.
pub fn split_dataset(dialogues: &[Dialogue], split: &SplitSpec) -> ModelResult<DatasetSplit> {
    if dialogues.len() < 10 {
        return Err(ModelError::contract(format!(
            "need at least 10 dialogues to split, got {}",
            dialogues.len()
        )));
    }
    let weight: usize = split.ratios.iter().sum();
    if weight == 0 {
        return Err(ModelError::Config("split ratios sum to zero".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&Dialogue>> = BTreeMap::new();
    for d in dialogues {
        groups.entry(d.id.as_str()).or_default().push(d);
    }
    let mut ids: Vec<&str> = groups.keys().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    let n = ids.len();
    let n_train = (n * split.ratios[0] + weight / 2) / weight;
    let n_val = ((n * split.ratios[1] + weight / 2) / weight).min(n - n_train);
    let mut out = DatasetSplit::default();
    for (i, id) in ids.into_iter().enumerate() {
        let dest = if i < n_train {
            &mut out.train
        } else if i < n_train + n_val {
            &mut out.val
        } else {
            &mut out.test
        };
        dest.extend(groups[id].iter().map(|d| (*d).clone()));
    }
    Ok(out)
}

/// One scored response with everything the forward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub dialogue_id: String,
    /// 1-based index of the target doctor turn.
    pub turn: usize,
    pub history: Vec<Turn>,
    pub target: String,
    pub knowledge_id: Option<u64>,
    pub input: ModelInput,
    pub target_ids: Vec<usize>,
    pub role_cls: Option<RoleCls>,
}

/// Unrolls every doctor turn into an example. Retrieval and role `[CLS]`
/// vectors come from the frozen encoder, so they are computed once here.
pub fn prepare_examples(
    model: &AdaptedModel,
    encoder: Option<&DiagEncoder>,
    kb: Option<&KbIndex>,
    dialogues: &[Dialogue],
    ablation: Ablation,
    max_target_tokens: usize,
) -> ModelResult<Vec<TrainingExample>> {
    ablation.validate()?;
    let needs_roles = ablation.prefix_source() == PrefixSource::Roles && model.roles().prefix_len() > 0;
    let kb = kb.filter(|k| ablation.use_kb() && !k.is_empty());
    let encoder = match (encoder, needs_roles || kb.is_some()) {
        (Some(e), _) => Some(e),
        (None, false) => None,
        (None, true) => return Err(ModelError::contract("retrieval and role prefixes need an encoder")),
    };
    if let Some(e) = encoder.filter(|_| needs_roles) {
        if e.d_model() != model.config().d_enc {
            return Err(ModelError::Config(format!(
                "encoder width {} differs from the model's d_enc {}",
                e.d_model(),
                model.config().d_enc
            )));
        }
    }
    let mut out = Vec::new();
    for d in dialogues {
        for turn in d.doctor_turn_indices() {
            let history = d.history(turn).to_vec();
            let target = d.turns[turn - 1].text.trim().to_string();
            let mut target_ids = model.target_ids(&target);
            target_ids.truncate(max_target_tokens.min(model.config().decoder.context / 2));
            let (knowledge_id, knowledge) = match (kb, encoder) {
                (Some(kb), Some(enc)) => match kb.retrieve_top1(enc, &d.history_text(turn)).map_err(kb_err)? {
                    Some(hit) => {
                        let doc = &kb.get(hit.doc_id).expect("retrieved id exists").doc;
                        (Some(hit.doc_id), Some(compose_document(doc).map_err(kb_err)?))
                    }
                    None => (None, None),
                },
                _ => (None, None),
            };
            let budget = model.input_budget(target_ids.len());
            let input = assemble_input(knowledge.as_deref(), &history, model.vocab(), budget);
            let role_cls = match encoder.filter(|_| needs_roles) {
                Some(enc) => {
                    let (doctor, patient) = role_cls(enc, &split_history(d, turn))?;
                    Some(RoleCls { doctor, patient })
                }
                None => None,
            };
            out.push(TrainingExample {
                dialogue_id: d.id.clone(),
                turn,
                history,
                target,
                knowledge_id,
                input,
                target_ids,
                role_cls,
            });
        }
    }
    Ok(out)
}

fn kb_err(e: crate::kb::KbError) -> ModelError {
    ModelError::Contract(e.to_string())
}

/// Freezes the base and every adapter group the ablation leaves unused, so
/// that the trainable set is exactly what the forward pass touches.
pub fn configure_trainable(model: &mut AdaptedModel, ablation: Ablation) {
    let prefix_len = model.roles().prefix_len();
    let source = ablation.prefix_source();
    let store = model.store_mut();
    store.set_frozen(BASE_NAMESPACE, true);
    store.set_frozen(LORA_NAMESPACE, !ablation.use_lora());
    let roles_on = source == PrefixSource::Roles && prefix_len > 0;
    store.set_frozen(ROLE_NAMESPACE, !roles_on);
    store.set_frozen("prefix/doctor/", !roles_on);
    store.set_frozen("prefix/patient/", !roles_on);
    store.set_frozen("prefix/free/", !(source == PrefixSource::Free && prefix_len > 0));
}

/// Mean over the batch of each example's summed target-token cross-entropy.
pub fn batch_objective<'t>(
    model: &AdaptedModel,
    b: &Binder<'t, '_>,
    batch: &[&TrainingExample],
    ablation: Ablation,
) -> ModelResult<Var<'t>> {
    if batch.is_empty() {
        return Err(ModelError::contract("empty batch"));
    }
    let source = ablation.prefix_source();
    let mut total: Option<Var<'t>> = None;
    for ex in batch {
        let prefixes = model.prefix_vars(b, source, ex.role_cls.as_ref())?;
        let l = model.target_loss(b, &ex.input, &ex.target_ids, prefixes.as_deref(), ablation.use_lora())?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / batch.len() as f64)?)
}

/// One optimizer update on `batch`; returns the batch objective before the
/// update.
pub fn train_step(
    model: &mut AdaptedModel,
    batch: &[&TrainingExample],
    opt: &mut AdamW,
    lr: f64,
    config: &TrainConfig,
) -> ModelResult<f64> {
    let (loss, grads) = {
        let tape = Tape::new();
        let b = Binder::new(&tape, model.store());
        let loss = batch_objective(model, &b, batch, config.ablation)?;
        let value = loss.value().item();
        (value, tape.backward(loss)?)
    };
    let store = model.store_mut();
    store.zero_grad();
    grads.accumulate_into(store)?;
    clip_grad_norm(store, config.clip_norm);
    opt.step(store, lr)?;
    Ok(loss)
}

/// Mean per-example summed target loss, without updating anything.
pub fn evaluate_loss(model: &AdaptedModel, examples: &[TrainingExample], ablation: Ablation) -> ModelResult<f64> {
    if examples.is_empty() {
        return Err(ModelError::contract("no examples to evaluate"));
    }
    let mut total = 0.0;
    for ex in examples {
        let tape = Tape::new();
        let b = Binder::new(&tape, model.store());
        total += batch_objective(model, &b, &[ex], ablation)?.value().item();
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub split: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Adapter tensors from the best epoch; already restored into the model.
    pub best: Vec<(String, Tensor)>,
    pub base_checksum: String,
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

/// Trains for `config.epochs`, validating after each epoch and keeping the
/// adapters of the epoch with the lowest validation loss (training loss
/// when `val` is empty). The base checksum is verified every epoch.
pub fn fit(
    model: &mut AdaptedModel,
    train: &[TrainingExample],
    val: &[TrainingExample],
    config: &TrainConfig,
) -> ModelResult<FitReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(ModelError::contract("no training examples"));
    }
    configure_trainable(model, config.ablation);
    let base_checksum = model.store().checksum(BASE_NAMESPACE);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train[i]).collect();
            step += 1;
            let lr = lr_schedule(step, total_steps, config);
            let loss = train_step(model, &batch, &mut opt, lr, config)?;
            sum += loss * batch.len() as f64;
            count += batch.len();
            log.push(LogRecord {
                split: "train".into(),
                epoch,
                step,
                lr,
                loss,
            });
        }
        let train_loss = sum / count as f64;
        let val_loss = if val.is_empty() {
            evaluate_loss(model, train, config.ablation)?
        } else {
            evaluate_loss(model, val, config.ablation)?
        };
        log.push(LogRecord {
            split: "val".into(),
            epoch,
            step,
            lr: lr_schedule(step, total_steps, config),
            loss: val_loss,
        });
        tracing::info!(epoch, train_loss, val_loss, "finetune epoch");
        if model.store().checksum(BASE_NAMESPACE) != base_checksum {
            return Err(ModelError::contract("frozen base weights changed during training"));
        }
        epochs.push(EpochSummary {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, snapshot_adapters(model)));
        }
    }
    let (best_epoch, best_val_loss, best) = best.expect("at least one epoch");
    model.store_mut().restore(&best)?;
    Ok(FitReport {
        epochs,
        best_epoch,
        best_val_loss,
        best,
        base_checksum,
        log,
        steps: step,
    })
}

fn snapshot_adapters(model: &AdaptedModel) -> Vec<(String, Tensor)> {
    ADAPTER_NAMESPACES
        .iter()
        .flat_map(|ns| model.store().snapshot(ns))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogues(n: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| Dialogue::new(format!("d{i}"), vec![Turn::patient("眼睛痛"), Turn::doctor("热敷")]))
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = dialogues(100);
        let s = split_dataset(&ds, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(&ds, &SplitSpec::default()).unwrap());
        let mut seen = std::collections::HashSet::new();
        for d in s.train.iter().chain(&s.val).chain(&s.test) {
            assert!(seen.insert(d.id.clone()));
        }
        assert_eq!(seen.len(), 100);
        assert!(split_dataset(&dialogues(9), &SplitSpec::default()).is_err());
    }

    #[test]
    fn split_keeps_shared_ids_together() {
        let mut ds = dialogues(20);
        ds.push(Dialogue::new("d3", vec![Turn::patient("又痛了"), Turn::doctor("复诊")]));
        let s = split_dataset(&ds, &SplitSpec { seed: 4, ..SplitSpec::default() }).unwrap();
        let count = |v: &[Dialogue]| v.iter().filter(|d| d.id == "d3").count();
        assert!([count(&s.train), count(&s.val), count(&s.test)].contains(&2));
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, 1000, &c), 0.0);
        assert!((lr_schedule(50, 1000, &c) - 2.5e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(100, 1000, &c), 5e-4);
        assert_eq!(lr_schedule(1000, 1000, &c), 5e-4);
        let cos = TrainConfig {
            decay: LrDecay::Cosine,
            ..c
        };
        assert!(lr_schedule(1000, 1000, &cos).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let both = TrainConfig {
            ablation: Ablation {
                only_lora: true,
                only_prefix: true,
                ..Ablation::default()
            },
            ..TrainConfig::default()
        };
        assert!(both.validate().is_err());
    }
}
