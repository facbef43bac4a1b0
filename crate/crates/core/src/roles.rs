//! Role-split history encoding: each speaker's turns are encoded separately,
//! passed through a speaker-specific dendritic network and projected into
//! per-layer attention prefixes (doctor → keys, patient → values).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::dialogue::{Dialogue, Role};
use crate::encoder::{DiagEncoder, Truncation};
use crate::error::{ModelError, ModelResult};
use crate::nn::Binder;

pub const ROLE_NAMESPACE: &str = "role/";
pub const PREFIX_NAMESPACE: &str = "prefix/";

/// How the dendritic layer combines its input with itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DendriticForm {
    /// `W2((W1 t ⊗ t) ⊗ t)`, used for both speakers by default.
    #[default]
    Double,
    /// `W2(W1 t ⊗ t)`.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseActivation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleConfig {
    pub form: DendriticForm,
    pub activation: DenseActivation,
    /// Prefix rows per decoder layer.
    pub prefix_len: usize,
    pub projection_std: f64,
}

impl Default for RoleConfig {
    fn default() -> Self {
        Self {
            form: DendriticForm::Double,
            activation: DenseActivation::Tanh,
            prefix_len: 100,
            projection_std: 0.02,
        }
    }
}

/// Turn texts of one speaker before a given turn, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoleHistory {
    pub doctor: Vec<String>,
    pub patient: Vec<String>,
}

/// Partitions the turns with index `< upto_turn` by speaker.
pub fn split_history(dialogue: &Dialogue, upto_turn: usize) -> RoleHistory {
    let mut h = RoleHistory::default();
    for turn in dialogue.history(upto_turn) {
        let side = match turn.role {
            Role::Doctor => &mut h.doctor,
            Role::Patient => &mut h.patient,
        };
        side.push(turn.text.trim().to_string());
    }
    h
}

/// `[CLS]` vectors of the doctor side and the patient side. Each side is
/// encoded as `[CLS] t1 [SEP] t2 ... [SEP]` and keeps its most recent tokens
/// when too long; an empty side is `[CLS][SEP]`.
pub fn role_cls(encoder: &DiagEncoder, history: &RoleHistory) -> ModelResult<(Vec<f64>, Vec<f64>)> {
    let side = |turns: &[String]| -> ModelResult<Vec<f64>> {
        let ids = encoder.segments_ids(turns, Truncation::Left);
        let mask = vec![true; ids.len()];
        Ok(encoder.encode(&ids, &mask)?.cls_vector)
    };
    Ok((side(&history.doctor)?, side(&history.patient)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DendriticWeights {
    pub dense: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

/// Prefix source for one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerProjection {
    pub doctor: ParamId,
    pub patient: ParamId,
}

/// Learned prefixes that ignore the dialogue (used when role encoding is
/// switched off).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreePrefix {
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleLearner {
    config: RoleConfig,
    d_enc: usize,
    d_model: usize,
    doctor: DendriticWeights,
    patient: DendriticWeights,
    projections: Vec<LayerProjection>,
    free: Vec<FreePrefix>,
}

/// Per-layer key and value prefixes.
pub struct PrefixVars<'t> {
    pub keys: Var<'t>,
    pub values: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleEncoding {
    pub doctor_vec: Vec<f64>,
    pub patient_vec: Vec<f64>,
    /// One `(prefix_len, d_model)` tensor per decoder layer.
    pub doctor_prefix: Vec<Tensor>,
    pub patient_prefix: Vec<Tensor>,
}

impl RoleLearner {
    /// Registers doctor and patient weights (disjoint) plus per-layer
    /// projections in `store`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: RoleConfig,
        d_enc: usize,
        d_model: usize,
        decoder_layers: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d_enc as f64).sqrt();
        let mut weights = |role: &str, rng: &mut R| DendriticWeights {
            dense: store.insert(format!("role/{role}/dense"), Tensor::randn(&[d_enc, d_enc], std, rng)),
            w1: store.insert(format!("role/{role}/w1"), Tensor::randn(&[d_enc, d_enc], std, rng)),
            w2: store.insert(format!("role/{role}/w2"), Tensor::randn(&[d_enc, d_enc], std, rng)),
        };
        let doctor = weights("doctor", rng);
        let patient = weights("patient", rng);
        let width = config.prefix_len * d_model;
        let mut projections = Vec::with_capacity(decoder_layers);
        let mut free = Vec::with_capacity(decoder_layers);
        for l in 0..decoder_layers {
            projections.push(LayerProjection {
                doctor: store.insert(
                    format!("prefix/doctor/l{l}"),
                    Tensor::randn(&[d_enc, width], config.projection_std, rng),
                ),
                patient: store.insert(
                    format!("prefix/patient/l{l}"),
                    Tensor::randn(&[d_enc, width], config.projection_std, rng),
                ),
            });
        }
        for l in 0..decoder_layers {
            free.push(FreePrefix {
                key: store.insert(
                    format!("prefix/free/l{l}/key"),
                    Tensor::randn(&[config.prefix_len, d_model], config.projection_std, rng),
                ),
                value: store.insert(
                    format!("prefix/free/l{l}/value"),
                    Tensor::randn(&[config.prefix_len, d_model], config.projection_std, rng),
                ),
            });
        }
        Self {
            config,
            d_enc,
            d_model,
            doctor,
            patient,
            projections,
            free,
        }
    }

    pub fn config(&self) -> &RoleConfig {
        &self.config
    }

    pub fn prefix_len(&self) -> usize {
        self.config.prefix_len
    }

    pub fn weights(&self, role: Role) -> DendriticWeights {
        match role {
            Role::Doctor => self.doctor,
            Role::Patient => self.patient,
        }
    }

    pub fn projections(&self) -> &[LayerProjection] {
        &self.projections
    }

    pub fn free_prefixes(&self) -> &[FreePrefix] {
        &self.free
    }

    /// Role-augmented representation of a `(1, d_enc)` `[CLS]` row.
    pub fn dendritic<'t>(&self, b: &Binder<'t, '_>, role: Role, cls: &Var<'t>) -> ModelResult<Var<'t>> {
        dendritic_forward(
            cls,
            &b.get(self.weights(role).dense),
            &b.get(self.weights(role).w1),
            &b.get(self.weights(role).w2),
            self.config.form,
            self.config.activation,
        )
    }

    /// Maps a `(1, d_enc)` role vector to the `(prefix_len, d_model)` prefix
    /// of `layer`.
    pub fn to_prefix<'t>(&self, b: &Binder<'t, '_>, role: Role, layer: usize, h: &Var<'t>) -> ModelResult<Var<'t>> {
        let p = self
            .projections
            .get(layer)
            .ok_or_else(|| ModelError::contract(format!("no projection for layer {layer}")))?;
        let w = match role {
            Role::Doctor => p.doctor,
            Role::Patient => p.patient,
        };
        Ok(h.matmul(&b.get(w))?.reshape(&[self.config.prefix_len, self.d_model])?)
    }

    /// Doctor-derived keys and patient-derived values for every layer.
    pub fn prefixes<'t>(
        &self,
        b: &Binder<'t, '_>,
        cls_doctor: &[f64],
        cls_patient: &[f64],
    ) -> ModelResult<Vec<PrefixVars<'t>>> {
        let row = |v: &[f64]| -> ModelResult<Var<'t>> {
            if v.len() != self.d_enc {
                return Err(TensorError::Dimension {
                    op: "role_cls",
                    left: vec![self.d_enc],
                    right: vec![v.len()],
                }
                .into());
            }
            Ok(b.tape().constant(Tensor::matrix(1, v.len(), v.to_vec())?))
        };
        let hd = self.dendritic(b, Role::Doctor, &row(cls_doctor)?)?;
        let hp = self.dendritic(b, Role::Patient, &row(cls_patient)?)?;
        (0..self.projections.len())
            .map(|l| {
                Ok(PrefixVars {
                    keys: self.to_prefix(b, Role::Doctor, l, &hd)?,
                    values: self.to_prefix(b, Role::Patient, l, &hp)?,
                })
            })
            .collect()
    }

    /// Dialogue-independent learned prefixes.
    pub fn free_prefix_vars<'t>(&self, b: &Binder<'t, '_>) -> Vec<PrefixVars<'t>> {
        self.free
            .iter()
            .map(|f| PrefixVars {
                keys: b.get(f.key),
                values: b.get(f.value),
            })
            .collect()
    }

    /// Full role encoding of the history before `upto_turn`.
    pub fn encode_roles(
        &self,
        store: &ParamStore,
        encoder: &DiagEncoder,
        dialogue: &Dialogue,
        upto_turn: usize,
    ) -> ModelResult<RoleEncoding> {
        let (cd, cp) = role_cls(encoder, &split_history(dialogue, upto_turn))?;
        self.encode_cls(store, &cd, &cp)
    }

    pub fn encode_cls(&self, store: &ParamStore, cls_doctor: &[f64], cls_patient: &[f64]) -> ModelResult<RoleEncoding> {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let row = |v: &[f64]| Tensor::matrix(1, v.len(), v.to_vec());
        let hd = self.dendritic(&b, Role::Doctor, &tape.constant(row(cls_doctor)?))?;
        let hp = self.dendritic(&b, Role::Patient, &tape.constant(row(cls_patient)?))?;
        let mut enc = RoleEncoding {
            doctor_vec: hd.value().data().to_vec(),
            patient_vec: hp.value().data().to_vec(),
            doctor_prefix: Vec::new(),
            patient_prefix: Vec::new(),
        };
        for l in 0..self.projections.len() {
            enc.doctor_prefix.push((*self.to_prefix(&b, Role::Doctor, l, &hd)?.value()).clone());
            enc.patient_prefix.push((*self.to_prefix(&b, Role::Patient, l, &hp)?.value()).clone());
        }
        Ok(enc)
    }
}

/// `t = act(cls · dense)`, then `((t · w1) ⊗ t ⊗ t) · w2` (or without the
/// second product for [`DendriticForm::Single`]). No biases, so a zero input
/// yields a zero output.
pub fn dendritic_forward<'t>(
    cls: &Var<'t>,
    dense: &Var<'t>,
    w1: &Var<'t>,
    w2: &Var<'t>,
    form: DendriticForm,
    activation: DenseActivation,
) -> ModelResult<Var<'t>> {
    let pre = cls.matmul(dense)?;
    let t = match activation {
        DenseActivation::Tanh => pre.tanh()?,
        DenseActivation::Identity => pre,
    };
    let mut z = t.matmul(w1)?.hadamard(&t)?;
    if form == DendriticForm::Double {
        z = z.hadamard(&t)?;
    }
    Ok(z.matmul(w2)?)
}
