//! Small models and data shared by the integration suites.
#![allow(dead_code)]

use std::sync::Arc;

use medconsult_core::decoder::{AdaptedModel, DecoderConfig, LoraConfig, ModelConfig};
use medconsult_core::dialogue::Dialogue;
use medconsult_core::encoder::{DiagEncoder, EncoderConfig};
use medconsult_core::kb::{compose_document, DiseaseDoc, KbIndex};
use medconsult_core::roles::RoleConfig;
use medconsult_core::text::Vocabulary;

pub fn vocab_for(dialogues: &[Dialogue], docs: &[DiseaseDoc]) -> Arc<Vocabulary> {
    let mut texts: Vec<String> = dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.clone())).collect();
    texts.extend(docs.iter().map(|d| compose_document(d).unwrap()));
    Arc::new(Vocabulary::build(texts.iter().map(String::as_str)))
}

pub fn tiny_encoder(vocab: Arc<Vocabulary>, d_model: usize, seed: u64) -> DiagEncoder {
    let config = EncoderConfig {
        layers: 1,
        heads: 2,
        d_model,
        ffn_dim: 2 * d_model,
        max_positions: 600,
        init_std: 0.1,
    };
    DiagEncoder::new(config, vocab, seed).unwrap()
}

pub fn tiny_model_config(d_model: usize, prefix_len: usize, d_enc: usize) -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            d_model,
            ffn_dim: 2 * d_model,
            context: 700,
            init_std: 0.1,
            head_std: 0.1,
        },
        lora: LoraConfig {
            rank: 4,
            alpha: 16.0,
            init_std: 0.1,
        },
        roles: RoleConfig {
            prefix_len,
            projection_std: 0.3,
            ..RoleConfig::default()
        },
        d_enc,
    }
}

pub fn tiny_model(vocab: Arc<Vocabulary>, d_model: usize, prefix_len: usize, d_enc: usize, seed: u64) -> AdaptedModel {
    AdaptedModel::new(tiny_model_config(d_model, prefix_len, d_enc), vocab, seed).unwrap()
}

pub fn index(encoder: &DiagEncoder, docs: &[DiseaseDoc]) -> KbIndex {
    let mut kb = KbIndex::for_encoder(encoder);
    for d in docs {
        kb.index_document(encoder, d.clone()).unwrap();
    }
    kb
}
