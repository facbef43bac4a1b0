use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use medconsult_core::autodiff::{AdamW, AdamWConfig, Tape, Tensor};
use medconsult_core::decoder::{AdaptedModel, Ablation, DecoderConfig, LoraConfig, ModelConfig};
use medconsult_core::encoder::{DiagEncoder, EncoderConfig};
use medconsult_core::kb::KbIndex;
use medconsult_core::metrics::{bleu_n, distinct_n, rouge_1, rouge_l};
use medconsult_core::roles::RoleConfig;
use medconsult_core::synthetic::{single_round_dialogues, synthetic_kb};
use medconsult_core::text::Vocabulary;
use medconsult_core::trainer::{configure_trainable, prepare_examples, train_step, TrainConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tape(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[64, 64], 1.0, &mut rng);
    let w = Tensor::randn(&[64, 64], 1.0, &mut rng);
    c.bench_function("matmul_softmax_fwd_bwd_64", |bench| {
        bench.iter(|| {
            let t = Tape::new();
            let x = t.leaf(a.clone());
            let y = t.leaf(w.clone());
            let s = x.matmul(&y).unwrap().softmax(1).unwrap().sum().unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn training(c: &mut Criterion) {
    let dialogues = single_round_dialogues(8, 3);
    let vocab = Arc::new(Vocabulary::build(
        dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())),
    ));
    let encoder = DiagEncoder::new(
        EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 32,
            ffn_dim: 64,
            max_positions: 600,
            init_std: 0.1,
        },
        vocab.clone(),
        1,
    )
    .unwrap();
    let config = ModelConfig {
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            d_model: 64,
            ffn_dim: 128,
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
            prefix_len: 8,
            ..RoleConfig::default()
        },
        d_enc: 32,
    };
    let mut model = AdaptedModel::new(config, vocab, 2).unwrap();
    configure_trainable(&mut model, Ablation::default());
    let train = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let examples = prepare_examples(&model, Some(&encoder), None, &dialogues, Ablation::default(), 64).unwrap();
    let batch: Vec<_> = examples.iter().take(4).collect();
    let mut opt = AdamW::new(AdamWConfig::default());
    c.bench_function("train_step_batch4_d64", |bench| {
        bench.iter(|| black_box(train_step(&mut model, &batch, &mut opt, 1e-4, &train).unwrap()))
    });
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut index = KbIndex::new("bench");
    for doc in synthetic_kb(1000, 4) {
        index.insert_embedded(doc, Tensor::randn(&[128], 1.0, &mut rng).data().to_vec()).unwrap();
    }
    let query = Tensor::randn(&[128], 1.0, &mut rng).data().to_vec();
    c.bench_function("rank_1000x128", |bench| bench.iter(|| black_box(index.rank(black_box(&query)))));
}

fn metrics(c: &mut Criterion) {
    let dialogues = single_round_dialogues(64, 9);
    let replies: Vec<&str> = dialogues.iter().map(|d| d.turns[1].text.as_str()).collect();
    c.bench_function("bleu4_rouge_64_pairs", |bench| {
        bench.iter(|| {
            let mut acc = 0.0;
            for pair in replies.windows(2) {
                acc += bleu_n(pair[0], pair[1], 4) + rouge_1(pair[0], pair[1]) + rouge_l(pair[0], pair[1]);
            }
            black_box(acc)
        })
    });
    c.bench_function("distinct2_64", |bench| bench.iter(|| black_box(distinct_n(&replies, 2))));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tape, training, retrieval, metrics
}
criterion_main!(benches);
