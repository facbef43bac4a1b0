//! `medconsult`: train, curate, evaluate and serve consultation models.

mod config;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use medconsult_core::autodiff::Checkpoint;
use medconsult_core::curation::{
    curate, CurateConfig, HttpChatClient, Journal, PromptTemplate, RawRecord, RuleSet, ScriptedClient,
    TemplateKind, Validator,
};
use medconsult_core::decoder::{
    AdaptedModel, GenerateOptions, PrefixSource,
};
use medconsult_core::dialogue::Dialogue;
use medconsult_core::encoder::{pretrain_mlm, DiagEncoder};
use medconsult_core::jsonl;
use medconsult_core::kb::{load_docs, DiseaseDoc, KbIndex};
use medconsult_core::metrics::{
    compare, evaluate, render_bert_table, render_generation_table, EncoderEmbedder, EvalRecord, MetricConfig,
    TokenEmbedder,
};
use medconsult_core::service::{serve, AppState, Engine};
use medconsult_core::text::Vocabulary;
use medconsult_core::trainer::{fit, prepare_examples, split_dataset, SplitSpec, TrainingExample};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "medconsult", version, about = "Knowledge-augmented consultation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-token adaptation of the text encoder.
    Pretrain {
        /// One sentence per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Loaded if it exists, otherwise built from the corpus and written.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter-efficient finetuning of the decoder.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Dialogue records, one per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step and per-epoch losses.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Greedy replies for the held-out split.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Rewrite raw dialogues through a chat model and validate the results.
    Curate {
        /// `single_turn`, `multi_turn` or a template file.
        #[arg(long)]
        template: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_checks: usize,
        /// Scripted replies instead of a live endpoint.
        #[arg(long)]
        stub: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = "gpt-3.5-turbo")]
        model: String,
        /// Validation rules; defaults apply when absent.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long, default_value_t = 500)]
        backoff_ms: u64,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Baseline predictions for significance marks.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Encoder and vocabulary for embedding-based scores.
        #[arg(long, requires = "vocab")]
        encoder: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        rouge_l: bool,
        #[arg(long, default_value = "system")]
        name: String,
        /// Full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Knowledge-base administration.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Run the HTTP consultation service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Subcommand)]
enum KbAction {
    /// Index documents (one JSON object per line).
    Add {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    Search {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Pretrain {
            corpus,
            vocab,
            out,
            config,
        } => pretrain(&corpus, &vocab, &out, config.as_deref()),
        Command::Finetune {
            config,
            data,
            out,
            log,
            predictions,
        } => finetune(&config, &data, &out, log.as_deref(), predictions.as_deref()),
        Command::Curate {
            template,
            input,
            out_dir,
            max_checks,
            stub,
            endpoint,
            model,
            rules,
            parallelism,
            backoff_ms,
        } => {
            let config = CurateConfig {
                max_checks,
                backoff_ms,
                parallelism,
            };
            run_curation(&template, &input, &out_dir, stub.as_deref(), endpoint, model, rules.as_deref(), &config)
        }
        Command::Evaluate {
            pred,
            reference,
            compare,
            encoder,
            vocab,
            rouge_l,
            name,
            report,
        } => run_evaluation(&pred, &reference, compare.as_deref(), encoder.as_deref(), vocab.as_deref(), rouge_l, &name, report.as_deref()),
        Command::Kb { action } => kb(action),
        Command::Serve {
            port,
            config,
            checkpoint,
            host,
        } => run_service(&host, port, &config, &checkpoint),
    }
}

fn load_vocab(path: &Path) -> anyhow::Result<Arc<Vocabulary>> {
    Ok(Arc::new(
        Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))?,
    ))
}

fn load_encoder(path: &Path, vocab: Arc<Vocabulary>) -> anyhow::Result<DiagEncoder> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading encoder {}", path.display()))?;
    Ok(DiagEncoder::from_checkpoint(&ck, vocab)?)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().with_context(|| format!("config [paths] lacks `{what}`"))
}

fn pretrain(corpus: &Path, vocab_path: &Path, out: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let body = std::fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let lines: Vec<String> = body.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    let vocab = if vocab_path.exists() {
        load_vocab(vocab_path)?
    } else {
        let v = Vocabulary::build(lines.iter().map(String::as_str));
        v.save(vocab_path)?;
        Arc::new(v)
    };
    let mut enc = DiagEncoder::new(cfg.encoder.clone(), vocab, cfg.mlm.seed)?;
    let report = pretrain_mlm(&mut enc, &lines, &cfg.mlm)?;
    enc.to_checkpoint(cfg.mlm.seed).save(out)?;
    println!(
        "{}",
        serde_json::json!({
            "initial_loss": report.initial_loss,
            "epoch_losses": report.epoch_losses,
            "steps": report.steps,
            "encoder_version": enc.version(),
        })
    );
    Ok(())
}

fn finetune(
    config: &Path,
    data: &Path,
    out: &Path,
    log: Option<&Path>,
    predictions: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let vocab = load_vocab(required(&cfg.paths.vocab, "vocab")?)?;
    let encoder = match &cfg.paths.encoder {
        Some(p) => Some(load_encoder(p, vocab.clone())?),
        None => None,
    };
    let kb = match (&cfg.paths.kb, cfg.train.ablation.no_kb) {
        (Some(p), false) if p.exists() => Some(KbIndex::load(p)?),
        (Some(p), false) => {
            tracing::warn!(path = %p.display(), "knowledge base not found; training without documents");
            None
        }
        _ => None,
    };
    let dialogues: Vec<Dialogue> = jsonl::read(data)?;
    for d in &dialogues {
        d.validate().with_context(|| format!("dialogue {}", d.id))?;
    }
    let split = if dialogues.len() >= 10 {
        split_dataset(&dialogues, &SplitSpec {
            seed: cfg.train.seed,
            ..SplitSpec::default()
        })?
    } else {
        tracing::warn!(n = dialogues.len(), "too few dialogues to split; training on all of them");
        medconsult_core::trainer::DatasetSplit {
            train: dialogues,
            ..Default::default()
        }
    };
    let model_config = cfg.train.model_config(&cfg.model);
    let mut model = AdaptedModel::new(model_config, vocab, cfg.train.seed)?;
    let prep = |ds: &[Dialogue]| -> anyhow::Result<Vec<TrainingExample>> {
        Ok(prepare_examples(
            &model,
            encoder.as_ref(),
            kb.as_ref(),
            ds,
            cfg.train.ablation,
            cfg.train.max_target_tokens,
        )?)
    };
    let train = prep(&split.train)?;
    let val = prep(&split.val)?;
    let test = prep(&split.test)?;
    tracing::info!(train = train.len(), val = val.len(), test = test.len(), "examples prepared");
    let report = fit(&mut model, &train, &val, &cfg.train)?;
    let extra = serde_json::json!({
        "train": cfg.train,
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "base_checksum": report.base_checksum,
    });
    model.to_checkpoint(&[], extra).save(out)?;
    if let Some(p) = log {
        jsonl::write(p, &report.log)?;
    }
    if let Some(p) = predictions {
        let source = cfg.train.ablation.prefix_source();
        let mut preds = Vec::new();
        for ex in &test {
            let roles = match source {
                PrefixSource::None => None,
                _ => model.prefix_encoding(source, ex.role_cls.as_ref())?,
            };
            let text = model.generate(
                &ex.input,
                roles.as_ref(),
                cfg.train.ablation.use_lora(),
                GenerateOptions {
                    max_new_tokens: cfg.engine.max_new_tokens,
                    mode: cfg.engine.mode,
                },
            )?;
            preds.push(EvalRecord {
                id: format!("{}#{}", ex.dialogue_id, ex.turn),
                text,
            });
        }
        jsonl::write(p, &preds)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "epochs": report.epochs,
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "steps": report.steps,
        })
    );
    Ok(())
}

fn template_for(name: &str) -> anyhow::Result<PromptTemplate> {
    match name {
        "single_turn" => return Ok(PromptTemplate::builtin(TemplateKind::SingleTurn)),
        "multi_turn" => return Ok(PromptTemplate::builtin(TemplateKind::MultiTurn)),
        _ => {}
    }
    let body = std::fs::read_to_string(name).with_context(|| format!("reading template {name}"))?;
    Ok(PromptTemplate::from_fixture(&body)?)
}

#[allow(clippy::too_many_arguments)]
fn run_curation(
    template: &str,
    input: &Path,
    out_dir: &Path,
    stub: Option<&Path>,
    endpoint: Option<String>,
    model: String,
    rules: Option<&Path>,
    config: &CurateConfig,
) -> anyhow::Result<()> {
    let template = template_for(template)?;
    let rules: RuleSet = match rules {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => RuleSet::default(),
    };
    let validator = Validator::new(rules)?;
    let records: Vec<RawRecord> = jsonl::read(input)?;
    std::fs::create_dir_all(out_dir)?;
    let journal = Journal::open(out_dir.join("journal.jsonl"))?;
    let outcome = match (stub, endpoint) {
        (Some(s), _) => {
            let client = ScriptedClient::from_file(s)?;
            curate(&records, &template, &validator, &client, config, Some(&journal))?
        }
        (None, Some(url)) => {
            let client = HttpChatClient::new(url, model);
            curate(&records, &template, &validator, &client, config, Some(&journal))?
        }
        (None, None) => bail!("either --stub or --endpoint is required"),
    };
    let accepted: Vec<serde_json::Value> = outcome
        .accepted
        .iter()
        .map(|r| serde_json::json!({ "id": r.id, "output": r.output, "attempts": r.attempts.len() }))
        .collect();
    jsonl::write(out_dir.join("accepted.jsonl"), &accepted)?;
    jsonl::write(out_dir.join("quarantined.jsonl"), &outcome.quarantined)?;
    println!(
        "{}",
        serde_json::json!({
            "inputs": records.len(),
            "accepted": outcome.accepted.len(),
            "quarantined": outcome.quarantined.len(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluation(
    pred: &Path,
    reference: &Path,
    baseline: Option<&Path>,
    encoder: Option<&Path>,
    vocab: Option<&Path>,
    rouge_l: bool,
    name: &str,
    report_path: Option<&Path>,
) -> anyhow::Result<()> {
    let preds: Vec<EvalRecord> = jsonl::read(pred)?;
    let refs: Vec<EvalRecord> = jsonl::read(reference)?;
    let enc = match (encoder, vocab) {
        (Some(e), Some(v)) => Some(load_encoder(e, load_vocab(v)?)?),
        _ => None,
    };
    let embedder = enc.as_ref().map(EncoderEmbedder);
    let embedder: Option<&dyn TokenEmbedder> = embedder.as_ref().map(|e| e as &dyn TokenEmbedder);
    let config = MetricConfig {
        rouge_l,
        bert: embedder.is_some(),
    };
    let mut report = evaluate(&preds, &refs, &config, embedder)?;
    let mut rows = Vec::new();
    if let Some(b) = baseline {
        let base_preds: Vec<EvalRecord> = jsonl::read(b)?;
        let base = evaluate(&base_preds, &refs, &config, embedder)?;
        compare(&mut report, &base)?;
        rows.push(base.row("baseline"));
    }
    rows.push(report.row(name));
    print!("{}", render_generation_table(&rows));
    if config.bert {
        print!("\n{}", render_bert_table(&rows));
    }
    if report.bleu_smoothed {
        println!("note: some BLEU precisions were zero and were smoothed");
    }
    if let Some(p) = report_path {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn kb(action: KbAction) -> anyhow::Result<()> {
    match action {
        KbAction::Add {
            kb,
            docs,
            encoder,
            vocab,
        } => {
            let enc = load_encoder(&encoder, load_vocab(&vocab)?)?;
            let mut index = if kb.exists() { KbIndex::load(&kb)? } else { KbIndex::for_encoder(&enc) };
            let docs: Vec<DiseaseDoc> = load_docs(&docs)?;
            let mut ids = Vec::new();
            for d in docs {
                ids.push(index.index_document(&enc, d)?);
            }
            index.save(&kb)?;
            println!("{}", serde_json::json!({ "added": ids, "size": index.len() }));
        }
        KbAction::Search {
            kb,
            query,
            encoder,
            vocab,
            k,
        } => {
            let enc = load_encoder(&encoder, load_vocab(&vocab)?)?;
            let index = KbIndex::load(&kb)?;
            if index.is_empty() {
                println!("[]");
                return Ok(());
            }
            let q = medconsult_core::kb::embed_dialogue(&enc, &query)?;
            let hits: Vec<serde_json::Value> = index
                .rank(&q)
                .into_iter()
                .take(k)
                .map(|(id, s)| {
                    serde_json::json!({ "doc_id": id, "name": index.get(id).map(|e| e.doc.name.clone()), "similarity": s })
                })
                .collect();
            println!("{}", serde_json::Value::Array(hits));
        }
    }
    Ok(())
}

fn run_service(host: &str, port: u16, config: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let vocab = load_vocab(required(&cfg.paths.vocab, "vocab")?)?;
    let encoder = load_encoder(required(&cfg.paths.encoder, "encoder")?, vocab.clone())?;
    let kb = match &cfg.paths.kb {
        Some(p) if p.exists() => KbIndex::load(p)?,
        _ => KbIndex::for_encoder(&encoder),
    };
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = AdaptedModel::from_checkpoint(&ck, vocab)?;
    let engine = Engine::new(model, encoder, kb, ck.digest(), cfg.engine)?;
    let state = AppState::new(Some(engine), cfg.service.clone().with_env())?;
    let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
    Ok(())
}
