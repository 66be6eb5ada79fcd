//! Command-line surface for the long-document pipeline. Exit codes: 0 on
//! success, 1 usage/config error, 2 data error, 3 numeric failure.
//! Diagnostics go to standard error; results go to files or standard output.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use longdoc::analysis;
use longdoc::attention::{attention_cost, full_attention, full_attention_cost, sliding_global_attention, AttentionSpec, SlidingInputs};
use longdoc::checkpoint;
use longdoc::corpus;
use longdoc::datasets::{self, TaskKind, TaskPayload, TaskRecord};
use longdoc::encoder::{EncoderState, ModelConfig};
use longdoc::error::{Error, Result};
use longdoc::numerics::Tensor;
use longdoc::rng::Rng;
use longdoc::tokenizer::{self, TokenizerOptions, Vocab};
use longdoc::training::{self, FinetuneOpts, GridSpec, Strategy, TrainConfig};

#[derive(Parser)]
#[command(name = "longdoc", version, about = "Long-document transformer toolkit")]
struct Cli {
    /// Worker threads (default: all cores; LONGDOC_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a WordPiece vocabulary from a one-document-per-line corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        min_freq: u64,
        #[arg(long)]
        lowercase: bool,
        /// Skip NFC normalization.
        #[arg(long)]
        no_nfc: bool,
    },
    /// Pack a corpus into fixed-length pre-training sequences.
    Pack {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = corpus::BODY_LEN)]
        body_len: usize,
    },
    /// MLM pre-training with one of the three initialization strategies.
    Pretrain {
        #[arg(long)]
        strategy: Strategy,
        /// Model config JSON (see docs/cli.md for the schema).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        shard: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Source checkpoint for the convert/continual strategies.
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value_t = corpus::BODY_LEN)]
        body_len: usize,
    },
    /// Convert a BERT-shaped checkpoint to a Longformer-shaped one.
    Convert {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        max_positions: usize,
        #[arg(long, default_value_t = 512)]
        window: usize,
    },
    /// Fine-tune a checkpoint on one task.
    Finetune {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 5e-5)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the learning-rate grid (4 learning rates x 4 seeds by default).
    Grid {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, default_value_t = 4)]
        runs_per_lr: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fine-tuned checkpoint; emits a JSON report and a CSV row.
    Eval {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CLS-attention position profile over a document collection.
    AnalyzeAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// One document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error rates bucketed by document word count.
    AnalyzeLength {
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// "auto" computes the largest safe word count for --limit tokens.
        #[arg(long, default_value = "auto")]
        threshold: String,
        #[arg(long, default_value_t = 512)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measured wall time and analytic cost: full vs sliding+global.
    BenchAttention {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1024usize, 2048, 4096])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 512)]
        window: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        head_dim: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Dense attention is skipped (marked "skipped") above this length.
        #[arg(long, default_value_t = 8192)]
        max_dense_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's header and tensor manifest.
    CkptInspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
}

#[derive(Args)]
struct TaskFlags {
    #[arg(long)]
    task: String,
    /// Single data file, split 70/10/20 by --split-seed.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Explicit split files (all three required together).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("LONGDOC_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        longdoc::par::set_threads(n);
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(f.lines().collect::<std::io::Result<_>>()?)
}

fn read_task(path: &Path, kind: TaskKind) -> Result<Vec<TaskRecord>> {
    match kind {
        TaskKind::Pos | TaskKind::Ner => datasets::read_conll(path, kind),
        _ => datasets::read_jsonl(path, kind),
    }
}

fn load_splits(flags: &TaskFlags) -> Result<(TaskKind, Vec<TaskRecord>, Vec<TaskRecord>, Vec<TaskRecord>)> {
    let kind: TaskKind = flags.task.parse()?;
    match (&flags.data, &flags.train, &flags.validation, &flags.test) {
        (Some(data), None, None, None) => {
            let records = read_task(data, kind)?;
            for r in &records {
                for w in &r.warnings {
                    eprintln!("warning: {}: {w}", r.location);
                }
            }
            let spec = datasets::SplitSpec { seed: flags.split_seed, ..Default::default() };
            let (tr, va, te) = datasets::split(records, &spec)?;
            Ok((kind, tr, va, te))
        }
        (None, Some(tr), Some(va), Some(te)) => Ok((
            kind,
            read_task(tr, kind)?,
            read_task(va, kind)?,
            read_task(te, kind)?,
        )),
        _ => Err(Error::Config(
            "provide either --data or all of --train/--validation/--test".into(),
        )),
    }
}

fn load_model(path: &Path) -> Result<(EncoderState<f32>, checkpoint::CheckpointHeader)> {
    checkpoint::load(path)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TokenizerTrain { corpus, out, vocab_size, min_freq, lowercase, no_nfc } => {
            let docs = read_lines(&corpus)?;
            let options = TokenizerOptions { nfc: !no_nfc, lowercase };
            let vocab = tokenizer::train_wordpiece(docs.iter(), vocab_size, min_freq, options)?;
            vocab.save(&out)?;
            println!(
                "{}",
                json!({ "vocab_size": vocab.size(), "hash": vocab.hash(), "out": out })
            );
            Ok(())
        }
        Cmd::Pack { corpus: corpus_path, vocab, out, body_len } => {
            let vocab = Vocab::load(&vocab)?;
            let docs = read_lines(&corpus_path)?;
            let (seqs, stats) = corpus::pack_corpus(docs.iter(), &vocab, body_len);
            if seqs.is_empty() {
                return Err(Error::Data("packing produced no sequences".into()));
            }
            corpus::write_shard(&out, &seqs)?;
            println!(
                "{}",
                json!({
                    "documents": stats.documents,
                    "empty_documents": stats.empty_documents,
                    "dropped_tails": stats.dropped_tails,
                    "sequences": stats.sequences,
                    "seq_len": body_len + 2,
                    "out": out,
                })
            );
            Ok(())
        }
        Cmd::Pretrain { strategy, config, corpus: corpus_path, shard, vocab, src, out, log, train, body_len } => {
            let vocab = Vocab::load(&vocab)?;
            let model_cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            model_cfg.validate()?;
            if model_cfg.vocab_size != vocab.size() {
                return Err(Error::Config(format!(
                    "config vocab_size {} != vocabulary size {}",
                    model_cfg.vocab_size,
                    vocab.size()
                )));
            }
            let mut tc = match &train.train_config {
                Some(p) => serde_json::from_str::<TrainConfig>(&std::fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = train.peak_lr { tc.peak_lr = v; }
            if let Some(v) = train.warmup_steps { tc.warmup_steps = v; }
            if let Some(v) = train.total_steps { tc.total_steps = v; }
            if let Some(v) = train.batch_size { tc.batch_size = v; }
            if let Some(v) = train.grad_accum_steps { tc.grad_accum_steps = v; }
            tc.seed = train.seed;
            tc.strategy = strategy;
            tc.validate()?;

            let init = match strategy {
                Strategy::Scratch => checkpoint::init_from_scratch(model_cfg.clone(), tc.seed)?,
                Strategy::Convert => {
                    let src = src.ok_or_else(|| Error::Config("--src required for convert".into()))?;
                    let (bert, _) = checkpoint::load(&src)?;
                    checkpoint::convert_bert_to_longformer(&bert, model_cfg.max_positions, model_cfg.window)?
                }
                Strategy::Continual => {
                    let src = src.ok_or_else(|| Error::Config("--src required for continual".into()))?;
                    checkpoint::init_continual(&src)?.0
                }
            };
            let seqs = match (&shard, &corpus_path) {
                (Some(s), None) => corpus::read_shard(s)?,
                (None, Some(c)) => {
                    let docs = read_lines(c)?;
                    let (seqs, stats) = corpus::pack_corpus(docs.iter(), &vocab, body_len);
                    eprintln!(
                        "packed {} sequences ({} tails dropped, {} empty docs)",
                        stats.sequences, stats.dropped_tails, stats.empty_documents
                    );
                    seqs
                }
                _ => return Err(Error::Config("provide exactly one of --corpus or --shard".into())),
            };
            let (state, trace) = training::pretrain_mlm(init, &seqs, &vocab, &tc)?;
            checkpoint::save(&state, &vocab.hash(), &out)?;
            if let Some(log_path) = log {
                let mut buf = String::new();
                buf.push_str(&serde_json::to_string(&json!({
                    "model_config": state.config,
                    "train_config": tc,
                }))?);
                buf.push('\n');
                for step in &trace {
                    buf.push_str(&serde_json::to_string(step)?);
                    buf.push('\n');
                }
                std::fs::write(&log_path, buf)?;
            }
            let last = trace.last().map(|s| s.loss);
            println!("{}", json!({ "out": out, "steps": trace.len(), "final_loss": last }));
            Ok(())
        }
        Cmd::Convert { src, out, max_positions, window } => {
            let (bert, header) = checkpoint::load(&src)?;
            let long = checkpoint::convert_bert_to_longformer(&bert, max_positions, window)?;
            checkpoint::save(&long, &header.tokenizer_hash, &out)?;
            println!(
                "{}",
                json!({ "out": out, "max_positions": max_positions, "window": window })
            );
            Ok(())
        }
        Cmd::Finetune { task, init, vocab, lr, seed, epochs, out } => {
            let (kind, tr, va, te) = load_splits(&task)?;
            let (state, _) = load_model(&init)?;
            let vocab = Vocab::load(&vocab)?;
            let opts = FinetuneOpts { lr, seed, epochs };
            let (run, tuned) = training::finetune_full(&state, &vocab, kind, &tr, &va, &te, &opts)?;
            checkpoint::save(&tuned, &vocab.hash(), &out)?;
            let report = out.with_extension("report.json");
            write_json(
                &report,
                &json!({
                    "task": kind,
                    "model_config": state.config,
                    "lr": lr,
                    "seed": seed,
                    "epochs": epochs,
                    "result": run,
                }),
            )?;
            println!(
                "{}",
                json!({ "out": out, "report": report, "final_test": run.final_test })
            );
            Ok(())
        }
        Cmd::Grid { task, init, vocab, lrs, runs_per_lr, epochs, out } => {
            let (kind, tr, va, te) = load_splits(&task)?;
            let (state, _) = load_model(&init)?;
            let vocab = Vocab::load(&vocab)?;
            let mut spec = GridSpec::default();
            if let Some(lrs) = lrs {
                spec.learning_rates = lrs;
            }
            spec.runs_per_lr = runs_per_lr;
            let outcome = training::run_grid(&spec, |lr, seed| {
                training::finetune(&state, &vocab, kind, &tr, &va, &te, &FinetuneOpts { lr, seed, epochs })
            })?;
            write_json(
                &out,
                &json!({
                    "task": kind,
                    "model_config": state.config,
                    "grid": spec,
                    "epochs": epochs,
                    "outcome": outcome,
                }),
            )?;
            println!(
                "{}",
                json!({ "out": out, "selected_lr": outcome.selected_lr, "mean_metric": outcome.mean_metric })
            );
            Ok(())
        }
        Cmd::Eval { task, model, vocab, out } => {
            let kind: TaskKind = task.task.parse()?;
            let data = task
                .data
                .as_ref()
                .or(task.test.as_ref())
                .ok_or_else(|| Error::Config("eval needs --data or --test".into()))?;
            let records = read_task(data, kind)?;
            let (state, _) = load_model(&model)?;
            let vocab = Vocab::load(&vocab)?;
            let setup = training::task_setup(kind, &records);
            training::check_head(&state, &setup)?;
            let metric = training::evaluate(&state, &vocab, &setup, &records)?;
            let name = match kind {
                TaskKind::Ner => "span_f1",
                TaskKind::Pos => "weighted_f1",
                TaskKind::Multiclass => "weighted_f1",
                TaskKind::Multilabel => "weighted_f1_multilabel",
                TaskKind::Sts => "spearman",
                TaskKind::Mcqa => "exact_match_ratio",
            };
            let report = json!({
                "task": kind,
                "metric": name,
                "value": metric,
                "records": records.len(),
                "model_config": state.config,
            });
            if let Some(out) = &out {
                write_json(out, &report)?;
            }
            println!("{report}");
            println!("task,metric,value,records");
            println!("{},{name},{metric},{}", format!("{kind:?}").to_lowercase(), records.len());
            Ok(())
        }
        Cmd::AnalyzeAttention { model, vocab, corpus, out } => {
            let (state, _) = load_model(&model)?;
            let vocab = Vocab::load(&vocab)?;
            let texts = read_lines(&corpus)?;
            let profile = analysis::attention_profile(&state, &vocab, &texts)?;
            if profile.truncated_docs > 0 {
                eprintln!("warning: {} documents truncated to max_positions", profile.truncated_docs);
            }
            std::fs::write(&out, analysis::profile_csv(&profile))?;
            println!(
                "{}",
                json!({
                    "out": out,
                    "positions": profile.mean_mass.len(),
                    "first_10pct_mass": analysis::head_mass_fraction(&profile, 0.1),
                })
            );
            Ok(())
        }
        Cmd::AnalyzeLength { task, model, vocab, threshold, limit, out } => {
            let kind: TaskKind = task.task.parse()?;
            if !matches!(kind, TaskKind::Multiclass | TaskKind::Multilabel) {
                return Err(Error::Config("length analysis covers classification tasks".into()));
            }
            let data = task
                .data
                .as_ref()
                .or(task.test.as_ref())
                .ok_or_else(|| Error::Config("length analysis needs --data or --test".into()))?;
            let records = read_task(data, kind)?;
            let (state, _) = load_model(&model)?;
            let vocab = Vocab::load(&vocab)?;
            let threshold = match threshold.as_str() {
                "auto" => analysis::length_threshold(&records, &vocab, limit),
                s => s.parse::<usize>().map_err(|_| Error::Config(format!("bad threshold {s:?}")))?,
            };
            let setup = training::task_setup(kind, &records);
            training::check_head(&state, &setup)?;
            let mut results = Vec::with_capacity(records.len());
            for r in &records {
                let pred = training::predict(&state, &vocab, &setup, r)?;
                let gold = match &r.payload {
                    TaskPayload::Classify { label, .. } => label.clone(),
                    TaskPayload::MultiLabel { labels, .. } => {
                        labels.iter().cloned().collect::<Vec<_>>().join("+")
                    }
                    _ => unreachable!(),
                };
                // multi-label correctness is exact set match
                let correct = matches!(&pred, training::Prediction::Class(c) if *c == gold);
                results.push((r.word_count, correct));
            }
            let buckets = analysis::error_rate_by_length(&results, threshold);
            write_json(&out, &json!({ "task": kind, "limit": limit, "buckets": buckets }))?;
            println!("{}", serde_json::to_string(&buckets)?);
            Ok(())
        }
        Cmd::BenchAttention { n, window, heads, head_dim, reps, max_dense_n, seed, out } => {
            for &len in &n {
                if len < window {
                    return Err(Error::Config(format!("n = {len} is smaller than the window {window}")));
                }
            }
            let mut csv = String::from("n,pattern,wall_ms,score_entries\n");
            let mut rng = Rng::new(seed);
            let hidden = heads * head_dim;
            let mut sparse_entries = Vec::new();
            let mut dense_entries = Vec::new();
            for &len in &n {
                let data = |rng: &mut Rng| -> Tensor<f32> {
                    let d: Vec<f32> = (0..len * hidden).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
                    Tensor::new(vec![len, hidden], d).unwrap()
                };
                let q = data(&mut rng);
                let k = data(&mut rng);
                let v = data(&mut rng);
                let mask = vec![true; len];
                let spec = AttentionSpec::new(heads, head_dim, window, vec![0])?;
                let inputs = SlidingInputs { q: &q, k: &k, v: &v, qg: &q, kg: &k, vg: &v };
                let t0 = Instant::now();
                for _ in 0..reps {
                    let _ = sliding_global_attention(&inputs, &spec, &mask)?;
                }
                let sparse_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
                let sc = attention_cost(len, &spec);
                sparse_entries.push((len, sc.score_entries));
                csv.push_str(&format!("{len},sliding_global,{sparse_ms:.3},{}\n", sc.score_entries));

                let dc = full_attention_cost(len, heads, head_dim);
                dense_entries.push((len, dc.score_entries));
                if len > max_dense_n {
                    csv.push_str(&format!("{len},full,skipped,{}\n", dc.score_entries));
                    continue;
                }
                let t0 = Instant::now();
                for _ in 0..reps {
                    let _ = full_attention(&q, &k, &v, heads, &mask, None)?;
                }
                let dense_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
                csv.push_str(&format!("{len},full,{dense_ms:.3},{}\n", dc.score_entries));
            }
            for ((len, s), (_, d)) in sparse_entries.iter().zip(&dense_entries) {
                csv.push_str(&format!("# entry_ratio n={len}: full/sliding = {:.3}\n", *d as f64 / *s as f64));
            }
            match &out {
                Some(p) => std::fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::CkptInspect { ckpt } => {
            let header = checkpoint::read_header(&ckpt)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
            Ok(())
        }
    }
}
