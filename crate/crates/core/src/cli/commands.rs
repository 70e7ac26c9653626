use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::cli::run::RunContext;
use crate::curriculum::synth;
use crate::curriculum::{
    build_calibration, n_ablation, run_stage, run_two_stage, Corpus, ForgettingProtocol, StageConfig, TwoStageConfig,
};
use crate::datagen::{
    replace_knowledge_samples, run_pipeline, AlignedLlmClient, GenerationParams, LabeledRecord, MockClient, PipelineInputs,
    RetryPolicy, TaskCatalog, Template,
};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_all, EvalManifest, EvalOptions, EvalTask, Layout, ReportEntry};
use crate::lm::{ModelConfig, TinyLm, Tokenizer, TrainConfig, Trainable};
use crate::nn::AdamWConfig;
use crate::rag::synth::knowledge_base;
use crate::rag::{
    answer_with_rag, read_kb, truncate_key, write_kb, KVIndex, KVRecord, LmReader, MissPolicy, RagOptions, TaskTag,
    TruncatedKey, DEFAULT_K, DEFAULT_MAX_MATCHES, ELLIPSIS, INDEX_VERSION,
};
use crate::rat::plan_from_calibration;
use crate::sample::{read_jsonl, to_jsonl, InstructionSample};

pub(crate) fn dispatch(ctx: &mut RunContext) -> Result<()> {
    match ctx.subcommand.as_str() {
        "pretrain-toy" => pretrain_toy(ctx),
        "profile" => profile(ctx, false),
        "plan" => profile(ctx, true),
        "train-stage" => train_stage(ctx),
        "two-stage" => two_stage(ctx),
        "rag-index" => rag_index(ctx),
        "rag-query" => rag_query(ctx),
        "rag-answer" => rag_answer(ctx),
        "datagen" => datagen(ctx),
        "eval" => eval(ctx),
        "report" => report(ctx),
        other => Err(Error::contract(format!("no handler for {other}"))),
    }
}

fn comma_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    comma_list(value)
        .iter()
        .map(|v| v.parse().map_err(|e| Error::config(key, format!("cannot parse {v:?}: {e}"))))
        .collect()
}

fn train_config(ctx: &RunContext, steps: usize, lr: f64, batch: usize) -> Result<TrainConfig> {
    Ok(TrainConfig {
        steps: ctx.get_or("train.steps", steps)?,
        batch_size: ctx.get_or("train.batch_size", batch)?,
        optimizer: AdamWConfig {
            lr: ctx.get_or("train.lr", lr)?,
            ..AdamWConfig::default()
        },
        warmup_ratio: ctx.get_or("train.warmup_ratio", 0.0)?,
        seed: ctx.seed,
    })
}

const TWO_STAGE_CFG: &str = "\
# Stage 1 trains on cipher translation, stage 2 on punctuation.
model = model.ckpt
eval = eval.cfg
stage1.train_dataset = data/translation_train.jsonl
stage1.calibration_source = data/pretrain.txt
stage1.method = full
stage1.steps = 250
stage1.lr = 0.003
stage2.train_dataset = data/punctuation_train.jsonl
stage2.calibration_source = data/translation_train.jsonl
stage2.method = rat
stage2.steps = 200
stage2.lr = 0.003
forgetting.tasks = translation
";

const EVAL_CFG: &str = "\
task.translation.path = data/translation_eval.jsonl
task.translation.metric = ppl
task.punctuation.path = data/punctuation_eval.jsonl
task.punctuation.metric = ppl
";

fn pretrain_toy(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&["model.*", "data.*", "train.*"])?;
    ctx.cfg
        .scoped("model")
        .ensure_known(&["n_layers", "d_model", "n_heads", "max_seq_len"])?;
    ctx.cfg.scoped("data").ensure_known(&[
        "corpus",
        "vocab_from",
        "synthetic_lines",
        "task_a_size",
        "task_b_size",
        "eval_size",
    ])?;
    ctx.cfg
        .scoped("train")
        .ensure_known(&["steps", "batch_size", "lr", "warmup_ratio"])?;
    let p = ForgettingProtocol::default();
    let seed = ctx.seed;

    let (tok, corpus) = match ctx.opt_input("data.corpus")? {
        None => {
            let tok = Tokenizer::from_chars(synth::alphabet().chars().collect());
            let lines = synth::pretrain_lines(ctx.get_or("data.synthetic_lines", p.pretrain_lines)?, seed);
            let a = synth::translation_samples(ctx.get_or("data.task_a_size", p.task_a_size)?, 1000 + seed);
            let b = synth::punctuation_samples(ctx.get_or("data.task_b_size", p.task_b_size)?, 2000 + seed);
            let n_eval = ctx.get_or("data.eval_size", p.eval_size)?;
            ctx.write_text("data/pretrain.txt", &(lines.join("\n") + "\n"))?;
            ctx.write_text("data/translation_train.jsonl", &to_jsonl(&a))?;
            ctx.write_text("data/punctuation_train.jsonl", &to_jsonl(&b))?;
            ctx.write_text("data/translation_eval.jsonl", &to_jsonl(&synth::translation_samples(n_eval, 99)))?;
            ctx.write_text("data/punctuation_eval.jsonl", &to_jsonl(&synth::punctuation_samples(n_eval, 98)))?;
            ctx.write_text("eval.cfg", EVAL_CFG)?;
            ctx.write_text("two_stage.cfg", TWO_STAGE_CFG)?;
            let corpus = Corpus::from_documents("synthetic-pretrain", &lines, &tok);
            (tok, corpus)
        }
        Some(path) => {
            let mut texts = vec![std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?];
            if let Some(v) = ctx.cfg.get_str("data.vocab_from").map(String::from) {
                for (i, f) in comma_list(&v).iter().enumerate() {
                    let fp = ctx.resolve(f);
                    ctx.record_input(&format!("data.vocab_from[{i}]"), &fp)?;
                    texts.push(std::fs::read_to_string(&fp).map_err(|e| Error::io(&fp, e))?);
                }
            }
            let tok = Tokenizer::from_corpus(texts.iter().map(String::as_str));
            let corpus = Corpus::load(&path, &tok)?;
            (tok, corpus)
        }
    };
    let config = ModelConfig {
        n_layers: ctx.get_or("model.n_layers", p.n_layers)?,
        d_model: ctx.get_or("model.d_model", p.d_model)?,
        n_heads: ctx.get_or("model.n_heads", p.n_heads)?,
        vocab_size: tok.vocab_size(),
        max_seq_len: ctx.get_or("model.max_seq_len", p.max_seq_len)?,
    };
    let mut model = TinyLm::new(config, tok, seed)?;
    let tc = train_config(ctx, p.pretrain_steps, p.pretrain_lr, p.batch_size)?;
    let report = model.train(&corpus.items, &Trainable::All, &tc)?;
    model.save(
        &ctx.out_path("model.ckpt")?,
        json!({ "row": "base", "seed": seed, "corpus": corpus.source_tag() }),
    )?;
    ctx.write_json(
        "train_report.json",
        &json!({
            "seed": seed,
            "corpus": corpus.source_tag(),
            "model": model.config,
            "parameters": model.params.content_hash(),
            "train": tc,
            "report": report,
        }),
    )?;
    println!(
        "pre-trained {} layers for {} steps on {} ({} sequences); final loss {}",
        model.config.n_layers,
        report.steps,
        corpus.tag,
        corpus.len(),
        report.final_loss.map_or("n/a".to_string(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn profile(ctx: &mut RunContext, plan_only: bool) -> Result<()> {
    ctx.ensure_known(&["model", "calibration", "calibration_size", "n_groups"])?;
    let (model, _) = ctx.load_model("model")?;
    let path = ctx.input("calibration")?;
    let corpus = Corpus::load(&path, &model.tokenizer)?;
    let calib = build_calibration(&corpus, ctx.get_or("calibration_size", 16)?, ctx.seed)?;
    let n_layers = model.config.n_layers;
    let n_groups = ctx.get_or("n_groups", 8.min(n_layers))?;
    if n_groups == 0 || n_groups > n_layers {
        return Err(Error::config("n_groups", format!("must lie in 1..={n_layers} for this model")));
    }
    let (profile, plan) = plan_from_calibration(&model, &calib, n_groups)?;
    print!("{}", plan.to_table());
    ctx.write_text("plan.csv", &plan.to_csv())?;
    let meta = json!({
        "seed": ctx.seed,
        "calibration": calib.source_tag,
        "calibration_size": calib.len(),
        "n_groups": n_groups,
    });
    if plan_only {
        ctx.write_json("plan.json", &json!({ "run": meta, "plan": plan }))?;
    } else {
        println!(
            "{} samples, {} zero-norm timesteps excluded",
            profile.sample_count, profile.excluded_timesteps
        );
        ctx.write_json("profile.json", &json!({ "run": meta, "profile": profile }))?;
    }
    Ok(())
}

/// Optional evaluation manifest named by `key`, with its datasets
/// fingerprinted as inputs.
fn load_eval(ctx: &mut RunContext, key: &str) -> Result<(Vec<(EvalTask, Vec<InstructionSample>)>, EvalOptions)> {
    let Some(path) = ctx.opt_input(key)? else {
        return Ok((Vec::new(), EvalOptions::default()));
    };
    let manifest = EvalManifest::load(&path)?;
    for t in &manifest.tasks {
        ctx.record_input(&format!("{key}:task.{}.path", t.task), &t.path)?;
    }
    Ok((manifest.load_data()?, manifest.options))
}

/// Stage settings from `stage<id>.*`, inheriting the run seed.
fn stage_config(ctx: &mut RunContext, id: u8) -> Result<StageConfig> {
    ctx.input(&format!("stage{id}.train_dataset"))?;
    ctx.input(&format!("stage{id}.calibration_source"))?;
    let mut stage = StageConfig::from_flat(&ctx.cfg, id, &ctx.base)?;
    if !ctx.cfg.contains(&format!("stage{id}.seed")) {
        stage.seed = ctx.seed;
    }
    Ok(stage)
}

fn train_stage(ctx: &mut RunContext) -> Result<()> {
    let id: u8 = ctx.get_or("stage_id", 1)?;
    let scope = format!("stage{id}.*");
    ctx.ensure_known(&["model", "eval", "stage_id", "ablation.n", &scope])?;
    let (mut model, _) = ctx.load_model("model")?;
    let stage = stage_config(ctx, id)?;
    let (eval, opts) = load_eval(ctx, "eval")?;
    let train = Corpus::load(&stage.train_dataset, &model.tokenizer)?;
    let calib = Corpus::load(&stage.calibration_source, &model.tokenizer)?;

    if let Some(ns) = ctx.cfg.get_str("ablation.n").map(String::from) {
        let ns: Vec<usize> = parse_list("ablation.n", &ns)?;
        if eval.is_empty() {
            return Err(Error::config("eval", "an N ablation needs an evaluation manifest"));
        }
        let outcome = n_ablation(&model, &stage, &ns, &train, &calib, &eval, &opts)?;
        for r in &outcome.reports {
            ctx.write_text(&format!("ablation/N{}.json", r.n_groups), &r.to_json())?;
        }
        ctx.write_json("results.json", &outcome.entries)?;
        outcome.table.write(&ctx.out, "ablation")?;
        print!("{}", outcome.table.markdown);
        return Ok(());
    }

    let report = run_stage(&mut model, &stage, &train, &calib, &eval, &opts)?;
    model.save(
        &ctx.out_path("model.ckpt")?,
        json!({ "row": stage.method.label(), "stage": id, "seed": stage.seed }),
    )?;
    ctx.write_text("run_report.json", &report.to_json())?;
    let md = report.to_markdown()?;
    ctx.write_text("run_report.md", &md)?;
    if let Some(plan) = &report.plan {
        ctx.write_text("plan.csv", &plan.to_csv())?;
    }
    let entries: Vec<ReportEntry> = report
        .eval_after
        .iter()
        .map(|r| ReportEntry::new(stage.method.label(), r.clone()))
        .collect();
    ctx.write_json("results.json", &entries)?;
    print!("{md}");
    match &report.eval_error {
        Some(e) => Err(Error::data(format!("evaluation after training failed: {e}"))),
        None => Ok(()),
    }
}

fn two_stage(ctx: &mut RunContext) -> Result<()> {
    let keys = TwoStageConfig::known_keys();
    let mut allowed: Vec<&str> = keys.iter().map(String::as_str).collect();
    allowed.extend(["model", "eval"]);
    ctx.ensure_known(&allowed)?;
    let (mut model, _) = ctx.load_model("model")?;
    let stage1 = stage_config(ctx, 1)?;
    let stage2 = stage_config(ctx, 2)?;
    let mut cfg = TwoStageConfig::from_flat(&ctx.cfg, &ctx.base)?;
    cfg.stage1 = stage1;
    cfg.stage2 = stage2;
    let (eval, opts) = load_eval(ctx, "eval")?;
    let outcome = run_two_stage(&mut model, &cfg, &eval, &opts, Some(&ctx.out))?;
    let label = cfg.stage2.method.label();
    model.save(
        &ctx.out_path("model.ckpt")?,
        json!({ "row": label, "stage": 2, "seed": cfg.stage2.seed }),
    )?;
    ctx.write_text("stage1.json", &outcome.stage1.to_json())?;
    ctx.write_text("stage2.json", &outcome.stage2.to_json())?;
    ctx.write_json("forgetting.json", &outcome.forgetting)?;
    let entries: Vec<ReportEntry> = outcome
        .stage2
        .eval_after
        .iter()
        .map(|r| ReportEntry::new(label, r.clone()))
        .collect();
    ctx.write_json("results.json", &entries)?;

    let mut md = outcome.stage1.to_markdown()?;
    md.push('\n');
    md.push_str(&outcome.stage2.to_markdown()?);
    if !outcome.forgetting.entries.is_empty() {
        md.push_str("\n## Forgetting\n\n| task | before | after | delta |\n|---|---:|---:|---:|\n");
        for e in &outcome.forgetting.entries {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:+.2} |",
                e.task,
                e.metric.format(e.before),
                e.metric.format(e.after),
                e.delta
            );
        }
    }
    ctx.write_text("report.md", &md)?;
    print!("{md}");
    Ok(())
}

/// `kb` may name a JSONL file or a `rag-index` run directory.
fn load_kb(ctx: &mut RunContext) -> Result<Vec<KVRecord>> {
    let path = ctx.input("kb")?;
    let file = if path.is_dir() { path.join("kb.jsonl") } else { path };
    read_kb(&file)
}

fn rag_index(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&["kb", "synthetic.records", "synthetic.k"])?;
    let records = if ctx.cfg.contains("kb") {
        load_kb(ctx)?
    } else if let Some(n) = ctx.cfg.get::<usize>("synthetic.records")? {
        knowledge_base(n, ctx.get_or("synthetic.k", DEFAULT_K)?, ctx.seed)?
    } else {
        return Err(Error::config("kb", "set kb or synthetic.records"));
    };
    let index = KVIndex::build(records)?;
    write_kb(&ctx.out_path("kb.jsonl")?, index.records())?;
    ctx.write_json(
        "index.json",
        &json!({
            "version": INDEX_VERSION,
            "records": index.len(),
            "signature": index.signature(),
            "warnings": index.warnings(),
        }),
    )?;
    println!("indexed {} records (signature {})", index.len(), &index.signature()[..16]);
    for w in index.warnings() {
        println!("warning: {w}");
    }
    Ok(())
}

fn rag_query(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&["kb", "query", "k", "task", "max_matches"])?;
    let records = load_kb(ctx)?;
    let index = KVIndex::build(records)?;
    let raw = ctx.cfg.require_str("query")?.to_string();
    let query: TruncatedKey = if raw.contains(ELLIPSIS) {
        raw.parse().map_err(|e: Error| Error::config("query", e.to_string()))?
    } else {
        truncate_key(&raw, ctx.get_or("k", DEFAULT_K)?)?
    };
    let task: TaskTag = ctx.cfg.require("task")?;
    let max = ctx.get_or("max_matches", DEFAULT_MAX_MATCHES)?;
    let r = index.retrieve(&query, task, max);

    let mut text = format!("query {query} ({task}): {} match(es)\n", r.total_matches);
    let mut hits = Vec::new();
    for (rank, h) in r.hits.iter().enumerate() {
        let level = &h.record.key_levels()[h.level_index].level;
        let first = h.record.value().lines().next().unwrap_or_default();
        let _ = writeln!(text, "{:>3}  #{:<6} {}={}  {}", rank + 1, h.record_index, level, h.key, first);
        hits.push(json!({
            "rank": rank + 1,
            "record": h.record_index,
            "level": level,
            "key": h.key,
            "value": h.record.value(),
        }));
    }
    if r.overflow {
        let _ = writeln!(text, "... {} more not shown (max_matches = {max})", r.total_matches - r.hits.len());
    }
    print!("{text}");
    ctx.write_text("matches.txt", &text)?;
    ctx.write_json(
        "matches.json",
        &json!({
            "query": query.render(),
            "task": task,
            "total_matches": r.total_matches,
            "overflow": r.overflow,
            "hits": hits,
        }),
    )
}

fn rag_answer(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&["model", "kb", "queries", "query", "inject", "max_matches", "on_miss", "max_new_tokens"])?;
    let (model, _) = ctx.load_model("model")?;
    let index = KVIndex::build(load_kb(ctx)?)?;
    let samples: Vec<InstructionSample> = match ctx.opt_input("queries")? {
        Some(p) => read_jsonl(&p)?,
        None => vec![InstructionSample::new("query", ctx.cfg.require_str("query")?, "")],
    };
    let on_miss = match ctx.cfg.get_str("on_miss").unwrap_or("pass1-answer") {
        "pass1-answer" => MissPolicy::Pass1Answer,
        "error" => MissPolicy::Error,
        other => return Err(Error::config("on_miss", format!("expected pass1-answer or error, got {other:?}"))),
    };
    let opts = RagOptions {
        inject: ctx.get_or("inject", 1)?,
        max_matches: ctx.get_or("max_matches", DEFAULT_MAX_MATCHES)?,
        on_miss,
    };
    let reader = LmReader {
        model: &model,
        max_new_tokens: ctx.get_or("max_new_tokens", 64)?,
    };
    let mut lines = String::new();
    let mut correct = 0;
    for s in &samples {
        let a = answer_with_rag(&reader, &index, &s.query, &opts)?;
        correct += usize::from(!s.response.is_empty() && a.answer.trim() == s.response.trim());
        println!("{} -> {}{}", s.query, a.answer, if a.no_evidence { " [no evidence]" } else { "" });
        lines.push_str(&serde_json::to_string(&json!({ "query": s.query, "gold": s.response, "result": a }))?);
        lines.push('\n');
    }
    ctx.write_text("answers.jsonl", &lines)?;
    if samples.iter().any(|s| !s.response.is_empty()) {
        println!("exact match: {correct}/{}", samples.len());
    }
    Ok(())
}

/// Paragraphs (blank-line separated) of a text file, or of every `.txt`
/// file in a directory in name order.
fn read_segments(path: &Path) -> Result<Vec<String>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut segments = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let mut cur: Vec<&str> = Vec::new();
        for line in text.lines().chain(std::iter::once("")) {
            if line.trim().is_empty() {
                if !cur.is_empty() {
                    segments.push(cur.join("\n"));
                    cur.clear();
                }
            } else {
                cur.push(line.trim_end());
            }
        }
    }
    Ok(segments)
}

fn make_client(ctx: &RunContext) -> Result<Box<dyn AlignedLlmClient>> {
    match ctx.cfg.get_str("client").unwrap_or("mock") {
        "mock" => Ok(Box::new(MockClient::new())),
        #[cfg(feature = "http")]
        "http" => {
            let c = crate::datagen::HttpClient::new(
                ctx.cfg.require_str("client.endpoint")?,
                ctx.cfg.get_str("client.model").unwrap_or("gpt-3.5-turbo"),
                ctx.cfg.get_str("client.token_env").unwrap_or(crate::cli::TOKEN_ENV),
                std::time::Duration::from_secs(ctx.get_or("client.timeout_secs", 60)?),
            )?;
            Ok(Box::new(c))
        }
        #[cfg(not(feature = "http"))]
        "http" => Err(Error::config("client", "this build has no HTTP client (enable the `http` feature)")),
        other => Err(Error::config("client", format!("expected mock or http, got {other:?}"))),
    }
}

fn datagen(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&[
        "seeds",
        "records",
        "segments",
        "seed_qa",
        "unlabeled_task",
        "templates_per_task",
        "data_hungry",
        "kb",
        "k",
        "client",
        "client.*",
    ])?;
    ctx.cfg.scoped("client").ensure_known(&[
        "endpoint",
        "model",
        "token_env",
        "timeout_secs",
        "max_retries",
        "backoff_ms",
        "temperature",
        "max_outputs",
    ])?;
    let mut seed_templates: BTreeMap<String, Vec<Template>> = BTreeMap::new();
    for t in Template::load(&ctx.input("seeds")?)? {
        seed_templates.entry(t.task.clone()).or_default().push(t);
    }
    let records = LabeledRecord::load(&ctx.input("records")?)?;
    let (segments, seed_qa) = match ctx.opt_input("segments")? {
        Some(p) => (read_segments(&p)?, read_jsonl(&ctx.input("seed_qa")?)?),
        None => (Vec::new(), Vec::new()),
    };
    let inputs = PipelineInputs {
        seed_templates,
        records,
        segments,
        seed_qa,
        unlabeled_task: ctx.cfg.get_str("unlabeled_task").unwrap_or("reading-comprehension").to_string(),
        templates_per_task: ctx.get_or("templates_per_task", 8)?,
    };
    let params = GenerationParams {
        temperature: ctx.get_or("client.temperature", 0.7)?,
        max_outputs: ctx.get_or("client.max_outputs", 8)?,
        seed: ctx.seed,
    };
    let retry = RetryPolicy {
        max_retries: ctx.get_or("client.max_retries", 2)?,
        backoff_ms: ctx.get_or("client.backoff_ms", 0)?,
    };
    let catalog = TaskCatalog {
        data_hungry: comma_list(ctx.cfg.get_str("data_hungry").unwrap_or("translation")).into_iter().collect(),
    };
    let client = make_client(ctx)?;
    let out = run_pipeline(&inputs, client.as_ref(), &params, &retry, &catalog)?;

    let mut samples = out.samples();
    let mut replaced = 0;
    if ctx.cfg.contains("kb") {
        let kb = load_kb(ctx)?;
        // The record whose longest key occurs in the query grounds the sample.
        let lookup = |s: &InstructionSample| {
            kb.iter()
                .filter_map(|r| {
                    r.key_levels()
                        .iter()
                        .filter(|kl| s.query.contains(&kl.key))
                        .map(|kl| kl.key.chars().count())
                        .max()
                        .map(|len| (len, r))
                })
                .max_by_key(|(len, _)| *len)
                .map(|(_, r)| r)
        };
        (samples, replaced) = replace_knowledge_samples(&samples, lookup, ctx.get_or("k", DEFAULT_K)?)?;
    }

    ctx.write_text("samples.jsonl", &to_jsonl(&samples))?;
    ctx.write_text("templates.jsonl", &to_jsonl(&out.templates))?;
    ctx.write_json(
        "rejected.json",
        &json!({ "templates": out.rejected_templates, "qa": out.rejected_qa }),
    )?;
    ctx.write_json(
        "counts.json",
        &json!({
            "seed": ctx.seed,
            "templates": out.templates.len(),
            "fill_pairs": out.fill_pairs,
            "fill_produced": out.fill_produced,
            "fill_dropped": out.fill_dropped,
            "duplicates_removed": out.duplicates_removed,
            "knowledge_replaced": replaced,
            "samples": samples.len(),
        }),
    )?;
    ctx.write_json("stats.json", &out.stats)?;
    ctx.write_text("stats.md", &out.stats.to_markdown())?;
    ctx.write_text("stats.csv", &out.stats.to_csv())?;
    print!("{}", out.stats.to_markdown());
    println!(
        "\n{} templates; {} of {} template/record pairs filled; {} duplicates removed; {} samples written",
        out.templates.len(),
        out.fill_produced,
        out.fill_pairs,
        out.duplicates_removed,
        samples.len()
    );
    Ok(())
}

fn eval(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&["model", "manifest", "row", "layout"])?;
    let (model, extra) = ctx.load_model("model")?;
    if !ctx.cfg.contains("manifest") {
        return Err(Error::config("manifest", "required key is missing"));
    }
    let (data, opts) = load_eval(ctx, "manifest")?;
    let results = evaluate_all(&model, &data, &opts)?;
    let row = match ctx.cfg.get_str("row") {
        Some(r) => r.to_string(),
        None => extra["row"].as_str().unwrap_or("model").to_string(),
    };
    let entries: Vec<ReportEntry> = results.into_iter().map(|r| ReportEntry::new(row.clone(), r)).collect();
    ctx.write_json("results.json", &entries)?;
    let layout: Layout = ctx.get_or("layout", Layout::Plain)?;
    let report = emit_report(&entries, layout)?;
    report.write(&ctx.out, "report")?;
    print!("{}", report.markdown);
    Ok(())
}

fn report(ctx: &mut RunContext) -> Result<()> {
    ctx.ensure_known(&["inputs", "layout", "note"])?;
    let list = comma_list(ctx.cfg.require_str("inputs")?);
    if list.is_empty() {
        return Err(Error::config("inputs", "no result files given"));
    }
    let mut entries: Vec<ReportEntry> = Vec::new();
    for (i, item) in list.iter().enumerate() {
        let mut path = ctx.resolve(item);
        if path.is_dir() {
            path = path.join("results.json");
        }
        ctx.record_input(&format!("inputs[{i}]"), &path)?;
        entries.extend(read_json_entries(&path)?);
    }
    let layout: Layout = ctx.get_or("layout", Layout::Table5)?;
    let mut report = emit_report(&entries, layout)?;
    if let Some(note) = ctx.cfg.get_str("note") {
        report.markdown = crate::eval::with_note(&report.markdown, note);
    }
    report.write(&ctx.out, "report")?;
    print!("{}", report.markdown);
    Ok(())
}

fn read_json_entries(path: &Path) -> Result<Vec<ReportEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
