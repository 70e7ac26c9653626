//! Fixtures and independent re-implementations shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ratlab::datagen::TaskCatalog;
use ratlab::lm::{ActivationTrace, ModelConfig, TinyLm, Tokenizer, BOS, EOS, PAD};
use ratlab::nn::{finite_difference_gradient, max_relative_error, Gradients, Graph, ParamStore};
use ratlab::rag::synth::field;
use ratlab::rag::{truncate_key, Reader, REFERENCE_DELIMITER};
use ratlab::rat::CalibrationSet;
use ratlab::sample::InstructionSample;
use ratlab::Result;

pub fn tokenizer() -> Tokenizer {
    Tokenizer::from_chars("abcdefgh ,.".chars().collect())
}

pub fn model(n_layers: usize, d_model: usize, n_heads: usize, seed: u64) -> TinyLm {
    let tok = tokenizer();
    let cfg = ModelConfig {
        n_layers,
        d_model,
        n_heads,
        vocab_size: tok.vocab_size(),
        max_seq_len: 32,
    };
    TinyLm::new(cfg, tok, seed).unwrap()
}

/// Perturbs every parameter so gradients and hidden states are far from the
/// symmetric initial point.
pub fn jitter(model: &mut TinyLm, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for n in names {
        for v in model.params.get_mut(&n).unwrap().data_mut() {
            *v += scale * (rng.gen::<f64>() * 2.0 - 1.0);
        }
    }
}

/// Random `[BOS] text [EOS]` sequences of 4..=max_len tokens.
pub fn random_sequences(tok: &Tokenizer, count: usize, max_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chars = tok.chars().to_vec();
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=max_len - 2);
            let text: String = (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
            tok.encode_document(&text)
        })
        .collect()
}

pub fn calibration(tok: &Tokenizer, count: usize, seed: u64) -> CalibrationSet {
    CalibrationSet::new(random_sequences(tok, count, 20, seed), "random", seed).unwrap()
}

/// Layer scores recomputed from raw traces: per sample, the mean cosine
/// between each non-pad row entering and leaving the layer; then the plain
/// mean over samples.
pub fn profile_oracle(traces: &[ActivationTrace]) -> Vec<f64> {
    let n_layers = traces[0].hidden.len() - 1;
    let mut out = Vec::new();
    for layer in 1..=n_layers {
        let mut per_sample = Vec::new();
        for tr in traces {
            let (x, y) = (&tr.hidden[layer - 1], &tr.hidden[layer]);
            let d = x.shape()[1];
            let mut cos = Vec::new();
            for t in 0..tr.pad_mask.len() {
                if tr.pad_mask[t] {
                    continue;
                }
                let a = &x.data()[t * d..(t + 1) * d];
                let b = &y.data()[t * d..(t + 1) * d];
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for i in 0..d {
                    dot += a[i] * b[i];
                    na += a[i] * a[i];
                    nb += b[i] * b[i];
                }
                if na > 0.0 && nb > 0.0 {
                    cos.push(dot / (na.sqrt() * nb.sqrt()));
                }
            }
            per_sample.push(cos.iter().sum::<f64>() / cos.len() as f64);
        }
        out.push(per_sample.iter().sum::<f64>() / per_sample.len() as f64);
    }
    out
}

/// Character BLEU written out longhand: clipped n-gram matches for
/// n = 1..=4, add-one smoothing above unigrams, geometric mean, brevity
/// penalty `exp(1 - r/c)` when the candidate is not longer.
pub fn bleu_oracle(pred: &str, gold: &str) -> f64 {
    let p: Vec<char> = pred.chars().collect();
    let g: Vec<char> = gold.chars().collect();
    if p.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=4usize {
        let grams = |s: &[char]| -> Vec<String> {
            if s.len() < n {
                return Vec::new();
            }
            (0..=s.len() - n).map(|i| s[i..i + n].iter().collect()).collect()
        };
        let pg = grams(&p);
        let mut gold_left: HashMap<String, i64> = HashMap::new();
        for x in grams(&g) {
            *gold_left.entry(x).or_default() += 1;
        }
        let mut hits = 0.0;
        for x in &pg {
            let left = gold_left.entry(x.clone()).or_default();
            if *left > 0 {
                *left -= 1;
                hits += 1.0;
            }
        }
        let total = pg.len() as f64;
        let prec = if n == 1 { hits / total } else { (hits + 1.0) / (total + 1.0) };
        if prec == 0.0 {
            return 0.0;
        }
        precisions.push(prec);
    }
    let geo = (precisions.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
    let (c, r) = (p.len() as f64, g.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * geo).min(1.0)
}

pub fn random_string(rng: &mut ChaCha8Rng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// Dense Fisher–Yates over `0..n` driven by the same ChaCha8 stream the
/// calibration sampler uses; the first `k` positions, sorted.
pub fn dense_sample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        v.swap(i, j);
    }
    let mut out = v[..k].to_vec();
    out.sort_unstable();
    out
}

/// A reader that behaves like a perfectly trained model: for author
/// questions it first emits a retrieval call, then reads the author off the
/// reference block. Every other prompt gets a fixed plain answer.
pub struct ScriptedReader {
    pub k: usize,
}

pub const PLAIN_ANSWER: &str = "a plain answer";

impl Reader for ScriptedReader {
    fn read(&self, prompt: &str) -> Result<String> {
        if let Some((_, reference)) = prompt.split_once(&format!("\n{REFERENCE_DELIMITER}\n")) {
            return Ok(field(reference, "author").unwrap_or("unknown").to_string());
        }
        if let Some(title) = prompt.strip_prefix("who wrote ").and_then(|r| r.strip_suffix('?')) {
            let t = truncate_key(title, self.k)?;
            return Ok(format!("RETRIEVE(author-retrieval; title={t})"));
        }
        Ok(PLAIN_ANSWER.to_string())
    }
}

/// Counts recomputed straight from the sample lists.
pub struct Recount {
    pub total: usize,
    pub labeled_hungry: usize,
    pub labeled_efficient: usize,
    pub unlabeled_hungry: usize,
    pub unlabeled_efficient: usize,
    pub avg_query: f64,
    pub avg_response: f64,
}

pub fn recount(labeled: &[InstructionSample], unlabeled: &[InstructionSample], catalog: &TaskCatalog) -> Recount {
    let mut r = Recount {
        total: 0,
        labeled_hungry: 0,
        labeled_efficient: 0,
        unlabeled_hungry: 0,
        unlabeled_efficient: 0,
        avg_query: 0.0,
        avg_response: 0.0,
    };
    let mut q = 0usize;
    let mut a = 0usize;
    for (s, labeled) in labeled.iter().map(|s| (s, true)).chain(unlabeled.iter().map(|s| (s, false))) {
        r.total += 1;
        q += s.query.chars().count();
        a += s.response.chars().count();
        let hungry = catalog.data_hungry.contains(&s.task);
        match (labeled, hungry) {
            (true, true) => r.labeled_hungry += 1,
            (true, false) => r.labeled_efficient += 1,
            (false, true) => r.unlabeled_hungry += 1,
            (false, false) => r.unlabeled_efficient += 1,
        }
    }
    if r.total > 0 {
        r.avg_query = q as f64 / r.total as f64;
        r.avg_response = a as f64 / r.total as f64;
    }
    r
}

/// Tokens `[BOS] … [EOS]` for a plain text under the shared tokenizer.
pub fn doc(text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer().encode_chars(text).ids);
    ids.push(EOS);
    ids
}

pub fn fixture(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(rel)
}

/// Runs the CLI in-process; `args` excludes the program name.
pub fn ratlab(args: &[&str]) -> i32 {
    ratlab::cli::run_command(std::iter::once("ratlab").chain(args.iter().copied()))
}

/// One CLI invocation of the end-to-end flow and the run directory it wrote.
pub struct FlowRun {
    pub subcommand: &'static str,
    pub out: std::path::PathBuf,
}

/// Drives every subcommand once on a tiny configuration under `root`.
/// Panics on the first non-zero exit.
pub fn cli_flow(root: &std::path::Path) -> Vec<FlowRun> {
    let p = |name: &str| root.join(name);
    let s = |path: std::path::PathBuf| path.to_string_lossy().into_owned();
    let pre = p("pretrain-toy");
    let datagen_cfg = fixture("datagen/datagen.cfg");
    let steps: Vec<(&'static str, Vec<String>)> = vec![
        (
            "pretrain-toy",
            [
                "--set", "model.n_layers=4", "--set", "model.d_model=16", "--set", "model.n_heads=2",
                "--set", "train.steps=10", "--set", "data.synthetic_lines=48", "--set", "data.task_a_size=24",
                "--set", "data.task_b_size=16", "--set", "data.eval_size=4", "--seed", "3",
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "profile",
            vec![
                "--set".into(), format!("model={}", s(pre.join("model.ckpt"))),
                "--set".into(), format!("calibration={}", s(pre.join("data/pretrain.txt"))),
                "--set".into(), "calibration_size=8".into(),
            ],
        ),
        (
            "plan",
            vec![
                "--set".into(), format!("model={}", s(pre.join("model.ckpt"))),
                "--set".into(), format!("calibration={}", s(pre.join("data/pretrain.txt"))),
                "--set".into(), "calibration_size=8".into(),
                "--set".into(), "n_groups=2".into(),
            ],
        ),
        (
            "train-stage",
            vec![
                "--set".into(), format!("model={}", s(pre.join("model.ckpt"))),
                "--set".into(), format!("eval={}", s(pre.join("eval.cfg"))),
                "--set".into(), format!("stage1.train_dataset={}", s(pre.join("data/translation_train.jsonl"))),
                "--set".into(), format!("stage1.calibration_source={}", s(pre.join("data/pretrain.txt"))),
                "--set".into(), "stage1.n_groups=2".into(),
                "--set".into(), "stage1.calibration_size=8".into(),
                "--set".into(), "stage1.steps=3".into(),
            ],
        ),
        (
            "two-stage",
            [
                "--config".to_string(), s(pre.join("two_stage.cfg")),
                "--set".into(), "stage1.steps=3".into(), "--set".into(), "stage2.steps=3".into(),
                "--set".into(), "stage1.n_groups=2".into(), "--set".into(), "stage2.n_groups=2".into(),
                "--set".into(), "stage1.calibration_size=8".into(), "--set".into(), "stage2.calibration_size=8".into(),
            ]
            .to_vec(),
        ),
        (
            "eval",
            vec![
                "--set".into(), format!("model={}", s(p("two-stage").join("model.ckpt"))),
                "--set".into(), format!("manifest={}", s(pre.join("eval.cfg"))),
            ],
        ),
        (
            "report",
            vec![
                "--set".into(), format!("inputs={}", s(p("eval"))),
                "--layout".into(), "table5".into(),
            ],
        ),
        ("rag-index", vec!["--set".into(), "synthetic.records=40".into(), "--seed".into(), "2".into()]),
        (
            "rag-query",
            vec![
                "--set".into(), format!("kb={}", s(p("rag-index"))),
                "--set".into(), "task=author-retrieval".into(),
                "--key".into(), "zz".into(),
            ],
        ),
        (
            "rag-answer",
            vec![
                "--set".into(), format!("model={}", s(pre.join("model.ckpt"))),
                "--set".into(), format!("kb={}", s(p("rag-index"))),
                "--set".into(), "query=abc".into(),
                "--set".into(), "max_new_tokens=8".into(),
            ],
        ),
        ("datagen", vec!["--config".into(), s(datagen_cfg)]),
    ];
    let mut runs = Vec::new();
    for (sub, args) in steps {
        let out = p(sub);
        let mut argv: Vec<String> = vec![sub.into(), "--out".into(), s(out.clone())];
        argv.extend(args);
        let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
        let code = ratlab(&refs);
        assert_eq!(code, 0, "{sub} exited with {code}");
        runs.push(FlowRun { subcommand: sub, out });
    }
    runs
}

/// Re-runs `run` from its manifest into `out` and reports whether the
/// exit code was zero and the manifests agree.
pub fn replay_matches(run: &FlowRun, out: &std::path::Path) -> bool {
    let man = run.out.join("manifest.json");
    let code = ratlab(&[run.subcommand, "--from-manifest", &man.to_string_lossy(), "--out", &out.to_string_lossy()]);
    if code != 0 {
        return false;
    }
    let a = ratlab::cli::RunManifest::load(&run.out).unwrap();
    let b = ratlab::cli::RunManifest::load(out).unwrap();
    a == b
}

/// Two right-padded sequences: inputs, flattened targets and target mask.
fn grad_batch(model: &TinyLm) -> (Vec<Vec<usize>>, Vec<usize>, Vec<bool>) {
    let seqs = [doc("bad face"), doc("cab, ed.")];
    let width = seqs.iter().map(Vec::len).max().unwrap() - 1;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in &seqs {
        let mut i = s[..s.len() - 1].to_vec();
        i.resize(width, PAD);
        inputs.push(i);
        let mut t = s[1..].to_vec();
        t.resize(width, PAD);
        targets.extend(t);
    }
    assert!(model.config.max_seq_len >= width);
    let mask = targets.iter().map(|&t| t != PAD).collect();
    (inputs, targets, mask)
}

pub fn loss_and_grads(model: &TinyLm, params: &ParamStore, want_grads: bool) -> (f64, Option<Gradients>) {
    let (inputs, targets, mask) = grad_batch(model);
    let mut m = model.clone();
    m.params = params.clone();
    let mut g = Graph::new(&m.params);
    let (logits, _) = m.forward_graph(&mut g, &inputs).unwrap();
    let loss = g.cross_entropy(logits, &targets, &mask).unwrap();
    let value = g.value(loss).data()[0];
    let grads = want_grads.then(|| g.backward(loss).unwrap());
    (value, grads)
}

/// Largest relative error between backprop and central differences over a
/// tiny model, with parameters jittered away from initialisation.
pub fn gradient_error(seed: u64) -> (usize, f64) {
    let mut model = model(2, 8, 2, seed);
    jitter(&mut model, 0.3, seed + 100);
    let n_params = model.params.num_scalars();
    let (_, analytic) = loss_and_grads(&model, &model.params, true);
    let numeric =
        finite_difference_gradient(|p| Ok(loss_and_grads(&model, p, false).0), &model.params, 1e-5).unwrap();
    (n_params, max_relative_error(&analytic.unwrap(), &numeric, 1e-6))
}

/// The checked-in datagen fixtures: eight seed templates, fifty records,
/// and the blank-line separated segments of every file under `segments/`.
pub fn datagen_inputs() -> ratlab::datagen::PipelineInputs {
    let seeds = ratlab::datagen::Template::load(&fixture("datagen/seeds.jsonl")).unwrap();
    let mut seed_templates = std::collections::BTreeMap::new();
    seed_templates.insert("translation".to_string(), seeds);
    let mut segments = Vec::new();
    let mut files: Vec<_> = std::fs::read_dir(fixture("datagen/segments"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    for f in files {
        let text = std::fs::read_to_string(f).unwrap();
        segments.extend(text.split("\n\n").map(str::trim).filter(|s| !s.is_empty()).map(String::from));
    }
    ratlab::datagen::PipelineInputs {
        seed_templates,
        records: ratlab::datagen::LabeledRecord::load(&fixture("datagen/records.jsonl")).unwrap(),
        segments,
        seed_qa: ratlab::sample::read_jsonl(&fixture("datagen/seed_qa.jsonl")).unwrap(),
        unlabeled_task: "reading-comprehension".into(),
        templates_per_task: 6,
    }
}
