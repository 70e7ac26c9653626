use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::datagen::client::{complete_with_retry, AlignedLlmClient, GenerationParams, LlmRequest, Purpose, RetryPolicy};
use crate::datagen::template::{fill_templates, parse_qa_wire, LabeledRecord, Template};
use crate::error::{Error, Result};
use crate::rag::{is_knowledge_task, reformat_knowledge_sample, KVRecord};
use crate::sample::InstructionSample;

/// Number of handcrafted in-context examples every request carries.
pub const SEED_EXAMPLES: usize = 8;

/// Fraction of answer character bigrams that must occur in the segment
/// when the answer is not a verbatim substring.
pub const SUPPORT_THRESHOLD: f64 = 0.8;

const TEMPLATE_SYSTEM: &str = "Write new instruction templates for the task. Keep every {placeholder} \
from the examples and answer in the same 'Q: ... / A: ...' form.";
const QA_SYSTEM: &str = "Read the passage and write question-answer pairs whose answers are taken \
from the passage, in the same 'Q: ... / A: ...' form as the examples.";

fn check_seeds(n: usize) -> Result<()> {
    if n != SEED_EXAMPLES {
        return Err(Error::contract(format!(
            "expected exactly {SEED_EXAMPLES} seed examples, got {n}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateOutcome {
    pub templates: Vec<Template>,
    pub rejected: Vec<Rejected>,
}

/// Asks the client for up to `count` new templates for `task`, keeping only
/// those whose slots all name one of `fields`.
pub fn generate_templates<C: AlignedLlmClient + ?Sized>(
    task: &str,
    seeds: &[Template],
    fields: &BTreeSet<String>,
    client: &C,
    count: usize,
    params: &GenerationParams,
    retry: &RetryPolicy,
) -> Result<TemplateOutcome> {
    check_seeds(seeds.len())?;
    let request = LlmRequest {
        purpose: Purpose::Templates,
        system: TEMPLATE_SYSTEM.into(),
        examples: seeds.iter().map(Template::to_wire).collect(),
        input: format!("task: {task}; fields: {}", fields.iter().cloned().collect::<Vec<_>>().join(", ")),
        params: GenerationParams {
            max_outputs: count,
            ..params.clone()
        },
    };
    let mut templates = Vec::new();
    let mut rejected = Vec::new();
    for text in complete_with_retry(client, &request, retry)? {
        if templates.len() == count {
            break;
        }
        match Template::from_wire(task, &text).and_then(|t| t.validate(fields).map(|_| t)) {
            Ok(t) if !templates.contains(&t) => templates.push(t),
            Ok(_) => rejected.push(Rejected {
                text,
                reason: "duplicate template".into(),
            }),
            Err(e) => rejected.push(Rejected {
                text,
                reason: e.to_string(),
            }),
        }
    }
    if templates.is_empty() {
        return Err(Error::data(format!("no valid templates for task {task}")));
    }
    Ok(TemplateOutcome { templates, rejected })
}

fn bigrams(s: &str) -> Vec<(char, char)> {
    let c: Vec<char> = s.chars().collect();
    c.windows(2).map(|w| (w[0], w[1])).collect()
}

/// An answer is supported when it occurs verbatim in `segment` or at least
/// [`SUPPORT_THRESHOLD`] of its character bigrams do.
pub fn is_supported(answer: &str, segment: &str) -> bool {
    let answer = answer.trim();
    if answer.is_empty() {
        return false;
    }
    if segment.contains(answer) {
        return true;
    }
    let ab = bigrams(answer);
    if ab.is_empty() {
        return false;
    }
    let sb: HashSet<(char, char)> = bigrams(segment).into_iter().collect();
    let hit = ab.iter().filter(|b| sb.contains(b)).count();
    hit as f64 / ab.len() as f64 >= SUPPORT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOutcome {
    pub samples: Vec<InstructionSample>,
    pub rejected: Vec<Rejected>,
}

/// QA pairs proposed by the client for one unlabeled segment, filtered by
/// the support check.
pub fn extract_qa<C: AlignedLlmClient + ?Sized>(
    task: &str,
    segment: &str,
    seed_qa: &[InstructionSample],
    client: &C,
    params: &GenerationParams,
    retry: &RetryPolicy,
) -> Result<ExtractOutcome> {
    if segment.trim().is_empty() {
        return Err(Error::contract("segment is empty"));
    }
    check_seeds(seed_qa.len())?;
    let request = LlmRequest {
        purpose: Purpose::QaExtraction,
        system: QA_SYSTEM.into(),
        examples: seed_qa
            .iter()
            .map(|s| format!("Q: {}\nA: {}", s.query, s.response))
            .collect(),
        input: segment.to_string(),
        params: params.clone(),
    };
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for text in complete_with_retry(client, &request, retry)? {
        match parse_qa_wire(&text) {
            Ok((q, a)) if is_supported(&a, segment) => samples.push(InstructionSample::new(task, q, a)),
            Ok(_) => rejected.push(Rejected {
                text,
                reason: "answer not supported by the segment".into(),
            }),
            Err(e) => rejected.push(Rejected {
                text,
                reason: e.to_string(),
            }),
        }
    }
    Ok(ExtractOutcome { samples, rejected })
}

/// NFC, whitespace runs collapsed to one space, trimmed.
pub fn normalize_text(s: &str) -> String {
    s.nfc().collect::<String>().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops samples whose normalised (query, response) was already seen,
/// keeping first occurrences in order.
pub fn dedup(samples: &[InstructionSample]) -> Vec<InstructionSample> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert((normalize_text(&s.query), normalize_text(&s.response))))
        .cloned()
        .collect()
}

/// Replaces each knowledge-intensive sample that `lookup` can ground with
/// its two retrieval-augmented forms (call first, then reference-augmented).
/// Returns the new list and how many samples were replaced.
pub fn replace_knowledge_samples<'r, F>(samples: &[InstructionSample], mut lookup: F, k: usize) -> Result<(Vec<InstructionSample>, usize)>
where
    F: FnMut(&InstructionSample) -> Option<&'r KVRecord>,
{
    let mut out = Vec::with_capacity(samples.len());
    let mut replaced = 0;
    for s in samples {
        match is_knowledge_task(&s.task).then(|| lookup(s)).flatten() {
            Some(record) => {
                let f = reformat_knowledge_sample(s, record, k)?;
                out.push(f.format_a);
                out.push(f.format_b);
                replaced += 1;
            }
            None => out.push(s.clone()),
        }
    }
    Ok((out, replaced))
}

/// Which tasks count as data-hungry; everything else is data-efficient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCatalog {
    pub data_hungry: BTreeSet<String>,
}

impl Default for TaskCatalog {
    fn default() -> Self {
        Self {
            data_hungry: ["translation".to_string()].into(),
        }
    }
}

impl TaskCatalog {
    pub fn is_data_hungry(&self, task: &str) -> bool {
        self.data_hungry.contains(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub labeled: usize,
    pub labeled_data_hungry: usize,
    pub labeled_data_efficient: usize,
    pub unlabeled: usize,
    pub unlabeled_data_hungry: usize,
    pub unlabeled_data_efficient: usize,
    /// Mean query length in characters.
    pub avg_instruction_length: f64,
    /// Mean response length in characters.
    pub avg_output_length: f64,
    pub per_task: BTreeMap<String, usize>,
}

/// Counts and mean character lengths over both sources. Empty input gives
/// zeroed statistics.
pub fn dataset_stats(labeled: &[InstructionSample], unlabeled: &[InstructionSample], catalog: &TaskCatalog) -> DatasetStats {
    let hungry = |xs: &[InstructionSample]| xs.iter().filter(|s| catalog.is_data_hungry(&s.task)).count();
    let all = || labeled.iter().chain(unlabeled);
    let total = labeled.len() + unlabeled.len();
    let mean = |f: fn(&InstructionSample) -> usize| {
        if total == 0 {
            0.0
        } else {
            all().map(f).sum::<usize>() as f64 / total as f64
        }
    };
    let mut per_task = BTreeMap::new();
    for s in all() {
        *per_task.entry(s.task.clone()).or_insert(0) += 1;
    }
    let (lh, uh) = (hungry(labeled), hungry(unlabeled));
    DatasetStats {
        total,
        labeled: labeled.len(),
        labeled_data_hungry: lh,
        labeled_data_efficient: labeled.len() - lh,
        unlabeled: unlabeled.len(),
        unlabeled_data_hungry: uh,
        unlabeled_data_efficient: unlabeled.len() - uh,
        avg_instruction_length: mean(|s| s.query.chars().count()),
        avg_output_length: mean(|s| s.response.chars().count()),
        per_task,
    }
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl DatasetStats {
    /// (indent, label, value) rows in the order of the statistics table.
    pub fn rows(&self) -> Vec<(usize, &'static str, String)> {
        let mut rows = vec![
            (0, "# instructions", thousands(self.total)),
            (1, "# instructions from labeled data", thousands(self.labeled)),
            (2, "# data-hungry tasks data", thousands(self.labeled_data_hungry)),
            (2, "# data-efficient tasks data", thousands(self.labeled_data_efficient)),
            (1, "# instructions from unlabeled data", thousands(self.unlabeled)),
        ];
        if self.unlabeled_data_hungry > 0 {
            rows.push((2, "# data-hungry tasks data", thousands(self.unlabeled_data_hungry)));
        }
        rows.push((2, "# data-efficient tasks data", thousands(self.unlabeled_data_efficient)));
        rows.push((0, "avg. instruction length", format!("{:.2}", self.avg_instruction_length)));
        rows.push((0, "avg. output length", format!("{:.2}", self.avg_output_length)));
        rows
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Statistics | |\n|---|---:|\n");
        for (indent, label, value) in self.rows() {
            s.push_str(&format!("| {}{label} | {value} |\n", "&nbsp;&nbsp;".repeat(indent)));
        }
        if !self.per_task.is_empty() {
            s.push_str("\n| task | count |\n|---|---:|\n");
            for (t, n) in &self.per_task {
                s.push_str(&format!("| {t} | {n} |\n"));
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("statistic,value\n");
        for (indent, label, value) in self.rows() {
            s.push_str(&format!("\"{}{label}\",\"{value}\"\n", "  ".repeat(indent)));
        }
        s
    }
}

/// Inputs for a full generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs {
    /// Eight seed templates per task.
    pub seed_templates: BTreeMap<String, Vec<Template>>,
    pub records: Vec<LabeledRecord>,
    pub segments: Vec<String>,
    pub seed_qa: Vec<InstructionSample>,
    /// Task name given to samples extracted from unlabeled text.
    pub unlabeled_task: String,
    pub templates_per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub labeled: Vec<InstructionSample>,
    pub unlabeled: Vec<InstructionSample>,
    pub templates: Vec<Template>,
    pub rejected_templates: Vec<Rejected>,
    pub rejected_qa: Vec<Rejected>,
    /// Pairs filled, dropped for missing fields, and their product bound.
    pub fill_produced: usize,
    pub fill_dropped: usize,
    pub fill_pairs: usize,
    pub duplicates_removed: usize,
    pub stats: DatasetStats,
}

impl PipelineOutput {
    /// Labeled then unlabeled samples.
    pub fn samples(&self) -> Vec<InstructionSample> {
        self.labeled.iter().chain(&self.unlabeled).cloned().collect()
    }
}

/// Templates → filling → extraction → dedup → statistics. Tasks are
/// processed in name order and records/segments in input order, so the
/// output is a pure function of the inputs for a deterministic client.
pub fn run_pipeline<C: AlignedLlmClient + ?Sized>(
    inputs: &PipelineInputs,
    client: &C,
    params: &GenerationParams,
    retry: &RetryPolicy,
    catalog: &TaskCatalog,
) -> Result<PipelineOutput> {
    let mut labeled = Vec::new();
    let mut templates = Vec::new();
    let mut rejected_templates = Vec::new();
    let (mut produced, mut dropped, mut pairs) = (0, 0, 0);
    let tasks: BTreeSet<&str> = inputs.records.iter().map(|r| r.task.as_str()).collect();
    for task in tasks {
        let seeds = inputs
            .seed_templates
            .get(task)
            .ok_or_else(|| Error::data(format!("no seed templates for task {task}")))?;
        let records: Vec<LabeledRecord> = inputs.records.iter().filter(|r| r.task == task).cloned().collect();
        let fields: BTreeSet<String> = records.iter().flat_map(|r| r.fields.keys().cloned()).collect();
        let out = generate_templates(task, seeds, &fields, client, inputs.templates_per_task, params, retry)?;
        let fill = fill_templates(&out.templates, &records)?;
        produced += fill.samples.len();
        dropped += fill.dropped.len();
        pairs += out.templates.len() * records.len();
        labeled.extend(fill.samples);
        templates.extend(out.templates);
        rejected_templates.extend(out.rejected);
    }
    let mut unlabeled = Vec::new();
    let mut rejected_qa = Vec::new();
    for seg in &inputs.segments {
        let out = extract_qa(&inputs.unlabeled_task, seg, &inputs.seed_qa, client, params, retry)?;
        unlabeled.extend(out.samples);
        rejected_qa.extend(out.rejected);
    }
    let before = labeled.len() + unlabeled.len();
    let labeled = dedup(&labeled);
    let unlabeled = dedup(&unlabeled);
    let stats = dataset_stats(&labeled, &unlabeled, catalog);
    Ok(PipelineOutput {
        duplicates_removed: before - labeled.len() - unlabeled.len(),
        labeled,
        unlabeled,
        templates,
        rejected_templates,
        rejected_qa,
        fill_produced: produced,
        fill_dropped: dropped,
        fill_pairs: pairs,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::client::MockClient;

    fn seeds() -> Vec<Template> {
        (0..8)
            .map(|i| Template::new("author", format!("Who wrote {{title}}? ({i})"), "{author}"))
            .collect()
    }

    fn fields() -> BTreeSet<String> {
        ["title".to_string(), "author".to_string()].into()
    }

    #[test]
    fn scripted_templates() {
        let good: Vec<String> = (0..3).map(|i| format!("Q: Poet of {{title}} #{i}?\nA: {{author}}")).collect();
        let c = MockClient::scripted([Ok(good)]);
        let out = generate_templates("author", &seeds(), &fields(), &c, 10, &GenerationParams::default(), &RetryPolicy::default()).unwrap();
        assert_eq!(out.templates.len(), 3);

        let c = MockClient::scripted([Ok(vec![
            "Q: Poet of {title}?\nA: {author}".to_string(),
            "Q: When was {year}?\nA: {author}".to_string(),
        ])]);
        let out = generate_templates("author", &seeds(), &fields(), &c, 10, &GenerationParams::default(), &RetryPolicy::default()).unwrap();
        assert_eq!(out.templates.len(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert!(out.rejected[0].reason.contains("year"));
    }

    #[test]
    fn seed_count_enforced() {
        let c = MockClient::new();
        let r = generate_templates("author", &seeds()[..7], &fields(), &c, 3, &GenerationParams::default(), &RetryPolicy::default());
        assert!(matches!(r, Err(Error::Contract(_))));
        let qa: Vec<InstructionSample> = (0..8).map(|i| InstructionSample::new("qa", format!("q{i}"), "a")).collect();
        assert!(extract_qa("qa", "  ", &qa, &c, &GenerationParams::default(), &RetryPolicy::default()).is_err());
    }

    #[test]
    fn support_check() {
        let seg = "the moon rose over the quiet hill";
        assert!(is_supported("quiet hill", seg));
        assert!(is_supported("the moon rose over the quiet hil!", seg));
        assert!(!is_supported("llih teiuq", seg));
        assert!(!is_supported("", seg));
    }

    #[test]
    fn extraction_rejects_unsupported() {
        let qa: Vec<InstructionSample> = (0..8).map(|i| InstructionSample::new("qa", format!("q{i}"), "a")).collect();
        let seg = "The moon rose over the hill. Snow fell on the pines.";
        let out = extract_qa("qa", seg, &qa, &MockClient::new(), &GenerationParams::default(), &RetryPolicy::default()).unwrap();
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.rejected.len(), 1);
        assert!(out.samples.iter().all(|s| is_supported(&s.response, seg)));
    }

    #[test]
    fn dedup_rules() {
        let s = InstructionSample::new("t", "q", "r");
        let t = InstructionSample::new("t", "q2", "r");
        assert_eq!(dedup(&[s.clone(), s.clone(), t.clone()]), vec![s.clone(), t.clone()]);
        let padded = InstructionSample::new("t", "q ", "r\n");
        assert_eq!(dedup(&[s.clone(), padded]), vec![s.clone()]);
        let once = dedup(&[t.clone(), s.clone()]);
        assert_eq!(dedup(&once), once);
    }

    #[test]
    fn stats_arithmetic() {
        let xs: Vec<InstructionSample> = [2, 4, 6]
            .iter()
            .map(|&n| InstructionSample::new("punctuation", "x".repeat(n), "y"))
            .collect();
        let st = dataset_stats(&xs, &[], &TaskCatalog::default());
        assert_eq!(st.avg_instruction_length, 4.0);
        assert_eq!(st.labeled_data_efficient, 3);
        let empty = dataset_stats(&[], &[], &TaskCatalog::default());
        assert_eq!((empty.total, empty.avg_output_length), (0, 0.0));
        assert_eq!(thousands(4020136), "4,020,136");
    }
}
