use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{Direction, Metric, MetricResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Tasks as rows, one column per model, split into accuracy-scored
    /// knowledge tasks and the rest.
    Table4,
    /// One row per training method, one column per task.
    Table5,
    /// One row per group count `N`, one column per task.
    Table6,
    /// One line per result.
    Plain,
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "table4" => Ok(Layout::Table4),
            "table5" => Ok(Layout::Table5),
            "table6" => Ok(Layout::Table6),
            "plain" => Ok(Layout::Plain),
            _ => Err(format!("unknown layout {s:?} (expected table4, table5, table6 or plain)")),
        }
    }
}

/// A result tagged with the row it belongs to (method, `N`, or model name).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub row: String,
    pub result: MetricResult,
}

impl ReportEntry {
    pub fn new(row: impl Into<String>, result: MetricResult) -> Self {
        Self {
            row: row.into(),
            result,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub layout: Layout,
    pub markdown: String,
    pub csv: String,
}

impl Report {
    /// Writes `<stem>.md` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join(format!("{stem}.md"));
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&md, &self.markdown).map_err(|e| Error::io(&md, e))?;
        std::fs::write(&csv, &self.csv).map_err(|e| Error::io(&csv, e))?;
        Ok((md, csv))
    }
}

fn arrow(d: Direction) -> &'static str {
    match d {
        Direction::HigherBetter => "↑",
        Direction::LowerBetter => "↓",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn md_line(fields: &[String]) -> String {
    format!("| {} |\n", fields.join(" | "))
}

fn md_rule(n: usize) -> String {
    let mut s = String::from("|---");
    for _ in 1..n {
        s.push_str("|---:");
    }
    s.push_str("|\n");
    s
}

fn first_appearance<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for i in items {
        if !out.iter().any(|o| o == i) {
            out.push(i.to_string());
        }
    }
    out
}

/// Cell lookup keyed by (row, task), rejecting duplicates and tasks that
/// mix metrics.
fn index_cells(entries: &[ReportEntry]) -> Result<(BTreeMap<(String, String), &MetricResult>, BTreeMap<String, Metric>)> {
    let mut cells = BTreeMap::new();
    let mut metrics: BTreeMap<String, Metric> = BTreeMap::new();
    for e in entries {
        let t = &e.result.task;
        if let Some(m) = metrics.insert(t.clone(), e.result.metric) {
            if m != e.result.metric {
                return Err(Error::data(format!("task {t} reported with both {m} and {}", e.result.metric)));
            }
        }
        if cells.insert((e.row.clone(), t.clone()), &e.result).is_some() {
            return Err(Error::data(format!("duplicate cell {}/{t}", e.row)));
        }
    }
    Ok((cells, metrics))
}

fn missing_error(missing: Vec<String>) -> Result<()> {
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!("missing cells: {}", missing.join(", "))))
    }
}

/// Renders `entries` in `layout`. Output depends only on the entries, so
/// identical inputs give byte-identical files.
pub fn emit_report(entries: &[ReportEntry], layout: Layout) -> Result<Report> {
    let (markdown, csv) = match layout {
        Layout::Plain => plain(entries),
        Layout::Table5 => row_major(entries, "Method", false)?,
        Layout::Table6 => row_major(entries, "N", true)?,
        Layout::Table4 => task_major(entries)?,
    };
    Ok(Report {
        layout,
        markdown,
        csv,
    })
}

fn plain(entries: &[ReportEntry]) -> (String, String) {
    let header: Vec<String> = ["row", "task", "metric", "value", "count", "direction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut md = md_line(&header) + &md_rule(header.len());
    let mut csv = csv_line(&header);
    for e in entries {
        let r = &e.result;
        let dir = match r.direction {
            Direction::HigherBetter => "higher-better",
            Direction::LowerBetter => "lower-better",
        };
        md.push_str(&md_line(&[
            e.row.clone(),
            r.task.clone(),
            r.metric.to_string(),
            r.display_value(),
            r.count.to_string(),
            dir.into(),
        ]));
        csv.push_str(&csv_line(&[
            e.row.clone(),
            r.task.clone(),
            r.metric.to_string(),
            r.value.to_string(),
            r.count.to_string(),
            dir.into(),
        ]));
    }
    (md, csv)
}

fn row_major(entries: &[ReportEntry], row_title: &str, numeric_rows: bool) -> Result<(String, String)> {
    if entries.is_empty() {
        return Err(Error::data("table layout needs at least one result"));
    }
    let (cells, metrics) = index_cells(entries)?;
    let mut rows = first_appearance(entries.iter().map(|e| e.row.as_str()));
    if numeric_rows {
        let mut keyed = Vec::new();
        for r in rows {
            let n: usize = r
                .parse()
                .map_err(|_| Error::data(format!("row label {r:?} is not a group count")))?;
            keyed.push((n, r));
        }
        keyed.sort();
        rows = keyed.into_iter().map(|(_, r)| r).collect();
    }
    let tasks = first_appearance(entries.iter().map(|e| e.result.task.as_str()));

    let mut missing = Vec::new();
    for r in &rows {
        for t in &tasks {
            if !cells.contains_key(&(r.clone(), t.clone())) {
                missing.push(format!("{r}/{t}"));
            }
        }
    }
    missing_error(missing)?;

    let directions: Vec<Direction> = tasks.iter().map(|t| metrics[t].direction()).collect();
    let avg_dir = (tasks.len() > 1 && directions.iter().all(|d| *d == directions[0])).then(|| directions[0]);

    let mut md_header = vec![row_title.to_string()];
    let mut csv_header = vec![row_title.to_string()];
    for t in &tasks {
        let m = metrics[t];
        md_header.push(format!("{t} ({} {})", m.label(), arrow(m.direction())));
        csv_header.push(format!("{t} ({})", m.label()));
    }
    if let Some(d) = avg_dir {
        md_header.push(format!("Avg. {}", arrow(d)));
        csv_header.push("Avg.".into());
    }
    let mut md = md_line(&md_header) + &md_rule(md_header.len());
    let mut csv = csv_line(&csv_header);
    for r in &rows {
        let mut line = vec![r.clone()];
        let mut shown = Vec::new();
        for t in &tasks {
            let res = cells[&(r.clone(), t.clone())];
            let s = res.display_value();
            shown.push(s.parse::<f64>().expect("formatted number"));
            line.push(s);
        }
        if avg_dir.is_some() {
            line.push(format!("{:.2}", shown.iter().sum::<f64>() / shown.len() as f64));
        }
        md.push_str(&md_line(&line));
        csv.push_str(&csv_line(&line));
    }
    Ok((md, csv))
}

fn task_major(entries: &[ReportEntry]) -> Result<(String, String)> {
    if entries.is_empty() {
        return Err(Error::data("table layout needs at least one result"));
    }
    let (cells, metrics) = index_cells(entries)?;
    let models = first_appearance(entries.iter().map(|e| e.row.as_str()));
    let tasks = first_appearance(entries.iter().map(|e| e.result.task.as_str()));

    let mut missing = Vec::new();
    for t in &tasks {
        for m in &models {
            if !cells.contains_key(&(m.clone(), t.clone())) {
                missing.push(format!("{m}/{t}"));
            }
        }
    }
    missing_error(missing)?;

    let (knowledge, other): (Vec<&String>, Vec<&String>) =
        tasks.iter().partition(|t| metrics[*t] == Metric::Accuracy);

    let mut header = vec!["Task".to_string()];
    header.extend(models.iter().cloned());
    let mut md = md_line(&header) + &md_rule(header.len());
    let mut csv_header = vec!["Section".to_string(), "Task".to_string(), "Metric".to_string()];
    csv_header.extend(models.iter().cloned());
    let mut csv = csv_line(&csv_header);

    for (title, section) in [("Knowledge-intensive Tasks", knowledge), ("Non-knowledge-intensive Tasks", other)] {
        if section.is_empty() {
            continue;
        }
        let section_metrics: Vec<Metric> = section.iter().map(|t| metrics[*t]).collect();
        let uniform = section_metrics.iter().all(|m| *m == section_metrics[0]);
        let mut sub = vec![format!("*{title}*")];
        for _ in &models {
            sub.push(if uniform {
                format!("{} {}", section_metrics[0].label(), arrow(section_metrics[0].direction()))
            } else {
                String::new()
            });
        }
        md.push_str(&md_line(&sub));
        for t in section {
            let m = metrics[t];
            let name = if uniform { t.clone() } else { format!("{t} ({} {})", m.label(), arrow(m.direction())) };
            let mut line = vec![name];
            let mut cline = vec![title.to_string(), t.clone(), m.to_string()];
            for model in &models {
                let v = cells[&(model.clone(), t.clone())].display_value();
                line.push(v.clone());
                cline.push(v);
            }
            md.push_str(&md_line(&line));
            csv.push_str(&csv_line(&cline));
        }
    }
    Ok((md, csv))
}

/// Appends a free-text note under a rendered Markdown table.
pub fn with_note(markdown: &str, note: &str) -> String {
    let mut s = markdown.to_string();
    let _ = write!(s, "\n{note}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(row: &str, task: &str, metric: Metric, v: f64) -> ReportEntry {
        ReportEntry::new(row, MetricResult::new(task, metric, v, 10).unwrap())
    }

    #[test]
    fn table6_orders_rows_numerically() {
        let mut es = Vec::new();
        for n in ["16", "4", "8"] {
            es.push(entry(n, "cipher", Metric::Ppl, 3.0));
            es.push(entry(n, "punct", Metric::Ppl, 2.0));
        }
        let r = emit_report(&es, Layout::Table6).unwrap();
        let rows: Vec<&str> = r.markdown.lines().skip(2).map(|l| l.split(" | ").next().unwrap()).collect();
        assert_eq!(rows, vec!["| 4", "| 8", "| 16"]);
        assert!(r.markdown.contains("Avg. ↓"));
        assert_eq!(r.csv.lines().count(), 4);
    }

    #[test]
    fn missing_cells_are_listed() {
        let es = vec![
            entry("FT", "a", Metric::Ppl, 2.0),
            entry("FT", "b", Metric::Ppl, 2.0),
            entry("RAT", "a", Metric::Ppl, 2.0),
        ];
        match emit_report(&es, Layout::Table5) {
            Err(Error::Data(msg)) => assert!(msg.contains("RAT/b"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plain_empty_is_header_only() {
        let r = emit_report(&[], Layout::Plain).unwrap();
        assert_eq!(r.csv, "row,task,metric,value,count,direction\n");
        assert_eq!(r.markdown.lines().count(), 2);
    }

    #[test]
    fn table4_sections() {
        let es = vec![
            entry("base", "source", Metric::Accuracy, 0.0),
            entry("tuned", "source", Metric::Accuracy, 96.666_666_666_7),
            entry("base", "punct", Metric::Ppl, 5.09),
            entry("tuned", "punct", Metric::Ppl, 3.63),
        ];
        let r = emit_report(&es, Layout::Table4).unwrap();
        assert!(r.markdown.contains("| *Knowledge-intensive Tasks* | ACC ↑ | ACC ↑ |"));
        assert!(r.markdown.contains("| source | 0.00 | 96.67 |"));
        assert!(r.markdown.contains("| punct | 5.09 | 3.63 |"));
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
