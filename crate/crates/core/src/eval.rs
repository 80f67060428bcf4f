//! Datasets, Hits@1 scoring and batch evaluation.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run, AgentConfig, HaltReason, Providers};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::reflection::ReflectionStrategy;

/// One evaluation question: text, seed entity ids and accepted answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub question: String,
    pub entities: Vec<EntityId>,
    pub answers: Vec<String>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.entities.is_empty() {
            return Err("entities is empty".into());
        }
        if self.answers.is_empty() {
            return Err("answers is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one JSON record per line. Blank lines are skipped.
pub fn load_dataset(reader: impl BufRead) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| DatasetError::Record { line: i + 1, message })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset_file(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = std::fs::File::open(path)?;
    load_dataset(io::BufReader::new(file))
}

pub fn write_dataset(mut w: impl Write, records: &[DatasetRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// Trim, case-fold and collapse internal whitespace before comparing.
    #[default]
    Normalized,
    /// Byte equality.
    Strict,
}

pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// 1 if any predicted answer equals any gold answer under `policy`, else 0.
pub fn score_hit<P, G>(predicted: &[P], gold: &[G], policy: MatchPolicy) -> u8
where
    P: AsRef<str>,
    G: AsRef<str>,
{
    let hit = match policy {
        MatchPolicy::Strict => predicted
            .iter()
            .any(|p| gold.iter().any(|g| p.as_ref() == g.as_ref())),
        MatchPolicy::Normalized => {
            let gold: Vec<String> = gold.iter().map(|g| normalize_answer(g.as_ref())).collect();
            predicted
                .iter()
                .map(|p| normalize_answer(p.as_ref()))
                .any(|p| gold.contains(&p))
        }
    };
    u8::from(hit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub index: usize,
    pub question: String,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub hit: bool,
    pub halted_by: Option<HaltReason>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub total_ms: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    /// Nearest-rank percentiles over per-question times.
    pub fn from_samples(samples: &[f64], total_ms: f64) -> Self {
        if samples.is_empty() {
            return Self {
                total_ms,
                ..Self::default()
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |p: f64| {
            let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
            sorted[rank.min(sorted.len()) - 1]
        };
        Self {
            total_ms,
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: pct(50.0),
            p90_ms: pct(90.0),
            p99_ms: pct(99.0),
            max_ms: *sorted.last().expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub hits: usize,
    /// `hits / total`, or 0 for an empty dataset.
    pub accuracy: f64,
    /// Set when the dataset had no records, so `accuracy` is meaningless.
    pub empty: bool,
    pub errors: usize,
    pub strategy: ReflectionStrategy,
    pub match_policy: MatchPolicy,
    pub outcomes: Vec<QuestionOutcome>,
    pub timing: TimingStats,
}

impl EvalReport {
    pub fn from_outcomes(
        mut outcomes: Vec<QuestionOutcome>,
        strategy: ReflectionStrategy,
        match_policy: MatchPolicy,
        total_ms: f64,
    ) -> Self {
        outcomes.sort_by_key(|o| o.index);
        let total = outcomes.len();
        let hits = outcomes.iter().filter(|o| o.hit).count();
        let errors = outcomes.iter().filter(|o| o.error.is_some()).count();
        let samples: Vec<f64> = outcomes.iter().map(|o| o.elapsed_ms).collect();
        Self {
            total,
            hits,
            accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            empty: total == 0,
            errors,
            strategy,
            match_policy,
            timing: TimingStats::from_samples(&samples, total_ms),
            outcomes,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub workers: usize,
    pub match_policy: MatchPolicy,
    /// Receives `traces/NNNNN.json` and `report.json` when set.
    pub out_dir: Option<PathBuf>,
}

pub fn trace_path(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join("traces").join(format!("{index:05}.json"))
}

fn evaluate_one(
    index: usize,
    record: &DatasetRecord,
    kg: &KnowledgeGraph,
    providers: &Providers,
    config: &AgentConfig,
    options: &EvalOptions,
) -> io::Result<QuestionOutcome> {
    let started = Instant::now();
    let result = run(&record.question, &record.entities, kg, providers, config);
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    let (predicted, halted_by, error, trace) = match result {
        Ok(r) => (r.answers, Some(r.halted_by), None, r.trace),
        Err(f) => {
            tracing::warn!(index, error = %f.error, "question failed");
            (Vec::new(), None, Some(f.error.to_string()), *f.trace)
        }
    };
    if let Some(dir) = &options.out_dir {
        trace.save(trace_path(dir, index))?;
    }
    Ok(QuestionOutcome {
        index,
        question: record.question.clone(),
        hit: error.is_none() && score_hit(&predicted, &record.answers, options.match_policy) == 1,
        gold: record.answers.clone(),
        predicted,
        halted_by,
        iterations: trace.iterations.len(),
        error,
        elapsed_ms,
    })
}

/// Runs the agent over every record on `options.workers` threads. Failed
/// questions count as misses; only I/O errors writing results abort.
pub fn run_eval(
    dataset: &[DatasetRecord],
    kg: &KnowledgeGraph,
    providers: &Providers,
    config: &AgentConfig,
    options: &EvalOptions,
) -> io::Result<EvalReport> {
    let started = Instant::now();
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir.join("traces"))?;
    }
    let workers = options.workers.clamp(1, dataset.len().max(1));
    let next = AtomicUsize::new(0);
    let outcomes = Mutex::new(Vec::with_capacity(dataset.len()));
    let failure: Mutex<Option<io::Error>> = Mutex::new(None);

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= dataset.len() || failure.lock().expect("lock").is_some() {
                    break;
                }
                match evaluate_one(i, &dataset[i], kg, providers, config, options) {
                    Ok(o) => outcomes.lock().expect("lock").push(o),
                    Err(e) => {
                        failure.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }

    let report = EvalReport::from_outcomes(
        outcomes.into_inner().expect("lock"),
        config.reflection.strategy,
        options.match_policy,
        started.elapsed().as_secs_f64() * 1e3,
    );
    if let Some(dir) = &options.out_dir {
        report.save(dir.join("report.json"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stream() {
        assert!(load_dataset(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn one_record() {
        let text = r#"{"question":"capital of Tokyo?","entities":["Q1490"],"answers":["Shinjuku"]}"#;
        let d = load_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].entities[0].as_str(), "Q1490");
        assert_eq!(d[0].answers, vec!["Shinjuku"]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"question\":\"a\",\"entities\":[\"Q1\"],\"answers\":[\"x\"]}\n\n{\"question\":\"b\",\"entities\":[\"Q1\"],\"answers\":[]}\n";
        match load_dataset(text.as_bytes()) {
            Err(DatasetError::Record { line: 3, message }) => assert!(message.contains("answers")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_dataset(&b"not json"[..]), Err(DatasetError::Record { line: 1, .. })));
    }

    #[test]
    fn scoring() {
        let n = MatchPolicy::Normalized;
        assert_eq!(score_hit(&["Shinjuku"], &["Shinjuku"], n), 1);
        assert_eq!(score_hit::<&str, _>(&[], &["Yukon"], n), 0);
        assert_eq!(score_hit(&["  YUKON "], &["Yukon"], n), 1);
        assert_eq!(score_hit(&["  YUKON "], &["Yukon"], MatchPolicy::Strict), 0);
        assert_eq!(score_hit(&["Canada", "Yukon"], &["Yukon"], n), 1);
        assert_eq!(score_hit(&["New   york"], &["new york"], n), 1);
    }

    #[test]
    fn empty_report_is_flagged() {
        let r = EvalReport::from_outcomes(vec![], ReflectionStrategy::Oda, MatchPolicy::Normalized, 0.0);
        assert!(r.empty);
        assert_eq!(r.total, 0);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn percentiles() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = TimingStats::from_samples(&samples, 5.0);
        assert_eq!((t.p50_ms, t.p90_ms, t.p99_ms, t.max_ms), (50.0, 90.0, 99.0, 100.0));
        assert_eq!(t.mean_ms, 50.5);
    }
}
