//! On-disk forms of a [`TrainingRun`]:
//!
//! * CSV with header `step,tokens,loss` plus a JSON sidecar
//!   `{model_size, batch_size, meta}` next to it (`<name>.csv` + `<name>.json`);
//! * JSONL: the metadata object on the first line, then one
//!   `{step, tokens, loss}` record per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{RunRecord, TrainingRun};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model_size: f64,
    pub batch_size: f64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn to_csv_string(run: &TrainingRun) -> String {
    let mut out = String::from("step,tokens,loss\n");
    for r in &run.records {
        out.push_str(&format!("{},{},{}\n", r.step, r.tokens, r.loss));
    }
    out
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { source_name: source.to_string(), line, message: message.into() }
}

fn check_order(source: &str, line: usize, prev: Option<&RunRecord>, r: &RunRecord) -> Result<()> {
    if !(r.loss.is_finite() && r.loss > 0.0) {
        return Err(parse_err(source, line, format!("loss {} must be finite and positive", r.loss)));
    }
    if let Some(p) = prev {
        if r.step <= p.step {
            return Err(parse_err(source, line, format!("step {} does not increase (previous {})", r.step, p.step)));
        }
        if !(r.tokens > p.tokens) {
            return Err(parse_err(
                source,
                line,
                format!("tokens {} do not increase (previous {})", r.tokens, p.tokens),
            ));
        }
    }
    Ok(())
}

/// Parses CSV records; line numbers in errors are 1-based file lines.
pub fn parse_csv(source: &str, text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(source, 1, e.to_string()))?.clone();
    let expected = ["step", "tokens", "loss"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(parse_err(source, 1, format!("expected header step,tokens,loss, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut records: Vec<RunRecord> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(source, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("");
        let step: u64 = field(0).parse().map_err(|_| parse_err(source, line, format!("bad step {:?}", field(0))))?;
        let tokens: f64 = field(1).parse().map_err(|_| parse_err(source, line, format!("bad tokens {:?}", field(1))))?;
        let loss: f64 = field(2).parse().map_err(|_| parse_err(source, line, format!("bad loss {:?}", field(2))))?;
        let r = RunRecord { step, tokens, loss };
        check_order(source, line, records.last(), &r)?;
        records.push(r);
    }
    Ok(records)
}

pub fn write_csv(run: &TrainingRun, csv_path: &Path) -> Result<()> {
    write_file(csv_path, to_csv_string(run).as_bytes())?;
    let meta = RunMeta { model_size: run.model_size, batch_size: run.batch_size, meta: run.meta.clone() };
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    write_file(&sidecar_path(csv_path), json.as_bytes())
}

pub fn read_csv(csv_path: &Path) -> Result<TrainingRun> {
    let source = csv_path.display().to_string();
    let text = fs::read_to_string(csv_path).map_err(|e| Error::io(&source, e))?;
    let records = parse_csv(&source, &text)?;
    let side = sidecar_path(csv_path);
    let side_text = fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
    let meta: RunMeta = serde_json::from_str(&side_text)
        .map_err(|e| parse_err(&side.display().to_string(), e.line(), e.to_string()))?;
    finish(&source, meta, records)
}

fn finish(source: &str, meta: RunMeta, records: Vec<RunRecord>) -> Result<TrainingRun> {
    let run = TrainingRun { model_size: meta.model_size, batch_size: meta.batch_size, records, meta: meta.meta };
    run.validate().map_err(|e| parse_err(source, 0, e.to_string()))?;
    Ok(run)
}

pub fn to_jsonl_string(run: &TrainingRun) -> Result<String> {
    let meta = RunMeta { model_size: run.model_size, batch_size: run.batch_size, meta: run.meta.clone() };
    let mut out = serde_json::to_string(&meta)?;
    out.push('\n');
    for r in &run.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(source: &str, text: &str) -> Result<TrainingRun> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_err(source, 1, "empty file"))?;
    let meta: RunMeta = serde_json::from_str(first).map_err(|e| parse_err(source, 1, e.to_string()))?;
    let mut records: Vec<RunRecord> = Vec::new();
    for (i, line) in lines {
        let r: RunRecord = serde_json::from_str(line).map_err(|e| parse_err(source, i + 1, e.to_string()))?;
        check_order(source, i + 1, records.last(), &r)?;
        records.push(r);
    }
    finish(source, meta, records)
}

pub fn write_jsonl(run: &TrainingRun, path: &Path) -> Result<()> {
    write_file(path, to_jsonl_string(run)?.as_bytes())
}

pub fn read_jsonl(path: &Path) -> Result<TrainingRun> {
    let source = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&source, e))?;
    parse_jsonl(&source, &text)
}

/// Reads either form, chosen by file extension.
pub fn read_run(path: &Path) -> Result<TrainingRun> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => read_jsonl(path),
        Some("csv") => read_csv(path),
        _ => Err(Error::InvalidConfig(format!("{}: run files must be .csv or .jsonl", path.display()))),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrainingRun {
        let mut meta = BTreeMap::new();
        meta.insert("id".into(), "demo".into());
        TrainingRun {
            model_size: 1e9,
            batch_size: 4.0,
            records: (1..=5)
                .map(|s| RunRecord { step: s, tokens: 4.0 * s as f64, loss: 3.0 + 1.0 / s as f64 })
                .collect(),
            meta,
        }
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = sample();
        let csv_path = dir.path().join("run.csv");
        write_csv(&run, &csv_path).unwrap();
        assert_eq!(read_run(&csv_path).unwrap(), run);
        let jl = dir.path().join("run.jsonl");
        write_jsonl(&run, &jl).unwrap();
        assert_eq!(read_run(&jl).unwrap(), run);
    }

    #[test]
    fn csv_non_monotone_tokens_names_line() {
        let text = "step,tokens,loss\n1,4,3.5\n2,8,3.4\n3,6,3.3\n";
        match parse_csv("x.csv", text).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("tokens"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_bad_header_and_number() {
        assert!(matches!(parse_csv("x", "a,b,c\n1,2,3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_csv("x", "step,tokens,loss\n1,2,abc\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn jsonl_bad_record_names_line() {
        let mut text = to_jsonl_string(&sample()).unwrap();
        text.push_str("{\"step\": 9, \"tokens\": 1.0, \"loss\": 3.0}\n");
        match parse_jsonl("x.jsonl", &text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }
}
