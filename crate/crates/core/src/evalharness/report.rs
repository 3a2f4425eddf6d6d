use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{EvalError, EvalReport};
use crate::policy::TranscriptRecord;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EvalError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io(path))
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_transcripts(path: &Path, records: &[TranscriptRecord]) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io(path))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| EvalError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writeln!(f, "{line}").map_err(io(path))?;
    }
    f.flush().map_err(io(path))
}

/// One CSV row per report; cutoff columns follow the first report's Ks.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let ks: Vec<usize> = reports.first().map(|r| r.metrics.iter().map(|m| m.k).collect()).unwrap_or_default();
    let mut out = String::from("label,mode,n,examples");
    for k in &ks {
        let _ = write!(out, ",recall@{k},ndcg@{k}");
    }
    out.push_str(",invalid_rate,mean_reward,reasoning_len_mean,reasoning_len_median\n");
    for r in reports {
        let _ = write!(out, "{},{},{},{}", r.label, r.mode, r.n.map(|n| n.to_string()).unwrap_or_default(), r.examples);
        for &k in &ks {
            let _ = write!(out, ",{},{}", r.recall(k).unwrap_or(f64::NAN), r.ndcg(k).unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, ",{},{},{},{}", r.invalid_rate, r.mean_reward, r.reasoning_len_mean, r.reasoning_len_median);
    }
    out
}
