//! Tables and plot-ready CSVs assembled from a finished run. Output depends
//! only on the files read, so rerunning is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sidrec::dataio::read_jsonl;
use sidrec::evalharness::{reports_csv, BestOfN, EvalReport};
use sidrec::grpo::StepMetrics;

use crate::pipeline::{read_json, EvalSummary, RewardComparison, BESTOFN, EVAL_SUMMARY, RL_METRICS};
use crate::{rt, CliError};

pub const REPORT_JSON: &str = "report/report.json";
pub const REWARD_CSV: &str = "report/reward_vs_step.csv";
pub const LENGTH_CSV: &str = "report/length_vs_step.csv";
pub const METRIC_VS_N_CSV: &str = "report/metric_vs_n.csv";
pub const EVAL_CSV: &str = "report/eval.csv";

#[derive(Serialize)]
struct Report<'a> {
    /// Popularity first, then every checkpoint × mode.
    ranking: Vec<&'a EvalReport>,
    rewards: &'a RewardComparison,
    rl_steps: usize,
    rl_final: Option<&'a StepMetrics>,
    bestofn: Option<&'a [EvalReport]>,
}

fn write(dir: &Path, rel: &str, text: &str) -> Result<(), CliError> {
    let p = dir.join(rel);
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).map_err(|e| CliError::Runtime(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(&p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn step_csv(metrics: &[StepMetrics], header: &str, row: impl Fn(&StepMetrics) -> String) -> String {
    let mut s = format!("{header}\n");
    for m in metrics {
        let _ = writeln!(s, "{}", row(m));
    }
    s
}

/// `n,k,recall,ndcg` rows, one per best-of-N setting and cutoff.
fn metric_vs_n(reports: &[EvalReport]) -> String {
    let mut s = String::from("n,k,recall,ndcg,mean_reward\n");
    for r in reports {
        for m in &r.metrics {
            let _ = writeln!(s, "{},{},{},{},{}", r.n.unwrap_or(1), m.k, m.recall, m.ndcg, r.mean_reward);
        }
    }
    s
}

/// Writes everything under `report/` and returns the files written.
pub fn write_report(dir: &Path) -> Result<Vec<String>, CliError> {
    let summary_path = dir.join(EVAL_SUMMARY);
    if !summary_path.exists() {
        return Err(CliError::Validation(format!(
            "{} not found; run `sidrec evaluate` (and optionally `sidrec bestofn`) before `sidrec report`",
            summary_path.display()
        )));
    }
    let summary: EvalSummary = read_json(&summary_path)?;
    let metrics: Vec<StepMetrics> = if dir.join(RL_METRICS).exists() {
        read_jsonl(&dir.join(RL_METRICS)).map_err(rt)?
    } else {
        Vec::new()
    };
    let bon: Option<BestOfN> = if dir.join(BESTOFN).exists() { Some(read_json(&dir.join(BESTOFN))?) } else { None };

    let ranking: Vec<&EvalReport> = std::iter::once(&summary.popularity).chain(&summary.reports).collect();
    let report = Report {
        ranking: ranking.clone(),
        rewards: &summary.rewards,
        rl_steps: metrics.len(),
        rl_final: metrics.last(),
        bestofn: bon.as_ref().map(|b| b.reports.as_slice()),
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(rt)?;
    json.push('\n');
    let mut out = vec![REPORT_JSON.to_string(), REWARD_CSV.into(), LENGTH_CSV.into(), EVAL_CSV.into()];
    write(dir, REPORT_JSON, &json)?;
    write(
        dir,
        REWARD_CSV,
        &step_csv(&metrics, "step,mean_reward,mean_r_sr,invalid_rate,mean_reasoning_len,kl", |m| {
            format!("{},{},{},{},{},{}", m.step, m.mean_reward, m.mean_r_sr, m.invalid_rate, m.mean_reasoning_len, m.kl)
        }),
    )?;
    write(
        dir,
        LENGTH_CSV,
        &step_csv(&metrics, "step,mean_reasoning_len", |m| format!("{},{}", m.step, m.mean_reasoning_len)),
    )?;
    let all: Vec<EvalReport> = ranking.into_iter().cloned().collect();
    write(dir, EVAL_CSV, &reports_csv(&all))?;
    if let Some(b) = &bon {
        write(dir, METRIC_VS_N_CSV, &metric_vs_n(&b.reports))?;
        out.push(METRIC_VS_N_CSV.into());
    }
    Ok(out)
}
