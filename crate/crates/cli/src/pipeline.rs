//! Pipeline stages. Each reads its prerequisites from the run directory,
//! writes its outputs there and records their hashes in the manifest.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sidrec::corpusgen::{build_mixture, build_sources, sequence_prompt, AlignmentExample, Enricher, TeacherClient};
use sidrec::dataio::{
    build_split_sequences, k_core_filter, load_catalog, load_interactions, read_jsonl, synth_dataset, write_catalog, write_interactions,
    write_jsonl, Item, SplitDataset, SplitStats,
};
use sidrec::evalharness::{
    best_of_n, eval_examples, evaluate_ranking, popularity_baseline, reports_csv, write_transcripts, EvalExample, EvalReport, ReasoningMode,
};
use sidrec::grpo::{evaluate_rewards, rl_examples, rl_init, rl_train, RewardSummary, RlState, StepMetrics};
use sidrec::policy::{build_vocab, load_policy, save_policy, train_sft, DecodeOptions, Policy, SftEpoch, SftStage, SidProbe};
use sidrec::quantizer::{assign_sids, embed_items, load_sid_map, save_quantizer, train_rqvae, write_sid_map, SidAssignment};
use sidrec::sidspace::{build_trie, SidTrie};
use tracing::info;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{rt, CliError};

pub const CATALOG: &str = "data/catalog.jsonl";
pub const INTERACTIONS: &str = "data/interactions.jsonl";
pub const SPLIT: &str = "data/split.json";
pub const DATA_STATS: &str = "data/stats.json";
pub const QUANTIZER: &str = "quantizer/quantizer.ckpt";
pub const SID_MAP: &str = "quantizer/sid_map.jsonl";
pub const QUANTIZER_REPORT: &str = "quantizer/report.json";
pub const CORPUS: &str = "corpus/alignment.jsonl";
pub const COLDSTART: &str = "corpus/coldstart.jsonl";
pub const CORPUS_STATS: &str = "corpus/stats.json";
pub const ALIGNED: &str = "policy/aligned.ckpt";
pub const ALIGN_LOG: &str = "policy/align_log.json";
pub const ACTIVATED: &str = "policy/activated.ckpt";
pub const ACTIVATE_LOG: &str = "policy/activate_log.json";
pub const RL_POLICY: &str = "policy/rl.ckpt";
pub const RL_METRICS: &str = "rl/metrics.jsonl";
pub const RL_CHECKPOINTS: &str = "rl/checkpoints";
pub const EVAL_SUMMARY: &str = "eval/summary.json";
pub const BESTOFN: &str = "eval/bestofn.json";
pub const BESTOFN_CSV: &str = "eval/bestofn.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Quantize,
    BuildCorpus,
    Align,
    Activate,
    RlTrain,
    Evaluate,
    BestOfN,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 9] = [
        Stage::Synth,
        Stage::Quantize,
        Stage::BuildCorpus,
        Stage::Align,
        Stage::Activate,
        Stage::RlTrain,
        Stage::Evaluate,
        Stage::BestOfN,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Quantize => "quantize",
            Stage::BuildCorpus => "build-corpus",
            Stage::Align => "align",
            Stage::Activate => "activate",
            Stage::RlTrain => "rl-train",
            Stage::Evaluate => "evaluate",
            Stage::BestOfN => "bestofn",
            Stage::Report => "report",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Synth => &[],
            Quantize => &[Synth],
            BuildCorpus => &[Synth, Quantize],
            Align => &[Synth, Quantize, BuildCorpus],
            Activate => &[BuildCorpus, Align],
            RlTrain => &[Synth, Quantize, Activate],
            Evaluate => &[Synth, Quantize, Align, Activate, RlTrain],
            BestOfN => &[Synth, Quantize, RlTrain],
            Report => &[],
        }
    }

    /// Config sections that determine the stage's outputs.
    pub fn sections(self) -> &'static [&'static str] {
        use Stage::*;
        match self {
            Synth => &["dataset"],
            Quantize => &["quantizer"],
            BuildCorpus => &["corpus"],
            Align => &["policy.model", "policy.align", "policy.probes"],
            Activate => &["policy.activate"],
            RlTrain => &["rl"],
            Evaluate => &["eval", "rl.lambda", "rl.max_reasoning_tokens", "rl.constrained"],
            BestOfN => &["eval", "rl.lambda"],
            Report => &[],
        }
    }
}

pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| CliError::Runtime(format!("{}: {e}", d.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(rt)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn mkdirs(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct DataStats {
    items: usize,
    interactions: usize,
    split: SplitStats,
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct SftLog {
    epochs: Vec<SftEpoch>,
    total_steps: usize,
    best_epoch: usize,
    parameters: usize,
    vocab: usize,
}

/// Held-out mean reward before and after RL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardComparison {
    pub activated: RewardSummary,
    pub rl: RewardSummary,
    /// `(rl − activated) / activated`; absent when the activated reward is 0.
    pub relative_gain: Option<f64>,
}

/// Everything `evaluate` produced, in one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub popularity: EvalReport,
    pub reports: Vec<EvalReport>,
    pub rewards: RewardComparison,
}

impl Run {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn catalog(&self) -> Result<Vec<Item>, CliError> {
        load_catalog(&self.path(CATALOG)).map_err(rt)
    }

    fn split(&self) -> Result<SplitDataset, CliError> {
        read_json(&self.path(SPLIT))
    }

    fn assignment(&self) -> Result<SidAssignment, CliError> {
        load_sid_map(&self.path(SID_MAP), self.config.quantizer.levels, self.config.quantizer.codebook_size).map_err(rt)
    }

    fn trie(&self, a: &SidAssignment) -> Result<SidTrie, CliError> {
        build_trie(a).map_err(rt)
    }

    fn policy(&self, rel: &str) -> Result<Policy, CliError> {
        Ok(load_policy(&self.path(rel)).map_err(rt)?.0)
    }

    fn test_examples(&self, a: &SidAssignment) -> Result<Vec<EvalExample>, CliError> {
        let mut test = self.split()?.test;
        if self.config.eval.max_examples > 0 {
            test.truncate(self.config.eval.max_examples);
        }
        eval_examples(&test, a).map_err(rt)
    }

    /// Runs one stage after checking its prerequisites, then records it.
    pub fn run_stage(&mut self, stage: Stage, resume: bool) -> Result<(), CliError> {
        for p in stage.prerequisites() {
            let h = self.config.section_hash(p.sections());
            self.manifest.check_fresh(&self.dir, p.name(), &h)?;
        }
        info!(stage = stage.name(), "running");
        let outputs: Vec<String> = match stage {
            Stage::Synth => self.synth()?,
            Stage::Quantize => self.quantize()?,
            Stage::BuildCorpus => self.build_corpus()?,
            Stage::Align => self.align()?,
            Stage::Activate => self.activate()?,
            Stage::RlTrain => self.rl_train(resume)?,
            Stage::Evaluate => self.evaluate()?,
            Stage::BestOfN => self.bestofn()?,
            Stage::Report => crate::report::write_report(&self.dir)?,
        };
        let names: Vec<&str> = stage.prerequisites().iter().map(|s| s.name()).collect();
        let inputs = self.manifest.inputs_of(&names);
        let outs: Vec<PathBuf> = outputs.iter().map(PathBuf::from).collect();
        self.manifest
            .record(&self.dir, stage.name(), self.config.section_hash(stage.sections()), inputs, &outs)?;
        self.manifest.save(&self.dir)
    }

    fn synth(&self) -> Result<Vec<String>, CliError> {
        let d = &self.config.dataset;
        let (mut items, mut rows) = match d.source {
            crate::config::DataSource::Synthetic => synth_dataset(&d.synth).map_err(rt)?,
            crate::config::DataSource::Files => {
                let cat = d.catalog.as_deref().ok_or_else(|| CliError::Validation("dataset.catalog is required".into()))?;
                let int = d.interactions.as_deref().ok_or_else(|| CliError::Validation("dataset.interactions is required".into()))?;
                (load_catalog(cat).map_err(rt)?, load_interactions(int).map_err(rt)?)
            }
        };
        if d.kcore > 0 {
            rows = k_core_filter(&rows, d.kcore);
            let keep: HashSet<&str> = rows.iter().map(|r| r.item_id.as_str()).collect();
            items.retain(|i| keep.contains(i.item_id.as_str()));
        }
        let (split, stats) = build_split_sequences(&rows, d.max_history, d.split).map_err(rt)?;
        if split.train.is_empty() || split.test.is_empty() {
            return Err(CliError::Validation("dataset produced an empty train or test split".into()));
        }
        write_catalog(&self.path(CATALOG), &items).map_err(rt)?;
        write_interactions(&self.path(INTERACTIONS), &rows).map_err(rt)?;
        write_json(&self.path(SPLIT), &split)?;
        write_json(
            &self.path(DATA_STATS),
            &DataStats {
                items: items.len(),
                interactions: rows.len(),
                split: stats,
                train: split.train.len(),
                val: split.val.len(),
                test: split.test.len(),
            },
        )?;
        info!(items = items.len(), train = split.train.len(), test = split.test.len(), "dataset ready");
        Ok(vec![CATALOG.into(), INTERACTIONS.into(), SPLIT.into(), DATA_STATS.into()])
    }

    fn quantize(&self) -> Result<Vec<String>, CliError> {
        let q = &self.config.quantizer;
        let items = self.catalog()?;
        let emb = embed_items(&items, q.embedding_dim, q.seed);
        let (state, report) = train_rqvae(q, &emb).map_err(rt)?;
        let a = assign_sids(&state, &items, &emb).map_err(rt)?;
        mkdirs(&self.path("quantizer"))?;
        save_quantizer(&self.path(QUANTIZER), &state).map_err(rt)?;
        write_sid_map(&self.path(SID_MAP), &a).map_err(rt)?;
        write_json(&self.path(QUANTIZER_REPORT), &report)?;
        info!(
            recon_initial = report.initial.recon,
            recon_final = report.final_losses.recon,
            collided = a.collided_items(),
            "quantizer trained"
        );
        Ok(vec![QUANTIZER.into(), SID_MAP.into(), QUANTIZER_REPORT.into()])
    }

    fn build_corpus(&self) -> Result<Vec<String>, CliError> {
        let c = &self.config.corpus;
        let items = self.catalog()?;
        let split = self.split()?;
        let a = self.assignment()?;
        let enricher = match &c.teacher {
            Some(t) => Enricher::Teacher(TeacherClient::new(t.clone()).map_err(|e| CliError::Validation(e.to_string()))?),
            None => Enricher::Fallback,
        };
        let sources = build_sources(&items, &split.train, &a, &enricher, c.mixture.seed).map_err(rt)?;
        let mixture = build_mixture(&sources.by_tag, &c.mixture).map_err(rt)?;
        write_jsonl(&self.path(CORPUS), &mixture).map_err(rt)?;
        write_jsonl(&self.path(COLDSTART), &sources.coldstart).map_err(rt)?;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in &mixture {
            *counts.entry(ex.task_tag.as_str()).or_default() += 1;
        }
        write_json(&self.path(CORPUS_STATS), &serde_json::json!({ "mixture": counts, "coldstart": sources.coldstart.len() }))?;
        info!(mixture = mixture.len(), coldstart = sources.coldstart.len(), "corpus built");
        Ok(vec![CORPUS.into(), COLDSTART.into(), CORPUS_STATS.into()])
    }

    fn align(&self) -> Result<Vec<String>, CliError> {
        let p = &self.config.policy;
        let corpus: Vec<AlignmentExample> = read_jsonl(&self.path(CORPUS)).map_err(rt)?;
        let coldstart: Vec<AlignmentExample> = read_jsonl(&self.path(COLDSTART)).map_err(rt)?;
        let a = self.assignment()?;
        let trie = self.trie(&a)?;
        let all: Vec<AlignmentExample> = corpus.iter().chain(&coldstart).cloned().collect();
        let vocab = build_vocab(&all, a.vocab(), self.config.corpus.min_word_freq);
        let policy = Policy::init(p.model.clone(), vocab).map_err(rt)?;
        let split = self.split()?;
        let probes = split
            .val
            .iter()
            .take(p.probes)
            .map(|ex| {
                let hist: Vec<String> = ex.history.iter().filter_map(|h| a.render(h)).collect();
                let sid = a.get(&ex.target).ok_or_else(|| CliError::Runtime(format!("item `{}` has no SID", ex.target)))?;
                Ok(SidProbe {
                    context: policy.vocab.encode(&sequence_prompt(&hist)),
                    target: a.vocab().path(sid),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let parameters = policy.num_parameters();
        let out = train_sft(policy, &corpus, SftStage::Alignment, &p.align, &probes, Some(&trie)).map_err(rt)?;
        mkdirs(&self.path("policy"))?;
        save_policy(&self.path(ALIGNED), &out.policy, None).map_err(rt)?;
        write_json(
            &self.path(ALIGN_LOG),
            &SftLog {
                epochs: out.epochs,
                total_steps: out.total_steps,
                best_epoch: out.best_epoch,
                parameters,
                vocab: out.policy.vocab.len(),
            },
        )?;
        Ok(vec![ALIGNED.into(), ALIGN_LOG.into()])
    }

    fn activate(&self) -> Result<Vec<String>, CliError> {
        let coldstart: Vec<AlignmentExample> = read_jsonl(&self.path(COLDSTART)).map_err(rt)?;
        let policy = self.policy(ALIGNED)?;
        let parameters = policy.num_parameters();
        let out = train_sft(policy, &coldstart, SftStage::Activation, &self.config.policy.activate, &[], None).map_err(rt)?;
        save_policy(&self.path(ACTIVATED), &out.policy, None).map_err(rt)?;
        write_json(
            &self.path(ACTIVATE_LOG),
            &SftLog {
                epochs: out.epochs,
                total_steps: out.total_steps,
                best_epoch: out.best_epoch,
                parameters,
                vocab: out.policy.vocab.len(),
            },
        )?;
        Ok(vec![ACTIVATED.into(), ACTIVATE_LOG.into()])
    }

    fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.path(RL_CHECKPOINTS).join(format!("step-{step:05}.ckpt"))
    }

    /// Latest periodic RL checkpoint, if any.
    fn latest_checkpoint(&self) -> Option<(usize, PathBuf)> {
        let entries = std::fs::read_dir(self.path(RL_CHECKPOINTS)).ok()?;
        entries
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().to_string();
                let step = name.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse().ok()?;
                Some((step, e.path()))
            })
            .max_by_key(|(s, _)| *s)
    }

    fn rl_train(&self, resume: bool) -> Result<Vec<String>, CliError> {
        let cfg = &self.config.rl;
        let reference = self.policy(ACTIVATED)?;
        let a = self.assignment()?;
        let trie = self.trie(&a)?;
        let data = rl_examples(&self.split()?.train, &a, &reference.vocab).map_err(rt)?;
        let metrics_path = self.path(RL_METRICS);
        let (state, kept) = match self.latest_checkpoint().filter(|_| resume) {
            Some((step, path)) => {
                let (policy, optimizer) = load_policy(&path).map_err(rt)?;
                let optimizer = optimizer.ok_or_else(|| CliError::Runtime(format!("{} has no optimizer state", path.display())))?;
                let old: Vec<StepMetrics> = read_jsonl(&metrics_path).map_err(rt)?;
                let kept: Vec<StepMetrics> = old.into_iter().filter(|m| m.step <= step).collect();
                if kept.len() != step {
                    return Err(CliError::Validation(format!("{RL_METRICS} is missing rows before step {step}; rerun rl-train without --resume")));
                }
                info!(step, "resuming rl");
                (RlState { policy, optimizer }, kept)
            }
            None => {
                let _ = std::fs::remove_dir_all(self.path("rl"));
                (rl_init(reference.clone(), cfg).map_err(|e| CliError::Validation(e.to_string()))?, Vec::new())
            }
        };
        mkdirs(&self.path(RL_CHECKPOINTS))?;
        write_jsonl(&metrics_path, &kept).map_err(rt)?;
        let mut log = std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", metrics_path.display())))?;
        let every = cfg.checkpoint_every;
        let (state, _) = rl_train(state, &reference, &data, &trie, cfg, |s, m| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(log, "{line}").map_err(|e| sidrec::grpo::GrpoError::InvalidConfig(format!("metrics log: {e}")))?;
            if every > 0 && m.step % every == 0 {
                save_policy(&self.checkpoint_path(m.step), &s.policy, Some(&s.optimizer))?;
            }
            Ok(())
        })
        .map_err(rt)?;
        save_policy(&self.path(RL_POLICY), &state.policy, Some(&state.optimizer)).map_err(rt)?;
        Ok(vec![RL_POLICY.into(), RL_METRICS.into()])
    }

    fn evaluate(&self) -> Result<Vec<String>, CliError> {
        let ec = self.config.eval_config();
        let a = self.assignment()?;
        let trie = self.trie(&a)?;
        let split = self.split()?;
        let examples = self.test_examples(&a)?;
        let mut test = split.test.clone();
        if self.config.eval.max_examples > 0 {
            test.truncate(self.config.eval.max_examples);
        }
        let mut outputs = vec![EVAL_SUMMARY.to_string()];
        let popularity = popularity_baseline(&split.train, &test, &a, &trie, &ec).map_err(rt)?;
        let mut reports = Vec::new();
        let aligned = self.policy(ALIGNED)?;
        let activated = self.policy(ACTIVATED)?;
        let rl = self.policy(RL_POLICY)?;
        // the aligned checkpoint has not learned to reason, so it is ranked
        // directly; later checkpoints are ranked in every configured mode
        let plan: Vec<(&str, &Policy, Vec<ReasoningMode>)> = vec![
            ("aligned", &aligned, vec![ReasoningMode::None]),
            ("activated", &activated, self.config.eval.modes.clone()),
            ("rl", &rl, self.config.eval.modes.clone()),
        ];
        mkdirs(&self.path("eval/transcripts"))?;
        for (label, policy, modes) in plan {
            for mode in modes {
                let (report, transcripts) = evaluate_ranking(policy, &examples, &trie, &ec, mode, label).map_err(rt)?;
                info!(label, mode = mode.as_str(), recall = ?report.metrics, "evaluated");
                if !transcripts.is_empty() {
                    let rel = format!("eval/transcripts/{label}_{}.jsonl", mode.as_str());
                    write_transcripts(&self.path(&rel), &transcripts).map_err(rt)?;
                    outputs.push(rel);
                }
                reports.push(report);
            }
        }
        let rl_data = rl_examples(&test, &a, &activated.vocab).map_err(rt)?;
        let opts = DecodeOptions {
            temperature: self.config.eval.temperature,
            max_reasoning_tokens: self.config.rl.max_reasoning_tokens,
            constrained: self.config.rl.constrained,
            seed: ec.seed,
        };
        let samples = self.config.eval.reward_samples.max(1);
        let before = evaluate_rewards(&activated, &rl_data, &trie, &opts, samples, ec.lambda).map_err(rt)?;
        let after = evaluate_rewards(&rl, &rl_data, &trie, &opts, samples, ec.lambda).map_err(rt)?;
        let relative_gain = (before.mean_reward > 0.0).then(|| (after.mean_reward - before.mean_reward) / before.mean_reward);
        info!(activated = before.mean_reward, rl = after.mean_reward, relative_gain = ?relative_gain, "held-out reward");
        let summary = EvalSummary {
            popularity,
            reports,
            rewards: RewardComparison {
                activated: before,
                rl: after,
                relative_gain,
            },
        };
        write_json(&self.path(EVAL_SUMMARY), &summary)?;
        Ok(outputs)
    }

    fn bestofn(&self) -> Result<Vec<String>, CliError> {
        let ec = self.config.eval_config();
        let a = self.assignment()?;
        let trie = self.trie(&a)?;
        let examples = self.test_examples(&a)?;
        let rl = self.policy(RL_POLICY)?;
        let bon = best_of_n(&rl, &examples, &trie, &ec, "rl").map_err(rt)?;
        write_json(&self.path(BESTOFN), &bon)?;
        std::fs::write(self.path(BESTOFN_CSV), reports_csv(&bon.reports)).map_err(rt)?;
        Ok(vec![BESTOFN.into(), BESTOFN_CSV.into()])
    }
}
