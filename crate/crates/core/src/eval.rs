//! HR@K / MRR@K evaluation over held-out recommendation turns.
//!
//! An instance is a hit at K when any ground-truth item of the turn appears
//! in the first K positions. Metrics are reported both for the retrieval
//! candidate list and for the final reranked list.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::corpus::EvalInstance;
use crate::error::{Error, Result};
use crate::kg::ItemId;
use crate::llm::ChatClient;
use crate::pipeline::{Engine, Query};
use crate::rerank::is_grounded;

/// 1 when any truth item is among the first `k` entries, else 0.
pub fn hit_ratio(ranked: &[ItemId], truth: &BTreeSet<ItemId>, k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    f64::from(u8::from(ranked.iter().take(k).any(|i| truth.contains(i))))
}

/// Reciprocal rank of the first truth item within the first `k`, else 0.
pub fn mrr(ranked: &[ItemId], truth: &BTreeSet<ItemId>, k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    ranked
        .iter()
        .take(k)
        .position(|i| truth.contains(i))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// 1-based rank of the first truth item anywhere in the list.
pub fn first_hit_rank(ranked: &[ItemId], truth: &BTreeSet<ItemId>) -> Option<usize> {
    ranked.iter().position(|i| truth.contains(i)).map(|p| p + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub conversation: String,
    pub turn: usize,
    pub ground_truth: Vec<ItemId>,
    /// Rank of the first hit in the retrieval candidates.
    pub retrieval_rank: Option<usize>,
    /// Rank of the first hit in the final list.
    pub final_rank: Option<usize>,
    pub candidates: usize,
    pub fallback: bool,
    pub ungrounded_lines: usize,
    pub grounded: bool,
}

impl InstanceRecord {
    fn key(&self) -> (String, usize) {
        (self.conversation.clone(), self.turn)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[Option<usize>], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mut m = Metrics::default();
        for &k in ks {
            let hits: f64 = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64;
            let rr: f64 = ranks
                .iter()
                .filter_map(|r| r.filter(|&r| r <= k).map(|r| 1.0 / r as f64))
                .fold(0.0, |a, b| a + b);
            m.hr.insert(k, if ranks.is_empty() { 0.0 } else { hits / n });
            m.mrr.insert(k, if ranks.is_empty() { 0.0 } else { rr / n });
        }
        m
    }

    /// `MRR@K ≤ HR@K ≤ 1` and both non-decreasing in K.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("metric invariant: {m}")));
        let mut prev: Option<(usize, f64, f64)> = None;
        for (&k, &hr) in &self.hr {
            let mrr = self.mrr.get(&k).copied().unwrap_or(0.0);
            if !(0.0..=1.0).contains(&hr) || mrr > hr + 1e-12 || mrr < 0.0 {
                return bad(format!("K={k}: HR={hr}, MRR={mrr}"));
            }
            if let Some((pk, phr, pmrr)) = prev {
                if hr + 1e-12 < phr || mrr + 1e-12 < pmrr {
                    return bad(format!("K={pk} -> K={k} decreased"));
                }
            }
            prev = Some((k, hr, mrr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fingerprint: String,
    pub ablation: Ablation,
    pub model: String,
    pub config: serde_json::Value,
    pub instances: usize,
    pub retrieval: Metrics,
    pub end_to_end: Metrics,
    pub grounding_violations: usize,
    pub fallbacks: usize,
    pub records: Vec<InstanceRecord>,
}

impl MetricReport {
    pub fn check_invariants(&self) -> Result<()> {
        self.retrieval.check_invariants()?;
        self.end_to_end.check_invariants()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Per-instance JSON Lines checkpoint; finished instances are skipped on
    /// rerun.
    pub checkpoint: Option<PathBuf>,
    /// Skip the LLM and score the retrieval order.
    pub retrieval_only: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
}

fn read_checkpoint(path: &Path, fingerprint: &str) -> Result<HashMap<(String, usize), InstanceRecord>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = std::io::BufReader::new(file).lines();
    let Some(first) = lines.next() else {
        return Ok(HashMap::new());
    };
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Config(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.fingerprint != fingerprint {
        return Err(Error::Config(format!(
            "{}: checkpoint was written under a different configuration",
            path.display()
        )));
    }
    let mut done = HashMap::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<InstanceRecord>(&line) {
            Ok(r) => {
                done.insert(r.key(), r);
            }
            Err(e) => tracing::warn!(error = %e, "ignoring partial checkpoint line"),
        }
    }
    Ok(done)
}

fn evaluate_instance(
    engine: &Engine,
    instance: &EvalInstance,
    client: &dyn ChatClient,
    options: &RunOptions,
    test_keys: &HashSet<&str>,
) -> Result<InstanceRecord> {
    let exclude_items = if engine.config().retrieval.exclude_prior {
        instance.prior_recommendations.clone()
    } else {
        Vec::new()
    };
    let query = Query {
        history: instance.history.clone(),
        exclude_items,
        ..Default::default()
    };
    let truth = &instance.ground_truth;
    let (retrieval, final_list, fallback, ungrounded) = if options.retrieval_only {
        let r = engine.retrieve(&query)?;
        let ids = r.item_ids();
        (r, ids, false, 0)
    } else {
        let rec = engine.recommend(&query, client)?;
        if let Some(err) = rec.llm_error {
            return Err(Error::Llm(crate::llm::LlmError::Unavailable(format!(
                "instance {}#{}: {err}",
                instance.conversation_key, instance.turn
            ))));
        }
        let fallback = rec.result.fallback;
        let ungrounded = rec.result.ungrounded.len();
        (rec.retrieval, rec.result.ranked_items, fallback, ungrounded)
    };
    let index = engine.index();
    for c in &retrieval.conversations {
        let key = &index.conversation(c.conversation).key;
        if test_keys.contains(key.as_str()) {
            return Err(Error::Validation(format!(
                "leakage: retrieved conversation {key} belongs to the test split"
            )));
        }
    }
    let candidates = retrieval.item_ids();
    Ok(InstanceRecord {
        conversation: instance.conversation_key.clone(),
        turn: instance.turn,
        ground_truth: truth.iter().copied().collect(),
        retrieval_rank: first_hit_rank(&candidates, truth),
        final_rank: first_hit_rank(&final_list, truth),
        candidates: candidates.len(),
        fallback,
        ungrounded_lines: ungrounded,
        grounded: is_grounded(&final_list, &candidates),
    })
}

/// Evaluates every instance (in parallel) and aggregates in instance order.
pub fn run_experiment(
    engine: &Engine,
    instances: &[EvalInstance],
    client: &dyn ChatClient,
    options: &RunOptions,
) -> Result<MetricReport> {
    let config = engine.config();
    let fingerprint = config.fingerprint();
    let test_keys: HashSet<&str> = instances.iter().map(|i| i.conversation_key.as_str()).collect();
    let done = match &options.checkpoint {
        Some(path) => read_checkpoint(path, &fingerprint)?,
        None => HashMap::new(),
    };
    let writer = match &options.checkpoint {
        Some(path) => {
            let fresh = done.is_empty();
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            if fresh {
                let header = serde_json::to_string(&CheckpointHeader {
                    fingerprint: fingerprint.clone(),
                })
                .expect("header serializes");
                writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
            }
            Some(Mutex::new(file))
        }
        None => None,
    };

    let results: Vec<Result<InstanceRecord>> = instances
        .par_iter()
        .map(|instance| {
            if let Some(r) = done.get(&(instance.conversation_key.clone(), instance.turn)) {
                return Ok(r.clone());
            }
            let record = evaluate_instance(engine, instance, client, options, &test_keys)?;
            if let (Some(w), Some(path)) = (&writer, &options.checkpoint) {
                let line = serde_json::to_string(&record).expect("record serializes");
                let mut file = w.lock().unwrap_or_else(|e| e.into_inner());
                writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
            }
            Ok(record)
        })
        .collect();
    let records: Vec<InstanceRecord> = results.into_iter().collect::<Result<_>>()?;

    let ks = &config.eval.ks;
    let retrieval_ranks: Vec<Option<usize>> = records.iter().map(|r| r.retrieval_rank).collect();
    let final_ranks: Vec<Option<usize>> = records.iter().map(|r| r.final_rank).collect();
    let report = MetricReport {
        fingerprint,
        ablation: config.ablation,
        model: if options.retrieval_only {
            "none".into()
        } else {
            client.model_id().to_string()
        },
        config: serde_json::to_value(config.effective()).expect("config serializes"),
        instances: records.len(),
        retrieval: Metrics::from_ranks(&retrieval_ranks, ks),
        end_to_end: Metrics::from_ranks(&final_ranks, ks),
        grounding_violations: records.iter().filter(|r| !r.grounded).count(),
        fallbacks: records.iter().filter(|r| r.fallback).count(),
        records,
    };
    report.check_invariants()?;
    Ok(report)
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.end_to_end.hr.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec!["config".to_string(), "n".to_string()];
    header.extend(ks.iter().map(|k| format!("HR@{k}")));
    header.extend(ks.iter().map(|k| format!("MRR@{k}")));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.ablation.as_str().to_string(), r.instances.to_string()];
        row.extend(
            ks.iter()
                .map(|k| format!("{:.4}", r.end_to_end.hr.get(k).copied().unwrap_or(0.0))),
        );
        row.extend(
            ks.iter()
                .map(|k| format!("{:.4}", r.end_to_end.mrr.get(k).copied().unwrap_or(0.0))),
        );
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}
