//! The five pipeline stages: synth-data, train, attack, evaluate, report.
//! Each stage is idempotent, reads the previous stage's artifacts, and
//! stamps its outputs with the experiment's config hash.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use noskim_core::access::{
    correlation_report, BlackBoxOracle, CorrelationReport, GrayBoxOracle, OracleError,
    WhiteBoxOracle,
};
use noskim_core::attack::{
    finalize_attack, run_attack_timed, AttackConfig, AttackResult, Oracle, ScenarioKind,
    SearchOutcome,
};
use noskim_core::metrics::{self, PairInput, DEFAULT_CRR_BINS};
use noskim_core::model::{train, SkimTransformer, TrainReport};
use noskim_core::tokenizer::Tokenizer;
use noskim_core::Sample;

use crate::checkpoint;
use crate::config::{file_sha256, BlackBoxMode, DatasetMeta, ExperimentConfig};
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::report::{
    write_correlation_csv, BudgetMetrics, CorrelationSummary, OriginMetrics, PairRecord, Report,
    REPORT_VERSION,
};
use crate::svg::{cdf_points, Chart, Series};
use crate::corpus;

/// One line of `attacks.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRow {
    pub config_hash: String,
    pub scenario: ScenarioKind,
    pub ops: usize,
    pub sample_index: usize,
    pub true_label: usize,
    #[serde(flatten)]
    pub result: AttackResult,
}

pub fn cmd_synth_data(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(CliError::runtime)?;
    let spec = corpus::CorpusSpec {
        vocab_size: cfg.corpus.vocab_size,
        train_samples: cfg.corpus.train_samples,
        val_samples: cfg.corpus.val_samples,
        min_words: cfg.corpus.min_words,
        max_words: cfg.corpus.max_words,
        num_classes: cfg.model.num_classes,
        keywords_per_class: cfg.corpus.keywords_per_class,
        noise_rate: cfg.corpus.noise_rate,
        zipf_exponent: cfg.corpus.zipf_exponent,
        seed: cfg.corpus_seed(),
    };
    let synth = corpus::synthesize(&spec).map_err(CliError::data)?;
    dataset::write_dataset_jsonl(&cfg.train_data_path(), &synth.train)?;
    dataset::write_dataset_jsonl(&cfg.val_data_path(), &synth.validation)?;
    dataset::write_vocab(&cfg.vocab_path(), &synth.vocab_words)?;

    let mut files = BTreeMap::new();
    for (key, path) in [
        ("train", cfg.train_data_path()),
        ("val", cfg.val_data_path()),
        ("vocab", cfg.vocab_path()),
    ] {
        files.insert(key.to_string(), file_sha256(&path)?);
    }
    let meta = DatasetMeta { config_hash: cfg.hash(), files };
    std::fs::write(
        cfg.dataset_meta_path(),
        serde_json::to_vec_pretty(&meta).map_err(CliError::runtime)?,
    )
    .map_err(CliError::runtime)?;
    println!(
        "synth-data: {} train / {} val samples, vocab {} words -> {}",
        synth.train.len(),
        synth.validation.len(),
        synth.vocab_words.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainingReportFile {
    pub config_hash: String,
    pub vocab_sha256: String,
    pub val_accuracy: f64,
    pub val_arr: f64,
    pub report: TrainReport,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(CliError::runtime)?;
    check_dataset_meta(cfg)?;
    let train_set = dataset::load_dataset(&cfg.train_data_path())?;
    let val_set = dataset::load_dataset(&cfg.val_data_path())?;
    let vocab = dataset::load_vocab(&cfg.vocab_path())?;
    let vocab_sha = file_sha256(&cfg.vocab_path())?;
    let model_cfg = cfg.resolved_model();
    let tokenizer = Tokenizer::new(vocab, model_cfg.max_seq_len);
    let started = Instant::now();
    let (model, report) =
        train(&train_set, &val_set, &model_cfg, &tokenizer, &cfg.resolved_train())
            .map_err(CliError::runtime)?;
    checkpoint::save(&cfg.checkpoint_path(), &model, &vocab_sha, &cfg.hash())?;
    let file = TrainingReportFile {
        config_hash: cfg.hash(),
        vocab_sha256: vocab_sha,
        val_accuracy: report.val_accuracy,
        val_arr: report.val_arr,
        report,
    };
    std::fs::write(
        cfg.training_report_path(),
        serde_json::to_vec_pretty(&file).map_err(CliError::runtime)?,
    )
    .map_err(CliError::runtime)?;
    println!(
        "train: val accuracy {:.4}, val ARR {:.4}, {:.1}s -> {}",
        file.val_accuracy,
        file.val_arr,
        started.elapsed().as_secs_f64(),
        cfg.checkpoint_path().display()
    );
    Ok(())
}

/// Loads the checkpoint plus the tokenizer it was trained with, verifying
/// the vocabulary hash recorded at save time.
fn load_model_and_tokenizer(cfg: &ExperimentConfig) -> CliResult<(SkimTransformer, Tokenizer, String)> {
    let (model, header) = checkpoint::load(&cfg.checkpoint_path())?;
    let vocab_sha = file_sha256(&cfg.vocab_path())?;
    if vocab_sha != header.vocab_sha256 {
        return Err(CliError::data_msg(format!(
            "vocabulary {} (sha {}) does not match checkpoint {} (sha {})",
            cfg.vocab_path().display(),
            &vocab_sha[..12],
            cfg.checkpoint_path().display(),
            &header.vocab_sha256[..12]
        )));
    }
    let vocab = dataset::load_vocab(&cfg.vocab_path())?;
    if vocab.size() != model.vocab_size() {
        return Err(CliError::data_msg(format!(
            "vocabulary size {} does not match checkpoint vocab_size {}",
            vocab.size(),
            model.vocab_size()
        )));
    }
    let tokenizer = Tokenizer::new(vocab, model.config().max_seq_len);
    Ok((model, tokenizer, header.config_hash))
}

fn check_dataset_meta(cfg: &ExperimentConfig) -> CliResult<()> {
    let meta_path = cfg.dataset_meta_path();
    if !meta_path.exists() {
        return Ok(()); // user-supplied corpora carry no sidecar
    }
    let bytes = std::fs::read(&meta_path).map_err(CliError::data)?;
    let meta: DatasetMeta = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::data_msg(format!("{}: {e}", meta_path.display())))?;
    if meta.config_hash != cfg.hash() {
        eprintln!(
            "warning: datasets in {} were synthesized under config hash {}, current is {}",
            cfg.output_dir.display(),
            &meta.config_hash[..12],
            &cfg.hash()[..12]
        );
    }
    Ok(())
}

struct SampleAttack {
    sample_index: usize,
    true_label: usize,
    outcome: SearchOutcome,
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate()?;
    let (model, tokenizer, ckpt_hash) = load_model_and_tokenizer(cfg)?;
    if ckpt_hash != cfg.hash() {
        eprintln!(
            "warning: checkpoint was trained under config hash {}, current is {}",
            &ckpt_hash[..12],
            &cfg.hash()[..12]
        );
    }
    let val_set = dataset::load_dataset(&cfg.val_data_path())?;
    if val_set.len() < cfg.attack.eval_subset {
        return Err(CliError::data_msg(format!(
            "validation set has {} samples, eval_subset wants {}",
            val_set.len(),
            cfg.attack.eval_subset
        )));
    }
    let subset = &val_set[..cfg.attack.eval_subset];
    let max_budget = *cfg.attack.budgets.last().expect("validated nonempty");
    let started = Instant::now();

    let file = std::fs::File::create(cfg.attacks_path())
        .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", cfg.attacks_path().display())))?;
    let mut out = std::io::BufWriter::new(file);
    let mut rows_written = 0usize;

    for &scenario in &cfg.attack.scenarios {
        let attack_cfg = scenario_config(cfg, scenario, max_budget);
        // Wall-clock timing must not share the machine with sibling attacks.
        let serial = matches!(cfg.attack.black_box_mode, BlackBoxMode::WallClock)
            && scenario == ScenarioKind::BlackBoxChar;
        let run_one = |(idx, sample): (usize, &Sample)| -> CliResult<SampleAttack> {
            let mut oracle = build_oracle(cfg, scenario, &model, &tokenizer)?;
            let t0 = Instant::now();
            let mut clock = move || t0.elapsed().as_nanos() as u64;
            let outcome =
                run_attack_timed(&mut oracle, &sample.text, &attack_cfg, Some(&mut clock))
                    .map_err(|e| {
                        CliError::runtime_msg(format!(
                            "attack failed on sample {idx} ({:?}): {e}",
                            scenario.name()
                        ))
                    })?;
            Ok(SampleAttack { sample_index: idx, true_label: sample.label, outcome })
        };
        let attacks: Vec<SampleAttack> = if serial {
            subset.iter().enumerate().map(run_one).collect::<CliResult<_>>()?
        } else {
            subset
                .par_iter()
                .enumerate()
                .map(run_one)
                .collect::<Result<Vec<_>, _>>()?
        };

        for &ops in &cfg.attack.budgets {
            for attack in &attacks {
                let row = budget_row(cfg, &model, &tokenizer, scenario, ops, attack)?;
                serde_json::to_writer(&mut out, &row).map_err(CliError::runtime)?;
                out.write_all(b"\n").map_err(CliError::runtime)?;
                rows_written += 1;
            }
        }
    }
    out.flush().map_err(CliError::runtime)?;
    println!(
        "attack: {} rows ({} scenarios x {} budgets x {} samples) in {:.1}s -> {}",
        rows_written,
        cfg.attack.scenarios.len(),
        cfg.attack.budgets.len(),
        subset.len(),
        started.elapsed().as_secs_f64(),
        cfg.attacks_path().display()
    );
    Ok(())
}

fn scenario_config(cfg: &ExperimentConfig, scenario: ScenarioKind, budget: usize) -> AttackConfig {
    let mut c = scenario.attack_config(budget);
    c.top_k = cfg.attack.top_k;
    c.sim_threshold = cfg.attack.sim_threshold;
    c.charset = cfg.attack.charset.clone();
    c.max_words_tried_per_iter = cfg.attack.max_words_tried_per_iter;
    c
}

fn build_oracle<'a>(
    cfg: &ExperimentConfig,
    scenario: ScenarioKind,
    model: &'a SkimTransformer,
    tokenizer: &'a Tokenizer,
) -> CliResult<Oracle<'a>> {
    Ok(match scenario {
        ScenarioKind::WhiteBoxToken | ScenarioKind::WhiteBoxChar => {
            Oracle::White(WhiteBoxOracle::new(model, tokenizer))
        }
        ScenarioKind::GrayBoxChar => Oracle::Gray(GrayBoxOracle::new(model, tokenizer)),
        ScenarioKind::BlackBoxChar => match cfg.attack.black_box_mode {
            BlackBoxMode::Counted => Oracle::Black(BlackBoxOracle::counted(model, tokenizer)),
            BlackBoxMode::WallClock => {
                let t0 = Instant::now();
                let clock = move || t0.elapsed().as_nanos() as u64;
                Oracle::Black(
                    BlackBoxOracle::wall_clock(model, tokenizer, cfg.timing, clock)
                        .map_err(CliError::runtime)?,
                )
            }
        },
    })
}

/// Derives the budget-`ops` row from the shared max-budget search: the
/// greedy loop is prefix-stable, so the first `ops` iterations are exactly
/// the budget-`ops` attack.
fn budget_row(
    cfg: &ExperimentConfig,
    model: &SkimTransformer,
    tokenizer: &Tokenizer,
    scenario: ScenarioKind,
    ops: usize,
    attack: &SampleAttack,
) -> CliResult<AttackRow> {
    let outcome = &attack.outcome;
    let prefix = SearchOutcome {
        original_text: outcome.original_text.clone(),
        adversarial_words: outcome
            .text_at_budget(ops)
            .split_whitespace()
            .map(String::from)
            .collect(),
        per_iteration: outcome.per_iteration[..ops.min(outcome.per_iteration.len())].to_vec(),
        total_queries: outcome
            .per_iteration
            .get(ops.saturating_sub(1))
            .map(|r| r.queries_cumulative)
            .unwrap_or(outcome.total_queries),
        candidate_errors: outcome.candidate_errors,
    };
    let wall_time = prefix
        .per_iteration
        .last()
        .map(|r| r.elapsed_ns as f64 / 1e9)
        .unwrap_or(0.0);
    let result =
        finalize_attack(model, tokenizer, prefix, wall_time).map_err(CliError::runtime)?;
    Ok(AttackRow {
        config_hash: cfg.hash(),
        scenario,
        ops,
        sample_index: attack.sample_index,
        true_label: attack.true_label,
        result,
    })
}

pub fn load_attack_rows(path: &Path) -> CliResult<Vec<AttackRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data_msg(format!("cannot read attacks {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: AttackRow = serde_json::from_str(line).map_err(|e| {
            CliError::data_msg(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data_msg(format!("no attack rows in {}", path.display())));
    }
    Ok(rows)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, force: bool) -> CliResult<()> {
    cfg.validate()?;
    let (model, tokenizer, ckpt_hash) = load_model_and_tokenizer(cfg)?;
    let rows = load_attack_rows(&cfg.attacks_path())?;
    let current = cfg.hash();
    if !force {
        for (what, hash) in [("checkpoint", &ckpt_hash), ("attack rows", &rows[0].config_hash)] {
            if *hash != current {
                return Err(CliError::data_msg(format!(
                    "{what} carry config hash {} but the current config hashes to {}; \
                     rerun the pipeline or pass --force",
                    &hash[..12],
                    &current[..12]
                )));
            }
        }
    }

    // Origin metrics over the unique attacked samples.
    let mut originals: BTreeMap<usize, (String, usize)> = BTreeMap::new();
    for row in &rows {
        originals
            .entry(row.sample_index)
            .or_insert_with(|| (row.result.original_text.clone(), row.true_label));
    }
    let origin_inputs: Vec<PairInput> = originals
        .values()
        .map(|(text, label)| PairInput {
            original: text.clone(),
            adversarial: text.clone(),
            true_label: *label,
            queries: 0,
            wall_time: 0.0,
        })
        .collect();
    let origin_eval = metrics::evaluate_pairs(&model, &tokenizer, &origin_inputs, DEFAULT_CRR_BINS)
        .map_err(CliError::runtime)?;
    let origin = OriginMetrics {
        arr: origin_eval.before.arr,
        crr: origin_eval.before.crr,
        accuracy: origin_eval.accuracy_before,
        layer_retention: origin_eval.before.layer_retention.clone(),
        mean_rtr: mean(&origin_eval.before.per_sample_rtr),
    };

    // Group rows by (scenario, ops) preserving the sweep order.
    let mut groups: Vec<((ScenarioKind, usize), Vec<&AttackRow>)> = Vec::new();
    for row in &rows {
        let key = (row.scenario, row.ops);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => groups.push((key, vec![row])),
        }
    }

    let mut per_budget = Vec::with_capacity(groups.len());
    let mut pair_records = Vec::new();
    for ((scenario, ops), group) in &groups {
        let inputs: Vec<PairInput> = group
            .iter()
            .map(|r| PairInput {
                original: r.result.original_text.clone(),
                adversarial: r.result.adversarial_text.clone(),
                true_label: r.true_label,
                queries: r.result.total_queries,
                wall_time: r.result.wall_time,
            })
            .collect();
        let eval = metrics::evaluate_pairs(&model, &tokenizer, &inputs, DEFAULT_CRR_BINS)
            .map_err(CliError::runtime)?;
        per_budget.push(BudgetMetrics {
            scenario: *scenario,
            ops: *ops,
            arr: eval.after.arr,
            crr: eval.after.crr,
            accuracy: eval.accuracy_after,
            mean_similarity: eval.mean_similarity,
            mean_queries: eval.mean_queries,
            mean_wall_time: eval.mean_wall_time,
            layer_retention: eval.after.layer_retention.clone(),
        });
        for (row, pair) in group.iter().zip(&eval.pairs) {
            pair_records.push(PairRecord {
                scenario: *scenario,
                ops: *ops,
                sample_index: row.sample_index,
                similarity: pair.similarity,
                label_preserved: pair.label_preserved,
                rtr_before: pair.rtr_before,
                rtr_after: pair.rtr_after,
                queries: pair.queries,
                wall_time: pair.wall_time,
            });
        }
    }

    // Side-channel linearity study over the attacked originals.
    let texts: Vec<String> = originals.values().map(|(t, _)| t.clone()).collect();
    let correlation = run_correlation(cfg, &model, &tokenizer, &texts)?;
    if let Some((ref corr, _)) = correlation {
        write_correlation_csv(&cfg.correlation_csv_path(), corr)?;
    }

    let report = Report {
        report_version: REPORT_VERSION,
        config_hash: current,
        config: cfg.semantic_json(),
        origin,
        per_budget,
        pairs: pair_records,
        correlation: correlation.map(|(c, kind)| CorrelationSummary {
            kind,
            sequence_level_r: c.sequence_level_r,
            token_level_r: c.token_level_r,
        }),
    };
    report.write_json(&cfg.report_json_path())?;
    println!(
        "evaluate: origin ARR {:.4} / CRR {:.4} / acc {:.4}, {} budget rows -> {}",
        report.origin.arr,
        report.origin.crr,
        report.origin.accuracy,
        report.per_budget.len(),
        cfg.report_json_path().display()
    );
    Ok(())
}

fn run_correlation(
    cfg: &ExperimentConfig,
    model: &SkimTransformer,
    tokenizer: &Tokenizer,
    texts: &[String],
) -> CliResult<Option<(CorrelationReport, String)>> {
    if texts.len() < noskim_core::access::CORRELATION_MIN_SAMPLES {
        return Ok(None);
    }
    let counted = || -> CliResult<CorrelationReport> {
        let mut oracle = BlackBoxOracle::counted(model, tokenizer);
        correlation_report(&mut oracle, texts).map_err(CliError::runtime)
    };
    match cfg.attack.black_box_mode {
        BlackBoxMode::Counted => Ok(Some((counted()?, "counted_cost".to_string()))),
        BlackBoxMode::WallClock => {
            let t0 = Instant::now();
            let clock = move || t0.elapsed().as_nanos() as u64;
            let mut oracle = BlackBoxOracle::wall_clock(model, tokenizer, cfg.timing, clock)
                .map_err(CliError::runtime)?;
            match correlation_report(&mut oracle, texts) {
                Ok(c) => Ok(Some((c, "token_time".to_string()))),
                Err(e @ OracleError::UnstableMeasurement { .. }) => {
                    eprintln!("warning: wall-clock correlation unstable ({e}); using counted");
                    Ok(Some((counted()?, "counted_cost".to_string())))
                }
                Err(e) => Err(CliError::runtime(e)),
            }
        }
    }
}

pub fn cmd_report(cfg: &ExperimentConfig) -> CliResult<()> {
    let report = Report::load_json(&cfg.report_json_path())?;
    report.write_csv(&cfg.report_csv_path())?;

    // Pick the scenario whose curves get the per-budget breakdown.
    let focus = report
        .per_budget
        .iter()
        .map(|b| b.scenario)
        .find(|s| *s == ScenarioKind::WhiteBoxChar)
        .or_else(|| report.per_budget.first().map(|b| b.scenario));

    let mut retention = Chart {
        title: format!(
            "Per-layer mean retention{}",
            focus.map(|s| format!(" — {}", s.name())).unwrap_or_default()
        ),
        x_label: "layer".into(),
        y_label: "mean retained fraction".into(),
        series: vec![Series {
            label: "origin".into(),
            points: curve_points(&report.origin.layer_retention),
        }],
    };
    let mut crr_chart = Chart {
        title: format!(
            "Cumulative RTR distribution{}",
            focus.map(|s| format!(" — {}", s.name())).unwrap_or_default()
        ),
        x_label: "remaining token ratio".into(),
        y_label: "fraction of samples ≤ x".into(),
        series: vec![],
    };
    let mut sim_chart = Chart {
        title: format!(
            "Similarity CDF{}",
            focus.map(|s| format!(" — {}", s.name())).unwrap_or_default()
        ),
        x_label: "similarity".into(),
        y_label: "fraction of samples ≤ x".into(),
        series: vec![],
    };
    if let Some(focus) = focus {
        let origin_rtrs: Vec<f64> = {
            // rtr_before is identical across budgets; take the first group.
            let first_ops = report
                .pairs
                .iter()
                .filter(|p| p.scenario == focus)
                .map(|p| p.ops)
                .min();
            report
                .pairs
                .iter()
                .filter(|p| p.scenario == focus && Some(p.ops) == first_ops)
                .map(|p| p.rtr_before)
                .collect()
        };
        if !origin_rtrs.is_empty() {
            crr_chart
                .series
                .push(Series { label: "origin".into(), points: cdf_points(&origin_rtrs) });
        }
        for b in report.per_budget.iter().filter(|b| b.scenario == focus) {
            retention.series.push(Series {
                label: format!("ops={}", b.ops),
                points: curve_points(&b.layer_retention),
            });
            let rtrs: Vec<f64> = report
                .pairs
                .iter()
                .filter(|p| p.scenario == focus && p.ops == b.ops)
                .map(|p| p.rtr_after)
                .collect();
            if !rtrs.is_empty() {
                crr_chart
                    .series
                    .push(Series { label: format!("ops={}", b.ops), points: cdf_points(&rtrs) });
            }
            let sims: Vec<f64> = report
                .pairs
                .iter()
                .filter(|p| p.scenario == focus && p.ops == b.ops)
                .map(|p| p.similarity)
                .collect();
            if !sims.is_empty() {
                sim_chart
                    .series
                    .push(Series { label: format!("ops={}", b.ops), points: cdf_points(&sims) });
            }
        }
    }
    let retention_path = cfg.output_dir.join("curves_retention.svg");
    let crr_path = cfg.output_dir.join("curves_crr.svg");
    let sim_path = cfg.output_dir.join("curves_similarity.svg");
    retention.write(&retention_path)?;
    crr_chart.write(&crr_path)?;
    sim_chart.write(&sim_path)?;
    println!(
        "report: {} and {} curves -> {}",
        cfg.report_csv_path().display(),
        3,
        cfg.output_dir.display()
    );
    Ok(())
}

fn curve_points(retention: &[f64]) -> Vec<(f64, f64)> {
    retention.iter().enumerate().map(|(l, &r)| ((l + 1) as f64, r)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
