//! End-to-end audit runs and the memorization-dial sweep.
//!
//! A run writes, into its output directory:
//!
//! | file | contents |
//! |------|----------|
//! | `cohort.csv`, `cohort_split.json` | frames, membership marks, attack splits |
//! | `target.ckpt` | trained target model |
//! | `attack_<mode>.ckpt` | frame classifier per label mode |
//! | `summaries_<mode>.csv` | per-recording statistics and decisions |
//! | `report_<mode>.json` | [`EvalReport`] |
//! | `roc_<mode>.csv`, `pr_<mode>.csv` | test-split curves |
//!
//! Each stage reads back the files of the previous one. The cohort seed `s`
//! drives generation (`s`), target marking (`s + 1`) and the attack split
//! (`s + 2`); the null bands use `svm_seed + 1`.

use crate::attack::{
    assemble_features, predict_frames, train_attack, AttackModel, FeatureGroup, LabelledFrame,
};
use crate::cohort::{
    assign_target_train, generate_cohort, read_cohort, split_for_attack, write_frames_csv,
    AttackSplit, CohortSidecar, CohortSplit, Recording, SplitEntry,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalstat::{
    accuracy_f1, auc_null_band, binomial_test, mean_bce, pr_ap, roc_auc, CrossLabelBlock,
    EvalReport, LabelMode, SplitMetrics,
};
use crate::inference::{
    infer_membership, summarize_recording, train_svm, tune_threshold, RecordingStats, N_STATS,
};
use crate::nnet::fmt_f64;
use crate::target::{build_target, probe_all, train_target, TargetModel, TrainingLog};
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};

/// Frame probabilities are clamped this far from 0 and 1 before scoring BCE.
const PROB_EPS: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub target_log: TrainingLog,
    pub reports: Vec<EvalReport>,
}

impl RunOutcome {
    pub fn report(&self, mode: LabelMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label_mode == mode)
    }
}

/// Names of the files a run with this configuration produces.
pub fn artifact_names(config: &ExperimentConfig) -> Vec<String> {
    let mut names = vec![
        "cohort.csv".to_string(),
        "cohort_split.json".to_string(),
        "target.ckpt".to_string(),
    ];
    for mode in config.label_modes.modes() {
        let m = mode.name();
        names.extend([
            format!("attack_{m}.ckpt"),
            format!("summaries_{m}.csv"),
            format!("report_{m}.json"),
            format!("roc_{m}.csv"),
            format!("pr_{m}.csv"),
        ]);
    }
    names
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<String> {
    Ok(fs::read_to_string(dir.join(name))?)
}

fn cohort_stage(config: &ExperimentConfig, dir: &Path) -> Result<(Vec<Recording>, CohortSplit)> {
    let seed = config.cohort_seed;
    let mut recordings = generate_cohort(&config.cohort, seed)?;
    assign_target_train(&mut recordings, &config.assignment, seed.wrapping_add(1))?;
    let split = split_for_attack(&recordings, config.split_ratios, seed.wrapping_add(2))?;
    let sidecar = CohortSidecar::new(config.cohort.dims, &recordings, &split)?;
    write(
        dir,
        "cohort.csv",
        &write_frames_csv(&recordings, config.cohort.dims),
    )?;
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    write(dir, "cohort_split.json", &json)?;
    read_cohort(&read(dir, "cohort.csv")?, &read(dir, "cohort_split.json")?)
}

fn target_stage(
    config: &ExperimentConfig,
    recordings: &[Recording],
    dir: &Path,
) -> Result<TargetModel> {
    let model = build_target(&config.target_config(), config.target_seed)?;
    let frames = |member: bool| {
        recordings
            .iter()
            .filter(move |r| r.in_target_train == member)
            .flat_map(|r| &r.frames)
            .collect::<Vec<_>>()
    };
    let trained = train_target(
        &model,
        &frames(true),
        &frames(false),
        &config.target_training(),
    )?;
    write(dir, "target.ckpt", &trained.to_checkpoint())?;
    let mut loaded = TargetModel::from_checkpoint(&read(dir, "target.ckpt")?)?;
    loaded.log = trained.log;
    Ok(loaded)
}

fn label(entry: &SplitEntry, mode: LabelMode) -> u8 {
    match mode {
        LabelMode::Instance => entry.y_instance,
        LabelMode::Person => entry.y_person,
    }
}

/// Everything derived from one recording for one label mode.
struct Scored {
    entry: SplitEntry,
    frame_probs: Vec<f64>,
    stats: RecordingStats,
    probability: f64,
    member: bool,
}

fn split_metrics(scored: &[&Scored], split: AttackSplit, mode: LabelMode) -> Result<SplitMetrics> {
    let labels: Vec<u8> = scored.iter().map(|s| label(&s.entry, mode)).collect();
    let probs: Vec<f64> = scored.iter().map(|s| s.probability).collect();
    let decisions: Vec<bool> = scored.iter().map(|s| s.member).collect();
    let (accuracy, f1) = accuracy_f1(&decisions, &labels)?;
    let (frame_p, frame_y): (Vec<f64>, Vec<u8>) = scored
        .iter()
        .flat_map(|s| {
            let y = label(&s.entry, mode);
            s.frame_probs
                .iter()
                .map(move |&p| (p.clamp(PROB_EPS, 1.0 - PROB_EPS), y))
        })
        .unzip();
    Ok(SplitMetrics {
        split: split.name().to_string(),
        recordings: scored.len(),
        auc: roc_auc(&probs, &labels).ok().map(|r| r.auc),
        average_precision: pr_ap(&probs, &labels).ok().map(|r| r.average_precision),
        accuracy,
        f1,
        frame_bce: mean_bce(&frame_p, &frame_y)?,
    })
}

fn cross_label_block(
    scored: &[&Scored],
    split: AttackSplit,
    config: &ExperimentConfig,
) -> Result<CrossLabelBlock> {
    let cross: Vec<&&Scored> = scored
        .iter()
        .filter(|s| s.entry.y_person == 1 && s.entry.y_instance == 0)
        .collect();
    let total = cross.len() as u64;
    let predicted_member = cross.iter().filter(|s| s.member).count() as u64;
    let binomial = if total > 0 {
        Some(binomial_test(predicted_member, total, 0.5)?)
    } else {
        None
    };
    let negatives: Vec<&&Scored> = scored.iter().filter(|s| s.entry.y_person == 0).collect();
    let (auc_vs_nonmembers, null_band) = if cross.is_empty() || negatives.is_empty() {
        (None, None)
    } else {
        let scores: Vec<f64> = cross
            .iter()
            .chain(&negatives)
            .map(|s| s.probability)
            .collect();
        let labels: Vec<u8> = (0..scores.len()).map(|i| (i < cross.len()) as u8).collect();
        let auc = roc_auc(&scores, &labels)?.auc;
        let band = auc_null_band(
            &scores,
            &labels,
            config.null_band_level,
            config.null_band_draws,
            config.svm_seed.wrapping_add(1),
        )?;
        (Some(auc), Some(band))
    };
    Ok(CrossLabelBlock {
        split: split.name().to_string(),
        total,
        predicted_member,
        binomial,
        auc_vs_nonmembers,
        null_band,
    })
}

fn summaries_csv(scored: &[Scored]) -> String {
    let mut out = String::from(
        "recording_id,mean,variance,skewness,excess_kurtosis,entropy,probability,decision,y_instance,y_person,split\n",
    );
    for s in scored {
        let stats: Vec<String> = s.stats.to_array().iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.entry.recording_id,
            stats.join(","),
            fmt_f64(s.probability),
            s.member as u8,
            s.entry.y_instance,
            s.entry.y_person,
            s.entry.split.name()
        ));
    }
    out
}

fn attack_stage(
    config: &ExperimentConfig,
    mode: LabelMode,
    entries: &[SplitEntry],
    features: &[Vec<Vec<FeatureGroup>>],
    target_log: &TrainingLog,
    dir: &Path,
) -> Result<EvalReport> {
    let m = mode.name();
    let frames_of = |split: AttackSplit| {
        entries
            .iter()
            .zip(features)
            .filter(|(e, _)| e.split == split)
            .flat_map(|(e, f)| {
                f.iter().map(move |groups| LabelledFrame {
                    groups,
                    label: label(e, mode),
                })
            })
            .collect::<Vec<_>>()
    };
    let (model, history) = train_attack(
        &frames_of(AttackSplit::AttackTrain),
        &frames_of(AttackSplit::AttackValid),
        config.feature_config,
        &config.attack,
        config.attack_seed,
    )?;
    write(dir, &format!("attack_{m}.ckpt"), &model.to_checkpoint())?;
    let model = AttackModel::from_checkpoint(&read(dir, &format!("attack_{m}.ckpt"))?)?;

    let frame_probs = features
        .iter()
        .map(|f| predict_frames(&model, f))
        .collect::<Result<Vec<_>>>()?;
    let stats = frame_probs
        .iter()
        .map(|p| summarize_recording(p))
        .collect::<Result<Vec<_>>>()?;
    let pick = |split: AttackSplit| {
        let (x, y): (Vec<[f64; N_STATS]>, Vec<u8>) = entries
            .iter()
            .zip(&stats)
            .filter(|(e, _)| e.split == split)
            .map(|(e, s)| (s.to_array(), label(e, mode)))
            .unzip();
        (x, y)
    };
    let (train_x, train_y) = pick(AttackSplit::AttackTrain);
    let mut svm = train_svm(&train_x, &train_y, &config.svm, config.svm_seed)?;
    let (valid_x, valid_y) = pick(AttackSplit::AttackValid);
    let threshold = tune_threshold(&mut svm, &valid_x, &valid_y)?;

    let scored = entries
        .iter()
        .zip(frame_probs)
        .zip(stats)
        .map(|((entry, frame_probs), stats)| {
            let (member, probability) = infer_membership(&svm, &stats.to_array())?;
            Ok(Scored {
                entry: *entry,
                frame_probs,
                stats,
                probability,
                member,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write(dir, &format!("summaries_{m}.csv"), &summaries_csv(&scored))?;

    let by_split = |split: AttackSplit| {
        scored
            .iter()
            .filter(|s| s.entry.split == split)
            .collect::<Vec<_>>()
    };
    let mut splits = Vec::new();
    let mut cross_label = Vec::new();
    for split in AttackSplit::ALL {
        let subset = by_split(split);
        if subset.is_empty() {
            return Err(Error::invalid(format!("{} is empty", split.name())));
        }
        splits.push(split_metrics(&subset, split, mode)?);
        cross_label.push(cross_label_block(&subset, split, config)?);
    }
    let test = by_split(AttackSplit::AttackTest);
    let test_probs: Vec<f64> = test.iter().map(|s| s.probability).collect();
    let test_labels: Vec<u8> = test.iter().map(|s| label(&s.entry, mode)).collect();
    let roc = roc_auc(&test_probs, &test_labels)?;
    let pr = pr_ap(&test_probs, &test_labels)?;
    let test_metrics = &splits[2];

    let report = EvalReport {
        label_mode: mode,
        feature_config: config.feature_config.name().to_string(),
        threshold,
        roc_points: roc.points,
        auc: roc.auc,
        pr_points: pr.points,
        average_precision: pr.average_precision,
        accuracy: test_metrics.accuracy,
        f1: test_metrics.f1,
        mean_bce: test_metrics.frame_bce,
        binomial: cross_label[2].binomial,
        splits,
        cross_label,
        attack_history: history
            .epochs
            .iter()
            .map(|r| (r.epoch, r.train_bce, r.valid_bce))
            .collect(),
        attack_best_epoch: history.best_epoch,
        target_train_mse: target_log.final_train_mse(),
        target_heldout_mse: target_log.heldout_mse,
        config: config.echo(),
    };
    write(dir, &format!("report_{m}.json"), &report.to_json()?)?;
    write(dir, &format!("roc_{m}.csv"), &report.roc_csv())?;
    write(dir, &format!("pr_{m}.csv"), &report.pr_csv())?;
    Ok(report)
}

/// Runs every stage and writes all artifacts into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir)?;
    let (recordings, split) = cohort_stage(config, out_dir)?;
    let target = target_stage(config, &recordings, out_dir)?;
    let entries = recordings
        .iter()
        .map(|r| {
            split
                .entry(r.recording_id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("recording {} has no split", r.recording_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = recordings
        .iter()
        .map(|r| {
            probe_all(&target, &r.frames)?
                .iter()
                .map(|t| assemble_features(t, config.feature_config))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = config
        .label_modes
        .modes()
        .into_iter()
        .map(|mode| attack_stage(config, mode, &entries, &features, &target.log, out_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        target_log: target.log,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dial: String,
    pub generalization_gap: Option<f64>,
    pub instance_auc: f64,
    pub person_auc: f64,
    /// Test-split cross-label recordings the person model called members.
    pub person_hits: u64,
    pub person_total: u64,
    pub binomial_two_sided_p: Option<f64>,
}

impl SweepRow {
    pub fn hit_rate(&self) -> Option<f64> {
        (self.person_total > 0).then(|| self.person_hits as f64 / self.person_total as f64)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "n/a".into())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "dial,generalization_gap,instance_auc,person_auc,person_multi_hit_rate,binomial_p\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dial,
            opt(r.generalization_gap),
            fmt_f64(r.instance_auc),
            fmt_f64(r.person_auc),
            opt(r.hit_rate()),
            opt(r.binomial_two_sided_p)
        ));
    }
    out
}

/// One full run (both label modes, shared cohort seed) per value of `key`,
/// executed in parallel. Run `i` writes into `out_dir/dial_<i>`; the table
/// goes to `out_dir/sweep.csv`.
pub fn sweep(
    config: &ExperimentConfig,
    key: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two dial values"));
    }
    let dial_err = |value: &str, e: Error| Error::Dial {
        key: key.to_string(),
        value: value.to_string(),
        source: Box::new(e),
    };
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = config.clone();
        c.set(key, v).map_err(|e| dial_err(v, e))?;
        c.label_modes = crate::config::LabelModes::Both;
        configs.push(c);
    }
    fs::create_dir_all(out_dir)?;
    let rows = configs
        .par_iter()
        .zip(values)
        .enumerate()
        .map(|(i, (c, v))| {
            let outcome = run(c, &out_dir.join(format!("dial_{i}"))).map_err(|e| dial_err(v, e))?;
            let inst = outcome.report(LabelMode::Instance).expect("both modes run");
            let pers = outcome.report(LabelMode::Person).expect("both modes run");
            let block = &pers.cross_label[2];
            Ok(SweepRow {
                dial: v.clone(),
                generalization_gap: outcome.target_log.generalization_gap(),
                instance_auc: inst.auc,
                person_auc: pers.auc,
                person_hits: block.predicted_member,
                person_total: block.total,
                binomial_two_sided_p: block.binomial.map(|b| b.two_sided_p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write(out_dir, "sweep.csv", &sweep_csv(&rows))?;
    Ok(rows)
}
