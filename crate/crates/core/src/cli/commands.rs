use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{sft_warm_start, PolicyBundle, SftReport};
use crate::envsynth::{
    generate_dataset, read_corpus, read_samples, write_corpus, write_samples, Dataset, Modality, SynthSpec,
};
use crate::marl::{evaluate, mappo_iteration, AblationFlags, IterationMetrics, Pipeline, TrainState};
use crate::numerics::Momentum;
use crate::retrieval::EvidenceIndex;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::{CliError, Result, RunConfig};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    create_dir(dir)?;
    write_samples(&dir.join(TRAIN_FILE), &ds.train)?;
    write_samples(&dir.join(TEST_FILE), &ds.test)?;
    write_corpus(&dir.join(CORPUS_FILE), &ds.corpus)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_samples(&dir.join(TRAIN_FILE))?,
        test: read_samples(&dir.join(TEST_FILE))?,
        corpus: read_corpus(&dir.join(CORPUS_FILE))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub num_labels: usize,
    pub train: usize,
    pub test: usize,
    pub corpus: usize,
    pub spec: SynthSpec,
    pub config_hash: String,
}

/// Writes the three splits and `manifest.json` into the output directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthManifest> {
    cfg.validate()?;
    let ds = generate_dataset(&cfg.synth)?;
    save_dataset(&cfg.out_dir, &ds)?;
    let manifest = SynthManifest {
        seed: cfg.synth.seed,
        num_labels: cfg.synth.num_labels,
        train: ds.train.len(),
        test: ds.test.len(),
        corpus: ds.corpus.len(),
        spec: cfg.synth.clone(),
        config_hash: cfg.hash(),
    };
    write_json(&cfg.out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Warm start followed by MAPPO, one stage at a time so callers can
/// checkpoint in between.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub index: &'a EvidenceIndex,
    pub train: &'a [crate::envsynth::ModalSample],
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        index: &'a EvidenceIndex,
        train: &'a [crate::envsynth::ModalSample],
    ) -> Result<Self> {
        cfg.validate()?;
        let bundle = PolicyBundle::new(cfg.layout(), &cfg.policy, cfg.seed)?;
        Ok(Self {
            cfg,
            index,
            train,
            state: TrainState::new(bundle, cfg.train.optim),
        })
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.state.bundle
    }

    /// Behaviour cloning on teacher examples built from the training split.
    /// Resets the RL optimizer.
    pub fn warm_start(&mut self) -> Result<SftReport> {
        let cfg = self.cfg;
        let examples = {
            let pipe = Pipeline::new(self.index, &cfg.pipeline, &self.state.bundle);
            self.train
                .iter()
                .map(|s| pipe.sft_example(s, &cfg.sft, cfg.seed))
                .collect::<std::result::Result<Vec<_>, _>>()?
        };
        let report = sft_warm_start(&mut self.state.bundle, &examples, &cfg.sft, cfg.seed)?;
        self.state.optimizer = Momentum::new(cfg.train.optim, self.state.bundle.params.len());
        Ok(report)
    }

    pub fn step(&mut self) -> Result<IterationMetrics> {
        Ok(mappo_iteration(
            &mut self.state,
            self.index,
            &self.cfg.pipeline,
            self.train,
            &self.cfg.train,
            self.cfg.seed,
        )?)
    }

    pub fn checkpoint(&self, kind: CheckpointKind, stage: &str) -> Checkpoint {
        Checkpoint::from_bundle(
            &self.state.bundle,
            self.cfg,
            kind,
            stage,
            self.state.iter,
            Some(self.state.optimizer.velocity()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub sft: SftReport,
    /// Greedy full-pipeline scores on the test split after training.
    pub final_eval: Scores,
}

pub const INIT_CKPT: &str = "init.ckpt";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const EVAL_CKPT: &str = "final.eval.ckpt";

/// Trains from the dataset in `data_dir`. Writes the run config, the
/// init, post-SFT and final checkpoints, an eval-only final checkpoint,
/// `metrics.jsonl` and `train_summary.json`. On a non-finite training
/// signal the last good state is still written as the final checkpoint.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path) -> Result<TrainSummary> {
    let ds = load_dataset(data_dir)?;
    let index = EvidenceIndex::build(ds.corpus.clone())?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    cfg.save(&out.join("config.json"))?;
    let mut trainer = Trainer::new(cfg, &index, &ds.train)?;
    trainer
        .checkpoint(CheckpointKind::Train, "init")
        .save(&out.join(INIT_CKPT))?;
    let sft = trainer.warm_start()?;
    trainer
        .checkpoint(CheckpointKind::Train, "sft")
        .save(&out.join(SFT_CKPT))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut log = fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    for _ in 0..cfg.train.iterations {
        match trainer.step() {
            Ok(m) => {
                let line = serde_json::to_string(&m).expect("metrics serialise");
                writeln!(log, "{line}").map_err(|e| CliError::io(&metrics_path, e))?;
            }
            Err(e) => {
                trainer
                    .checkpoint(CheckpointKind::Train, "aborted")
                    .save(&out.join(FINAL_CKPT))?;
                return Err(e);
            }
        }
    }
    trainer
        .checkpoint(CheckpointKind::Train, "final")
        .save(&out.join(FINAL_CKPT))?;
    trainer
        .checkpoint(CheckpointKind::Eval, "final")
        .save(&out.join(EVAL_CKPT))?;
    let final_eval = score(trainer.bundle(), &index, cfg, &ds, &AblationFlags::default())?;
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iterations: trainer.state.iter,
        sft,
        final_eval,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn score(
    bundle: &PolicyBundle,
    index: &EvidenceIndex,
    cfg: &RunConfig,
    ds: &Dataset,
    flags: &AblationFlags,
) -> Result<Scores> {
    let s = evaluate(bundle, index, &cfg.pipeline, &ds.test, flags, cfg.seed)?;
    Ok(Scores {
        macro_f1: s.macro_f1,
        weighted_f1: s.weighted_f1,
    })
}

/// Short stable name of an ablation setting, `full` when nothing is set.
pub fn condition_name(flags: &AblationFlags) -> String {
    let mut parts = Vec::new();
    let named = [
        (flags.no_planner, "no_planner"),
        (flags.no_filter, "no_filter"),
        (flags.no_confuse_evidence, "no_confuse_evidence"),
        (flags.no_counter_evidence, "no_counter_evidence"),
        (flags.no_retrieval, "no_retrieval"),
        (flags.naive_rag, "naive_rag"),
        (flags.no_perceptual_evidence, "no_perceptual_evidence"),
    ];
    for (on, name) in named {
        if on {
            parts.push(name.to_string());
        }
    }
    if let Some(m) = flags.drop_modality {
        parts.push(format!("drop_{}", m.short()));
    }
    if parts.is_empty() {
        "full".into()
    } else {
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub name: String,
    pub flags: AblationFlags,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Against the table's reference row.
    pub delta_macro_f1: f64,
    pub delta_weighted_f1: f64,
}

/// Test-set counterpart of the training counterfactuals: the planner
/// replaced by a label query, and the filter bypassed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualGaps {
    pub score_full: f64,
    pub score_label: f64,
    pub score_rank: f64,
    pub gap_label: f64,
    pub gap_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_stage: String,
    pub conditions: Vec<ConditionRow>,
    pub counterfactual: CounterfactualGaps,
}

/// Scores `(label, bundle, flags)` conditions; deltas are taken against
/// `reference` (an index into `specs`).
fn table(
    index: &EvidenceIndex,
    cfg: &RunConfig,
    ds: &Dataset,
    specs: &[(String, &PolicyBundle, AblationFlags)],
    reference: usize,
) -> Result<Vec<ConditionRow>> {
    let scores = specs
        .iter()
        .map(|(_, b, f)| score(b, index, cfg, ds, f))
        .collect::<Result<Vec<_>>>()?;
    let r = scores[reference].clone();
    Ok(specs
        .iter()
        .zip(scores)
        .map(|((name, _, flags), s)| ConditionRow {
            name: name.clone(),
            flags: *flags,
            delta_macro_f1: s.macro_f1 - r.macro_f1,
            delta_weighted_f1: s.weighted_f1 - r.weighted_f1,
            macro_f1: s.macro_f1,
            weighted_f1: s.weighted_f1,
        })
        .collect())
}

fn counterfactual(
    bundle: &PolicyBundle,
    index: &EvidenceIndex,
    cfg: &RunConfig,
    ds: &Dataset,
) -> Result<CounterfactualGaps> {
    let f = |flags: AblationFlags| score(bundle, index, cfg, ds, &flags).map(|s| s.macro_f1);
    let score_full = f(AblationFlags::default())?;
    let score_label = f(AblationFlags {
        no_planner: true,
        ..Default::default()
    })?;
    let score_rank = f(AblationFlags {
        no_filter: true,
        ..Default::default()
    })?;
    Ok(CounterfactualGaps {
        score_full,
        score_label,
        score_rank,
        gap_label: score_full - score_label,
        gap_rank: score_full - score_rank,
    })
}

/// Evaluates `checkpoint` on the test split of `data_dir`, always with the
/// full pipeline and additionally under `flags` when any are set. The
/// model config comes from the checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    data_dir: &Path,
    flags: &AblationFlags,
) -> Result<EvalReport> {
    let cfg = &checkpoint.header.config;
    let bundle = checkpoint.to_bundle()?;
    let ds = load_dataset(data_dir)?;
    if ds.corpus.first().map(|c| c.e[0].len()) != Some(cfg.synth.dim) {
        return Err(CliError::Checkpoint(format!(
            "dataset embedding dim does not match the checkpoint (dim {})",
            cfg.synth.dim
        )));
    }
    let index = EvidenceIndex::build(ds.corpus.clone())?;
    let mut specs = vec![("full".to_string(), &bundle, AblationFlags::default())];
    if !flags.is_full() {
        specs.push((condition_name(flags), &bundle, *flags));
    }
    Ok(EvalReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoint_stage: checkpoint.header.stage.clone(),
        conditions: table(&index, cfg, &ds, &specs, 0)?,
        counterfactual: counterfactual(&bundle, &index, cfg, &ds)?,
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let report = evaluate_checkpoint(&ck, data_dir, &cfg.ablation)?;
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("eval_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingModalityRow {
    pub dropped: Modality,
    /// Missing slot filled from perceptual evidence.
    pub with_substitution: Scores,
    /// Perceptual evidence lists emptied, so nothing is substituted.
    pub without_substitution: Scores,
    pub delta_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seed: u64,
    /// Zero-retrieval, SFT-only, naive RAG, full; deltas against the
    /// zero-retrieval row.
    pub stepwise: Vec<ConditionRow>,
    /// Planner, filter and evidence-structure ablations; deltas against
    /// the full row.
    pub agents_and_evidence: Vec<ConditionRow>,
    pub missing_modality: Vec<MissingModalityRow>,
    pub counterfactual: CounterfactualGaps,
}

/// The three bundles the suite compares.
pub struct StageBundles {
    pub init: PolicyBundle,
    pub sft: PolicyBundle,
    pub trained: PolicyBundle,
}

/// Planner, filter and evidence ablation rows, full last.
pub fn agent_evidence_conditions() -> Vec<AblationFlags> {
    let f = AblationFlags::default;
    vec![
        AblationFlags {
            no_planner: true,
            ..f()
        },
        AblationFlags {
            no_filter: true,
            ..f()
        },
        AblationFlags {
            no_planner: true,
            no_filter: true,
            ..f()
        },
        AblationFlags {
            no_confuse_evidence: true,
            no_counter_evidence: true,
            ..f()
        },
        AblationFlags {
            no_counter_evidence: true,
            ..f()
        },
        f(),
    ]
}

pub fn run_suite(cfg: &RunConfig, ds: &Dataset, stages: &StageBundles) -> Result<SuiteReport> {
    let index = EvidenceIndex::build(ds.corpus.clone())?;
    let no_retrieval = AblationFlags {
        no_retrieval: true,
        ..Default::default()
    };
    let naive = AblationFlags {
        naive_rag: true,
        ..Default::default()
    };
    let stepwise = vec![
        ("zero_retrieval".to_string(), &stages.init, no_retrieval),
        ("sft_only".to_string(), &stages.sft, no_retrieval),
        ("naive_rag".to_string(), &stages.trained, naive),
        ("full".to_string(), &stages.trained, AblationFlags::default()),
    ];
    let rows: Vec<_> = agent_evidence_conditions()
        .into_iter()
        .map(|f| (condition_name(&f), &stages.trained, f))
        .collect();
    let full_row = rows.len() - 1;
    let mut missing = Vec::new();
    for m in Modality::ALL {
        let with = AblationFlags {
            drop_modality: Some(m),
            ..Default::default()
        };
        let without = AblationFlags {
            no_perceptual_evidence: true,
            ..with
        };
        let a = score(&stages.trained, &index, cfg, ds, &with)?;
        let b = score(&stages.trained, &index, cfg, ds, &without)?;
        missing.push(MissingModalityRow {
            dropped: m,
            delta_macro_f1: a.macro_f1 - b.macro_f1,
            with_substitution: a,
            without_substitution: b,
        });
    }
    Ok(SuiteReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        stepwise: table(&index, cfg, ds, &stepwise, 0)?,
        agents_and_evidence: table(&index, cfg, ds, &rows, full_row)?,
        missing_modality: missing,
        counterfactual: counterfactual(&stages.trained, &index, cfg, ds)?,
    })
}

/// Trains in memory and returns the init, post-SFT and trained bundles.
pub fn train_stages(cfg: &RunConfig, ds: &Dataset) -> Result<StageBundles> {
    let index = EvidenceIndex::build(ds.corpus.clone())?;
    let mut trainer = Trainer::new(cfg, &index, &ds.train)?;
    let init = trainer.bundle().clone();
    trainer.warm_start()?;
    let sft = trainer.bundle().clone();
    for _ in 0..cfg.train.iterations {
        trainer.step()?;
    }
    Ok(StageBundles {
        init,
        sft,
        trained: trainer.state.bundle,
    })
}

/// Runs the ablation suite. With `run_dir` the stage checkpoints written by
/// `train` are loaded from it; otherwise the model is trained first.
pub fn cmd_suite(cfg: &RunConfig, data_dir: &Path, run_dir: Option<&Path>) -> Result<SuiteReport> {
    let ds = load_dataset(data_dir)?;
    let (cfg, stages) = match run_dir {
        Some(dir) => {
            let load = |name: &str| -> Result<Checkpoint> { Checkpoint::load(&dir.join(name)) };
            let fin = load(FINAL_CKPT)?;
            let stages = StageBundles {
                init: load(INIT_CKPT)?.to_bundle()?,
                sft: load(SFT_CKPT)?.to_bundle()?,
                trained: fin.to_bundle()?,
            };
            let mut c = fin.header.config.clone();
            c.out_dir = cfg.out_dir.clone();
            (c, stages)
        }
        None => (cfg.clone(), train_stages(cfg, &ds)?),
    };
    let report = run_suite(&cfg, &ds, &stages)?;
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("suite_report.json"), &report)?;
    Ok(report)
}
