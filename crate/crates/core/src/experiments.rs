//! End-to-end runs on the synthetic confounded task: vanilla vs clean
//! training, an oracle debugging round, the IAIA-BL baseline with a few
//! masks, forgetting and relapse, and the remembering ablation.

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, DatasetSpec};
use crate::dataset::{Dataset, ImageExample};
use crate::debugger::{
    drive, Annotator, DebugSession, OracleAnnotator, SessionConfig, SessionReport,
};
use crate::error::{Error, Result};
use crate::losses::Concept;
use crate::metrics::{evaluate, EvalResult};
use crate::model::{sq_dist, ModelConfig, ProtoPNet};
use crate::training::{
    finetune_debug, remove_and_finetune, train_stage1, Stage2Config, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub session: SessionConfig,
    /// Forbid verdicts the oracle may give per class.
    pub forbid_budget: usize,
    /// Masked training images per confounded class for the IAIA-BL baseline.
    pub iaia_masks_per_class: usize,
    /// Extra epochs when checking that a forgotten concept stays forgotten.
    pub relapse_epochs: usize,
    /// Remembering weight of the ablation's "on" arm.
    pub remember_weight: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stage1 = TrainConfig {
            evaluate_test: false,
            ..TrainConfig::default()
        };
        let mut finetune = TrainConfig::finetune();
        finetune.evaluate_test = false;
        Self {
            seeds: (0..5).collect(),
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            stage1,
            session: SessionConfig {
                finetune,
                max_rounds: 1,
                ..SessionConfig::default()
            },
            forbid_budget: 1,
            iaia_masks_per_class: 1,
            relapse_epochs: 20,
            remember_weight: 30.0,
        }
    }
}

impl ExperimentConfig {
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        generate(&self.data.clone().with_seed(seed))
    }

    pub fn clean_dataset(&self, seed: u64) -> Result<Dataset> {
        generate(&self.data.clone().with_seed(seed).clean())
    }

    fn stage1_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.stage1.clone()
        }
    }

    fn session_cfg(&self, seed: u64) -> SessionConfig {
        let mut s = self.session.clone();
        s.finetune.seed = seed;
        s
    }

    /// Stage-one model on `train`.
    pub fn train_model(
        &self,
        seed: u64,
        train: &[ImageExample],
        test: &[ImageExample],
    ) -> Result<ProtoPNet> {
        let mut m = ProtoPNet::new(self.model.clone(), seed)?;
        train_stage1(&mut m, train, test, &self.stage1_cfg(seed))?;
        Ok(m)
    }
}

/// Copies `train` keeping ground-truth masks on the first `per_class` images
/// of each confounded class only.
pub fn sparse_masks(
    train: &[ImageExample],
    confounded: &[usize],
    per_class: usize,
) -> Vec<ImageExample> {
    let mut seen = vec![0usize; confounded.iter().max().map_or(0, |&c| c + 1)];
    train
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            let keep = confounded.contains(&ex.label) && seen[ex.label] < per_class;
            if keep {
                seen[ex.label] += 1;
            } else {
                ex.mask = None;
            }
            ex
        })
        .collect()
}

/// Runs an oracle session on a copy of `model`.
pub fn oracle_session(
    model: &ProtoPNet,
    data: &Dataset,
    config: SessionConfig,
    annotator: &mut dyn Annotator,
) -> Result<(ProtoPNet, DebugSession, SessionReport)> {
    let mut m = model.clone();
    let mut session = DebugSession::new(config, m.num_classes());
    drive(&mut session, &mut m, data, annotator)?;
    let report = session.report()?;
    Ok((m, session, report))
}

/// Highest activation of any class-`class` prototype on any patch of `concept`.
pub fn class_activation(model: &ProtoPNet, class: usize, concept: &Concept) -> f64 {
    let d = concept.patches.shape().get(1).copied().unwrap_or(0);
    let mut best = f64::NEG_INFINITY;
    for j in model.prototypes_of(class) {
        let p = model.prototypes.row(j);
        for q in concept.patches.data().chunks(d.max(1)) {
            best = best.max(model.activation(sq_dist(p, q)));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCheck {
    pub class: usize,
    pub before: f64,
    pub after_round: f64,
    pub after_relapse: f64,
}

impl ForgettingCheck {
    pub fn round_ratio(&self) -> f64 {
        self.after_round / self.before
    }

    pub fn relapse_ratio(&self) -> f64 {
        self.after_relapse / self.before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub vanilla: EvalResult,
    pub clean: EvalResult,
    pub debugged: EvalResult,
    pub iaia: EvalResult,
    pub forbidden_per_class: Vec<usize>,
    pub forgetting: Vec<ForgettingCheck>,
    /// `None` when every prototype of some class was flagged.
    pub remove_and_finetune: Option<EvalResult>,
    pub wall_time_secs: f64,
}

/// Vanilla, clean, debugged and IAIA-BL models for one seed, all scored on
/// the same clean test split.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let start = std::time::Instant::now();
    let data = cfg.dataset(seed)?;
    let clean = cfg.clean_dataset(seed)?;
    let vanilla = cfg.train_model(seed, &data.train, &data.test)?;
    let clean_model = cfg.train_model(seed, &clean.train, &data.test)?;

    let mut oracle = OracleAnnotator::default().with_forbid_budget(cfg.forbid_budget);
    let (debugged, session, report) =
        oracle_session(&vanilla, &data, cfg.session_cfg(seed), &mut oracle)?;

    let forbidden = session.forbidden_sets(&vanilla, Some(&data));
    let mut forgetting = Vec::new();
    let flagged: Vec<usize> = forbidden
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.is_empty())
        .map(|(y, _)| y)
        .collect();
    if !flagged.is_empty() {
        let mut relapsed = debugged.clone();
        let mut relapse_cfg = cfg.session_cfg(seed).finetune;
        relapse_cfg.epochs = cfg.relapse_epochs;
        relapse_cfg.seed = seed.wrapping_add(1000);
        let none = crate::losses::empty_sets(vanilla.num_classes());
        finetune_debug(
            &mut relapsed,
            &data.train,
            &data.test,
            &forbidden,
            &none,
            &relapse_cfg,
        )?;
        for &y in &flagged {
            for c in &forbidden[y] {
                forgetting.push(ForgettingCheck {
                    class: y,
                    before: class_activation(&vanilla, y, c),
                    after_round: class_activation(&debugged, y, c),
                    after_relapse: class_activation(&relapsed, y, c),
                });
            }
        }
    }

    let masked = sparse_masks(
        &data.train,
        &data.spec.confounded_classes,
        cfg.iaia_masks_per_class,
    );
    let mut iaia_model = ProtoPNet::new(cfg.model.clone(), seed)?;
    let iaia_cfg = TrainConfig {
        iaia: true,
        ..cfg.stage1_cfg(seed)
    };
    train_stage1(&mut iaia_model, &masked, &data.test, &iaia_cfg)?;

    let bad: Vec<usize> = report
        .rounds
        .first()
        .map(|r| {
            r.prototypes
                .iter()
                .filter(|p| !p.accepted)
                .map(|p| p.prototype)
                .collect()
        })
        .unwrap_or_default();
    let mut removed = vanilla.clone();
    let remove_and_finetune =
        match remove_and_finetune(&mut removed, &bad, &data.train, &Stage2Config::default()) {
            Ok(_) => Some(evaluate(&removed, &data.test)?),
            Err(Error::BaselineInapplicable(_)) => None,
            Err(e) => return Err(e),
        };

    Ok(SeedOutcome {
        seed,
        vanilla: report.initial_eval.clone(),
        clean: evaluate(&clean_model, &data.test)?,
        debugged: evaluate(&debugged, &data.test)?,
        iaia: evaluate(&iaia_model, &data.test)?,
        forbidden_per_class: report.forbidden.iter().map(Vec::len).collect(),
        forgetting,
        remove_and_finetune,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub seed: u64,
    pub with_remembering: f64,
    pub without_remembering: f64,
}

/// Two-round oracle sessions from the same vanilla model, with and without
/// the remembering loss. Returns the final test macro F1 of both.
pub fn remembering_ablation(cfg: &ExperimentConfig, seed: u64) -> Result<AblationOutcome> {
    let data = cfg.dataset(seed)?;
    let vanilla = cfg.train_model(seed, &data.train, &data.test)?;
    let run = |remember: f64| -> Result<f64> {
        let mut s = cfg.session_cfg(seed);
        s.max_rounds = 2;
        s.finetune.weights.remember = remember;
        let mut oracle = OracleAnnotator::default().with_forbid_budget(2 * cfg.forbid_budget);
        let (_, _, report) = oracle_session(&vanilla, &data, s, &mut oracle)?;
        Ok(report.final_eval.macro_f1)
    };
    Ok(AblationOutcome {
        seed,
        with_remembering: run(cfg.remember_weight)?,
        without_remembering: run(0.0)?,
    })
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
