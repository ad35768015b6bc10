//! Interactive debugging sessions: show each prototype's most activated
//! training images, collect forbid/keep verdicts, fine-tune with the
//! forgetting and remembering losses, repeat until nothing is forbidden.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageExample};
use crate::error::{Error, Result};
use crate::explain::{
    attribution_from_record, display_patches, extract_cutout, rank_top, scaled_min_area, CutOut,
    DisplayPatch, Scope,
};
use crate::losses::{Concept, ConceptSets};
use crate::metrics::{evaluate, EvalResult};
use crate::model::ProtoPNet;
use crate::training::{finetune_debug, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Forbid,
    Keep,
    Skip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictScope {
    #[default]
    Class,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub prototype: usize,
    pub image: String,
    pub decision: Decision,
    #[serde(default)]
    pub scope: VerdictScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Collecting,
    Finetuning,
    Converged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Images shown per prototype.
    pub top_a: usize,
    pub max_rounds: usize,
    /// Minimum display-patch area; `None` scales the 200 px rule to the image size.
    pub min_patch_area: Option<usize>,
    pub finetune: TrainConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            top_a: 5,
            max_rounds: 8,
            min_patch_area: None,
            finetune: TrainConfig::finetune(),
        }
    }
}

/// One (prototype, image) pair offered for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prototype: usize,
    pub class: usize,
    pub image: String,
    /// 0 for the most activated image.
    pub rank: usize,
    pub activation: f64,
    pub patches: Vec<DisplayPatch>,
    pub cutout: CutOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub timestamp_ms: u128,
    pub round: usize,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSummary {
    pub prototype: usize,
    pub class: usize,
    pub top_image: Option<String>,
    pub top_activation: Option<f64>,
    /// No forbid verdict on the most activated image.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub forbid: usize,
    pub keep: usize,
    pub skip: usize,
    pub prototypes: Vec<PrototypeSummary>,
    /// Evaluation after this round's fine-tune (absent if none ran).
    pub eval_after: Option<EvalResult>,
    pub forget_before: Option<f64>,
    pub forget_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub config: SessionConfig,
    pub converged: bool,
    pub rounds: Vec<RoundReport>,
    pub initial_eval: EvalResult,
    pub final_eval: EvalResult,
    pub forbidden: Vec<Vec<CutOut>>,
    pub valid: Vec<Vec<CutOut>>,
}

/// Counts per class, as reported to clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub round: usize,
    pub status: Status,
    pub forbidden: Vec<usize>,
    pub valid: Vec<usize>,
    pub verdicts_this_round: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebugSession {
    pub config: SessionConfig,
    pub round: usize,
    pub status: Status,
    pub num_classes: usize,
    pub forbidden: Vec<Vec<CutOut>>,
    pub valid: Vec<Vec<CutOut>>,
    pub candidates: Vec<Candidate>,
    pub verdicts: Vec<Verdict>,
    pub log: Vec<LogEntry>,
    pub rounds: Vec<RoundReport>,
    pub initial_eval: Option<EvalResult>,
    pub last_eval: Option<EvalResult>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Concepts for the losses, linked to their source images when `data` has them.
pub fn concept_sets(
    sets: &[Vec<CutOut>],
    grid_width: usize,
    data: Option<&Dataset>,
) -> ConceptSets {
    sets.iter()
        .map(|cs| {
            cs.iter()
                .map(|c| Concept {
                    patches: c.patches.clone(),
                    source: data.and_then(|d| d.find(&c.image_id)).map(|ex| {
                        (
                            ex.pixels.clone(),
                            c.cells.iter().map(|&(i, j)| i * grid_width + j).collect(),
                        )
                    }),
                })
                .collect()
        })
        .collect()
}

impl DebugSession {
    pub fn new(config: SessionConfig, num_classes: usize) -> Self {
        Self {
            config,
            round: 0,
            status: Status::Collecting,
            num_classes,
            forbidden: vec![Vec::new(); num_classes],
            valid: vec![Vec::new(); num_classes],
            candidates: Vec::new(),
            verdicts: Vec::new(),
            log: Vec::new(),
            rounds: Vec::new(),
            initial_eval: None,
            last_eval: None,
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            round: self.round,
            status: self.status,
            forbidden: self.forbidden.iter().map(Vec::len).collect(),
            valid: self.valid.iter().map(Vec::len).collect(),
            verdicts_this_round: self.verdicts.len(),
            candidates: self.candidates.len(),
        }
    }

    pub fn forbidden_sets(&self, model: &ProtoPNet, data: Option<&Dataset>) -> ConceptSets {
        concept_sets(&self.forbidden, model.config.latent_grid().1, data)
    }

    pub fn valid_sets(&self, model: &ProtoPNet, data: Option<&Dataset>) -> ConceptSets {
        concept_sets(&self.valid, model.config.latent_grid().1, data)
    }

    /// Retrieves the top-a training images of every prototype and builds
    /// their display patches and cut-outs.
    pub fn prepare_round(&mut self, model: &ProtoPNet, data: &Dataset) -> Result<()> {
        if self.status != Status::Collecting {
            return Err(Error::Session(format!(
                "cannot prepare a round while {:?}",
                self.status
            )));
        }
        if self.initial_eval.is_none() {
            let e = evaluate(model, &data.test)?;
            self.initial_eval = Some(e.clone());
            self.last_eval = Some(e);
        }
        let [h, w, _] = model.config.input_shape;
        let min_area = self
            .config
            .min_patch_area
            .unwrap_or_else(|| scaled_min_area(h, w));
        let outputs: Vec<_> = data
            .train
            .iter()
            .map(|ex| model.forward(&ex.pixels).map(|o| (ex, o)))
            .collect::<Result<_>>()?;
        let mut candidates = Vec::new();
        for j in 0..model.num_prototypes() {
            let scored: Vec<(usize, f64)> = outputs
                .iter()
                .enumerate()
                .map(|(i, (_, o))| (i, o.activations[j]))
                .collect();
            let ranked = rank_top(
                scored.iter().map(|&(i, a)| (outputs[i].0, a)).collect(),
                self.config.top_a,
            );
            for (rank, (ex, act)) in ranked.into_iter().enumerate() {
                let out = &outputs
                    .iter()
                    .find(|(e, _)| e.id == ex.id)
                    .expect("ranked from outputs")
                    .1;
                let map = attribution_from_record(&model.config, &out.record, j, &ex.id)?;
                let patches = display_patches(&map, min_area);
                let (gh, gw) = out.record.grid;
                let latent = out
                    .patches
                    .reshape(vec![gh, gw, model.config.latent_depth])?;
                let class = model.prototype_class[j];
                let cutout = extract_cutout(&model.config, &map, &latent, Scope::Class(class))?;
                candidates.push(Candidate {
                    prototype: j,
                    class,
                    image: ex.id.clone(),
                    rank,
                    activation: act,
                    patches,
                    cutout,
                });
            }
        }
        self.candidates = candidates;
        self.verdicts.clear();
        Ok(())
    }

    pub fn candidate(&self, prototype: usize, image: &str) -> Option<&Candidate> {
        self.candidates
            .iter()
            .find(|c| c.prototype == prototype && c.image == image)
    }

    /// Records one verdict. Forbid and keep add the candidate's cut-out to
    /// F or V of the prototype's class, or of every class for scope `all`.
    pub fn submit(&mut self, verdict: Verdict) -> Result<SessionSummary> {
        match self.status {
            Status::Collecting => {}
            Status::Finetuning => return Err(Error::Session("fine-tuning in progress".into())),
            Status::Converged => return Err(Error::Session("session has converged".into())),
        }
        let cand = self
            .candidate(verdict.prototype, &verdict.image)
            .ok_or_else(|| {
                Error::Index(format!(
                    "no candidate for prototype {} on image {}",
                    verdict.prototype, verdict.image
                ))
            })?
            .clone();
        if self
            .verdicts
            .iter()
            .any(|v| v.prototype == verdict.prototype && v.image == verdict.image)
        {
            return Err(Error::Session(format!(
                "prototype {} on image {} already judged this round",
                verdict.prototype, verdict.image
            )));
        }
        if verdict.decision != Decision::Skip && cand.patches.is_empty() {
            return Err(Error::Session(
                "candidate has no display patch to judge".into(),
            ));
        }
        let mut cutout = cand.cutout;
        let targets: Vec<usize> = match verdict.scope {
            VerdictScope::Class => vec![cand.class],
            VerdictScope::All => {
                cutout.scope = Scope::All;
                (0..self.num_classes).collect()
            }
        };
        let sets = match verdict.decision {
            Decision::Forbid => Some(&mut self.forbidden),
            Decision::Keep => Some(&mut self.valid),
            Decision::Skip => None,
        };
        if let Some(sets) = sets {
            for y in targets {
                sets[y].push(cutout.clone());
            }
        }
        self.log.push(LogEntry {
            timestamp_ms: now_ms(),
            round: self.round,
            verdict: verdict.clone(),
        });
        self.verdicts.push(verdict);
        Ok(self.summary())
    }

    fn prototype_summaries(&self, num_prototypes: usize) -> Vec<PrototypeSummary> {
        (0..num_prototypes)
            .map(|j| {
                let top = self
                    .candidates
                    .iter()
                    .find(|c| c.prototype == j && c.rank == 0);
                let forbidden_top = top.is_some_and(|t| {
                    self.verdicts.iter().any(|v| {
                        v.prototype == j && v.image == t.image && v.decision == Decision::Forbid
                    })
                });
                PrototypeSummary {
                    prototype: j,
                    class: top.map_or(0, |t| t.class),
                    top_image: top.map(|t| t.image.clone()),
                    top_activation: top.map(|t| t.activation),
                    accepted: !forbidden_top,
                }
            })
            .collect()
    }

    /// Closes verdict collection. Without any forbid verdict the session
    /// converges; otherwise it waits for [`DebugSession::finetune`].
    pub fn finish_collection(&mut self, num_prototypes: usize) -> Result<Status> {
        if self.status != Status::Collecting {
            return Err(Error::Session(format!(
                "cannot finish collection while {:?}",
                self.status
            )));
        }
        let count = |d: Decision| self.verdicts.iter().filter(|v| v.decision == d).count();
        let report = RoundReport {
            round: self.round,
            forbid: count(Decision::Forbid),
            keep: count(Decision::Keep),
            skip: count(Decision::Skip),
            prototypes: self.prototype_summaries(num_prototypes),
            eval_after: None,
            forget_before: None,
            forget_after: None,
        };
        self.status = if report.forbid == 0 {
            Status::Converged
        } else {
            Status::Finetuning
        };
        self.rounds.push(report);
        Ok(self.status)
    }

    /// Runs the fine-tune of the current round and opens the next one.
    pub fn finetune(&mut self, model: &mut ProtoPNet, data: &Dataset) -> Result<TrainReport> {
        if self.status != Status::Finetuning {
            return Err(Error::Session(format!(
                "cannot fine-tune while {:?}",
                self.status
            )));
        }
        let forbidden = self.forbidden_sets(model, Some(data));
        let valid = self.valid_sets(model, Some(data));
        let mut cfg = self.config.finetune.clone();
        cfg.seed = cfg.seed.wrapping_add(self.round as u64);
        let before = crate::losses::forget_loss(model, &forbidden)?;
        let result = finetune_debug(model, &data.train, &data.test, &forbidden, &valid, &cfg);
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                // The round stays open for another attempt.
                self.status = Status::Finetuning;
                return Err(e);
            }
        };
        let after = crate::losses::forget_loss(model, &forbidden)?;
        let eval = evaluate(model, &data.test)?;
        if let Some(r) = self.rounds.last_mut() {
            r.eval_after = Some(eval.clone());
            r.forget_before = Some(before);
            r.forget_after = Some(after);
        }
        self.last_eval = Some(eval);
        self.round += 1;
        self.status = Status::Collecting;
        self.candidates.clear();
        self.verdicts.clear();
        Ok(report)
    }

    pub fn report(&self) -> Result<SessionReport> {
        let initial = self
            .initial_eval
            .clone()
            .ok_or_else(|| Error::Session("no round has been prepared".into()))?;
        Ok(SessionReport {
            config: self.config.clone(),
            converged: self.status == Status::Converged,
            rounds: self.rounds.clone(),
            final_eval: self.last_eval.clone().unwrap_or_else(|| initial.clone()),
            initial_eval: initial,
            forbidden: self.forbidden.clone(),
            valid: self.valid.clone(),
        })
    }

    /// Appends the feedback log as JSON lines.
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for e in &self.log {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Source of verdicts for a round.
pub trait Annotator {
    fn judge(&mut self, candidate: &Candidate, example: &ImageExample) -> Result<Decision>;
}

/// Fraction of the union of `patches` lying inside the mask.
pub fn mask_overlap(patches: &[DisplayPatch], mask: &[u8]) -> f64 {
    let mut union: Vec<usize> = patches
        .iter()
        .flat_map(|p| p.pixels.iter().copied())
        .collect();
    union.sort_unstable();
    union.dedup();
    if union.is_empty() {
        return 0.0;
    }
    let inside = union
        .iter()
        .filter(|&&p| mask.get(p).is_some_and(|&m| m != 0))
        .count();
    inside as f64 / union.len() as f64
}

/// Simulated annotator: a highlighted region that barely touches the object
/// is a confounder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleAnnotator {
    /// Forbid when less than this fraction of the highlighted pixels lies on the object.
    pub overlap_threshold: f64,
    /// Cap on forbid verdicts per class over the whole session.
    pub max_forbid_per_class: Option<usize>,
    /// Judge only each prototype's most activated image.
    pub top_only: bool,
    #[serde(skip)]
    forbids: Vec<usize>,
}

impl Default for OracleAnnotator {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.1,
            max_forbid_per_class: None,
            top_only: false,
            forbids: Vec::new(),
        }
    }
}

impl OracleAnnotator {
    /// At most `n` forbid verdicts per class over the session.
    pub fn with_forbid_budget(mut self, n: usize) -> Self {
        self.max_forbid_per_class = Some(n);
        self
    }

    pub fn decide(&self, patches: &[DisplayPatch], example: &ImageExample) -> Decision {
        match example.mask.as_deref() {
            _ if patches.is_empty() => Decision::Skip,
            None => Decision::Skip,
            Some(m) if mask_overlap(patches, m) < self.overlap_threshold => Decision::Forbid,
            Some(_) => Decision::Keep,
        }
    }
}

impl Annotator for OracleAnnotator {
    fn judge(&mut self, c: &Candidate, example: &ImageExample) -> Result<Decision> {
        if self.top_only && c.rank > 0 {
            return Ok(Decision::Skip);
        }
        let d = self.decide(&c.patches, example);
        if d == Decision::Forbid {
            if self.forbids.len() <= c.class {
                self.forbids.resize(c.class + 1, 0);
            }
            if self
                .max_forbid_per_class
                .is_some_and(|m| self.forbids[c.class] >= m)
            {
                return Ok(Decision::Skip);
            }
            self.forbids[c.class] += 1;
        }
        Ok(d)
    }
}

/// Alternates verdict collection and fine-tuning until a round yields no
/// forbid verdict or `max_rounds` fine-tunes have run.
pub fn run_session(
    model: &mut ProtoPNet,
    data: &Dataset,
    config: SessionConfig,
    annotator: &mut dyn Annotator,
) -> Result<(DebugSession, SessionReport)> {
    let mut session = DebugSession::new(config, model.num_classes());
    drive(&mut session, model, data, annotator)?;
    let report = session.report()?;
    Ok((session, report))
}

/// Continues `session` from its current state.
pub fn drive(
    session: &mut DebugSession,
    model: &mut ProtoPNet,
    data: &Dataset,
    annotator: &mut dyn Annotator,
) -> Result<()> {
    loop {
        match session.status {
            Status::Converged => return Ok(()),
            Status::Finetuning => {
                session.finetune(model, data)?;
            }
            Status::Collecting => {
                if session.round >= session.config.max_rounds {
                    return Ok(());
                }
                if session.candidates.is_empty() {
                    session.prepare_round(model, data)?;
                }
                let pending: Vec<Candidate> = session
                    .candidates
                    .iter()
                    .filter(|c| {
                        !session
                            .verdicts
                            .iter()
                            .any(|v| v.prototype == c.prototype && v.image == c.image)
                    })
                    .cloned()
                    .collect();
                for c in pending {
                    let ex = data
                        .find(&c.image)
                        .ok_or_else(|| Error::Data(format!("unknown image {}", c.image)))?;
                    let decision = annotator.judge(&c, ex)?;
                    session.submit(Verdict {
                        prototype: c.prototype,
                        image: c.image.clone(),
                        decision,
                        scope: VerdictScope::Class,
                    })?;
                }
                session.finish_collection(model.num_prototypes())?;
            }
        }
    }
}
