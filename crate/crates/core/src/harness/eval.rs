use serde::{Deserialize, Serialize};

use super::config::digest;
use super::train::{feature_cache, FeatureCache};
use crate::data::{encode_choices, EncodeOptions, Example, Task};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vocab::Vocab;

/// Which metrics an evaluation computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Qa,
    Qar,
    Q2ar,
}

impl EvalTask {
    fn needs(self, task: Task) -> bool {
        match self {
            EvalTask::Qa => task == Task::Qa,
            EvalTask::Qar => task == Task::Qar,
            EvalTask::Q2ar => true,
        }
    }
}

impl std::str::FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(EvalTask::Qa),
            "qar" => Ok(EvalTask::Qar),
            "q2ar" => Ok(EvalTask::Q2ar),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Chosen candidates for one question, with the gold indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceLog {
    pub answer: Option<usize>,
    pub rationale: Option<usize>,
    pub correct_answer: usize,
    pub correct_rationale: usize,
}

impl ChoiceLog {
    pub fn answer_right(&self) -> bool {
        self.answer == Some(self.correct_answer)
    }

    pub fn rationale_right(&self) -> bool {
        self.rationale == Some(self.correct_rationale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub qa: Option<f64>,
    pub qar: Option<f64>,
    pub q2ar: Option<f64>,
    pub n: usize,
    pub config_digest: String,
    #[serde(skip)]
    pub choices: Vec<ChoiceLog>,
}

impl EvalReport {
    /// Accuracies from choice logs. Q→AR credits a question only when the
    /// model's own answer and its rationale (given the gold answer) are both right.
    pub fn from_choices(choices: Vec<ChoiceLog>, config_digest: String) -> Self {
        let n = choices.len();
        let frac = |hits: usize| hits as f64 / n.max(1) as f64;
        let has_a = choices.iter().all(|c| c.answer.is_some());
        let has_r = choices.iter().all(|c| c.rationale.is_some());
        let qa = has_a.then(|| frac(choices.iter().filter(|c| c.answer_right()).count()));
        let qar = has_r.then(|| frac(choices.iter().filter(|c| c.rationale_right()).count()));
        let q2ar = (has_a && has_r).then(|| {
            frac(
                choices
                    .iter()
                    .filter(|c| c.answer_right() && c.rationale_right())
                    .count(),
            )
        });
        EvalReport {
            qa,
            qar,
            q2ar,
            n,
            config_digest,
            choices,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Decision margins of the four candidates of `task`. Ranking by margin is
/// ranking by `p(l = 1)`, without the ties a saturated sigmoid would create.
pub fn candidate_margins(
    model: &Model,
    example: &Example,
    task: Task,
    vocab: &Vocab,
    features: Option<&[Vec<f64>]>,
) -> Result<Vec<f64>> {
    let opts = EncodeOptions::for_variant(model.config.variant, model.config.encoder.max_positions);
    encode_choices(&example.record, example.dims(), task, vocab, &opts)?
        .iter()
        .map(|inst| model.margin_value(&inst.input(&example.image, features)))
        .collect()
}

/// The candidate with the highest `p(l = 1)`.
pub fn choose(model: &Model, example: &Example, task: Task, vocab: &Vocab) -> Result<usize> {
    Ok(argmax(&candidate_margins(model, example, task, vocab, None)?))
}

/// Summed margins of every member for each candidate.
fn summed_margins(
    members: &[(&Model, Option<&FeatureCache>)],
    example: &Example,
    index: usize,
    task: Task,
    vocab: &Vocab,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; crate::data::NUM_CHOICES];
    for (model, cache) in members {
        let feats = cache.map(|c| c[index].as_slice());
        let m = candidate_margins(model, example, task, vocab, feats)?;
        total.iter_mut().zip(&m).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

fn evaluate_members(
    members: &[&Model],
    examples: &[Example],
    vocab: &Vocab,
    task: EvalTask,
    config_digest: String,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let caches = members
        .iter()
        .map(|m| feature_cache(m, examples))
        .collect::<Result<Vec<_>>>()?;
    let paired: Vec<(&Model, Option<&FeatureCache>)> = members
        .iter()
        .zip(&caches)
        .map(|(m, c)| (*m, c.as_ref()))
        .collect();
    let mut choices = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let pick = |t: Task| -> Result<Option<usize>> {
            if !task.needs(t) {
                return Ok(None);
            }
            Ok(Some(argmax(&summed_margins(&paired, ex, i, t, vocab)?)))
        };
        let answer = pick(Task::Qa)?;
        let rationale = pick(Task::Qar)?;
        choices.push(ChoiceLog {
            answer,
            rationale,
            correct_answer: ex.record.correct_answer,
            correct_rationale: ex.record.correct_rationale,
        });
    }
    Ok(EvalReport::from_choices(choices, config_digest))
}

/// Q→A, QA→R and Q→AR accuracy of one model.
pub fn evaluate(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    task: EvalTask,
) -> Result<EvalReport> {
    evaluate_members(&[model], examples, vocab, task, digest(&model.config)?)
}

/// Evaluates the sum of the members' class-1 minus class-0 logits.
pub fn ensemble(
    members: &[Model],
    examples: &[Example],
    vocab: &Vocab,
    task: EvalTask,
) -> Result<EvalReport> {
    let first = members
        .first()
        .ok_or_else(|| Error::Checkpoint("ensemble has no members".into()))?;
    for m in &members[1..] {
        first.params.ensure_compatible(&m.params)?;
    }
    let configs: Vec<_> = members.iter().map(|m| &m.config).collect();
    let refs: Vec<&Model> = members.iter().collect();
    evaluate_members(&refs, examples, vocab, task, digest(&configs)?)
}
