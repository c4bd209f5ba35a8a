//! Bookkeeping for human-rated evaluation: ability-tagged questions, A–D
//! ratings, single/multi-turn splits, ability accuracy, and judge score
//! ratios, plus a deterministic report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ability {
    IU,
    VU,
    OCR,
    KTA,
    RA,
    MDA,
}

impl fmt::Display for Ability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuestion {
    pub question_id: String,
    pub image_id: String,
    pub turn_index: u32,
    pub text: String,
    pub required_abilities: BTreeSet<Ability>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rating {
    pub question_id: String,
    pub model_id: String,
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbilityAnnotation {
    pub question_id: String,
    pub model_id: String,
    pub reflected_abilities: BTreeSet<Ability>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgePair {
    pub question_id: String,
    pub model_id: String,
    pub model_score: u32,
    pub reference_score: u32,
}

trait Record {
    fn check(&self) -> std::result::Result<(), String>;
}

impl Record for EvalQuestion {
    fn check(&self) -> std::result::Result<(), String> {
        if self.turn_index == 0 {
            return Err(format!("question {}: turn_index must be ≥ 1", self.question_id));
        }
        if self.required_abilities.is_empty() {
            return Err(format!("question {}: required_abilities is empty", self.question_id));
        }
        Ok(())
    }
}

impl Record for Rating {
    fn check(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl Record for AbilityAnnotation {
    fn check(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl Record for JudgePair {
    fn check(&self) -> std::result::Result<(), String> {
        for (what, s) in [("model_score", self.model_score), ("reference_score", self.reference_score)] {
            if !(1..=10).contains(&s) {
                return Err(format!("question {}: {what} {s} outside 1–10", self.question_id));
            }
        }
        Ok(())
    }
}

#[allow(private_bounds)]
pub fn parse_jsonl<T: DeserializeOwned + Record>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| Error::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.check().map_err(|msg| Error::DataLine { line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

#[allow(private_bounds)]
pub fn load_jsonl<T: DeserializeOwned + Record>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::DataLine { line, msg } => Error::DataLine {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Question ids must be unique.
pub fn check_questions(questions: &[EvalQuestion]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for q in questions {
        if !seen.insert(&q.question_id) {
            return Err(Error::Data(format!("duplicate question id {}", q.question_id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingDistribution {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub a_or_b: usize,
}

impl RatingDistribution {
    pub fn total(&self) -> usize {
        self.a + self.b + self.c + self.d
    }
}

/// Per-grade counts over `questions` for one model; every question must be
/// rated exactly once.
pub fn rating_distribution(questions: &[EvalQuestion], ratings: &[Rating], model_id: &str) -> Result<RatingDistribution> {
    let mut by_q: BTreeMap<&str, Grade> = BTreeMap::new();
    for r in ratings.iter().filter(|r| r.model_id == model_id) {
        if by_q.insert(&r.question_id, r.grade).is_some() {
            return Err(Error::Data(format!(
                "question {} rated twice for model {model_id}",
                r.question_id
            )));
        }
    }
    let missing: Vec<String> = questions
        .iter()
        .filter(|q| !by_q.contains_key(q.question_id.as_str()))
        .map(|q| q.question_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Completeness(missing));
    }
    let mut dist = RatingDistribution::default();
    for q in questions {
        match by_q[q.question_id.as_str()] {
            Grade::A => dist.a += 1,
            Grade::B => dist.b += 1,
            Grade::C => dist.c += 1,
            Grade::D => dist.d += 1,
        }
    }
    dist.a_or_b = dist.a + dist.b;
    Ok(dist)
}

/// `single`: the first question of every image. `multi`: every question of
/// images with more than one question. Both keep input order.
pub fn split_turn_sets(questions: &[EvalQuestion]) -> (Vec<EvalQuestion>, Vec<EvalQuestion>) {
    let mut per_image: BTreeMap<&str, Vec<&EvalQuestion>> = BTreeMap::new();
    for q in questions {
        per_image.entry(&q.image_id).or_default().push(q);
    }
    let firsts: BTreeSet<&str> = per_image
        .values()
        .map(|qs| {
            qs.iter()
                .min_by_key(|q| q.turn_index)
                .expect("groups are non-empty")
                .question_id
                .as_str()
        })
        .collect();
    let single = questions.iter().filter(|q| firsts.contains(q.question_id.as_str())).cloned().collect();
    let multi = questions
        .iter()
        .filter(|q| per_image[q.image_id.as_str()].len() > 1)
        .cloned()
        .collect();
    (single, multi)
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

/// Percentage (one decimal) of questions requiring each ability whose
/// response reflected it. Only abilities tagged on at least one question
/// appear.
pub fn ability_accuracy(
    questions: &[EvalQuestion],
    annotations: &[AbilityAnnotation],
    model_id: &str,
) -> Result<BTreeMap<Ability, f64>> {
    let mut reflected: BTreeMap<&str, &BTreeSet<Ability>> = BTreeMap::new();
    for a in annotations.iter().filter(|a| a.model_id == model_id) {
        if reflected.insert(&a.question_id, &a.reflected_abilities).is_some() {
            return Err(Error::Data(format!(
                "question {} annotated twice for model {model_id}",
                a.question_id
            )));
        }
    }
    let mut missing = Vec::new();
    for q in questions {
        match reflected.get(q.question_id.as_str()) {
            None => missing.push(q.question_id.clone()),
            Some(r) if !r.is_subset(&q.required_abilities) => {
                return Err(Error::Data(format!(
                    "question {}: reflected abilities {:?} exceed required {:?}",
                    q.question_id, r, q.required_abilities
                )))
            }
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(Error::Completeness(missing));
    }
    let mut counts: BTreeMap<Ability, (usize, usize)> = BTreeMap::new();
    for q in questions {
        let r = reflected[q.question_id.as_str()];
        for &a in &q.required_abilities {
            let c = counts.entry(a).or_default();
            c.1 += 1;
            if r.contains(&a) {
                c.0 += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(a, (hit, n))| (a, round_to(100.0 * hit as f64 / n as f64, 1)))
        .collect())
}

/// Accuracy for one ability; an ability no question requires is an error.
pub fn ability_accuracy_for(
    questions: &[EvalQuestion],
    annotations: &[AbilityAnnotation],
    model_id: &str,
    ability: Ability,
) -> Result<f64> {
    ability_accuracy(questions, annotations, model_id)?
        .get(&ability)
        .copied()
        .ok_or_else(|| Error::UndefinedAbility(format!("no question requires {ability}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeTotals {
    pub model_total: u64,
    pub reference_total: u64,
    pub ratio: f64,
}

/// Total scores and `100 · model / reference` to two decimals.
pub fn judge_score_ratio(pairs: &[JudgePair]) -> Result<JudgeTotals> {
    if pairs.is_empty() {
        return Err(Error::Contract("judge score ratio needs at least one pair".into()));
    }
    let model_total: u64 = pairs.iter().map(|p| p.model_score as u64).sum();
    let reference_total: u64 = pairs.iter().map(|p| p.reference_score as u64).sum();
    totals_ratio(model_total, reference_total)
}

pub fn totals_ratio(model_total: u64, reference_total: u64) -> Result<JudgeTotals> {
    if reference_total == 0 {
        return Err(Error::Arithmetic("reference total is zero".into()));
    }
    Ok(JudgeTotals {
        model_total,
        reference_total,
        ratio: round_to(100.0 * model_total as f64 / reference_total as f64, 2),
    })
}

/// Scores a model answer against a reference answer, 1–10 each.
pub trait Judge {
    fn score(&self, question_id: &str, model_id: &str) -> Result<(u32, u32)>;
}

/// Replays recorded judge scores.
pub struct FixtureJudge {
    scores: BTreeMap<(String, String), (u32, u32)>,
}

impl FixtureJudge {
    pub fn new(pairs: &[JudgePair]) -> Self {
        FixtureJudge {
            scores: pairs
                .iter()
                .map(|p| ((p.question_id.clone(), p.model_id.clone()), (p.model_score, p.reference_score)))
                .collect(),
        }
    }
}

impl Judge for FixtureJudge {
    fn score(&self, question_id: &str, model_id: &str) -> Result<(u32, u32)> {
        self.scores
            .get(&(question_id.to_string(), model_id.to_string()))
            .copied()
            .ok_or_else(|| Error::Completeness(vec![question_id.to_string()]))
    }
}

/// Judges every question for a model and aggregates.
pub fn judge_model(judge: &dyn Judge, question_ids: &[String], model_id: &str) -> Result<JudgeTotals> {
    let mut pairs = Vec::with_capacity(question_ids.len());
    for q in question_ids {
        let (m, r) = judge.score(q, model_id)?;
        pairs.push(JudgePair {
            question_id: q.clone(),
            model_id: model_id.to_string(),
            model_score: m,
            reference_score: r,
        });
    }
    judge_score_ratio(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub ratings: RatingDistribution,
    pub single_turn: RatingDistribution,
    pub multi_turn: RatingDistribution,
    pub ability_accuracy: Option<BTreeMap<Ability, f64>>,
    pub judge: Option<JudgeTotals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub questions: usize,
    pub single_turn_questions: usize,
    pub multi_turn_questions: usize,
    pub models: BTreeMap<String, ModelReport>,
}

/// Inputs for [`render_report`]; annotations and judge pairs are optional.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub questions: Vec<EvalQuestion>,
    pub ratings: Vec<Rating>,
    pub annotations: Vec<AbilityAnnotation>,
    pub judge_pairs: Vec<JudgePair>,
}

/// Aggregates for every model that has ratings.
pub fn render_report(inputs: &EvalInputs) -> Result<Report> {
    check_questions(&inputs.questions)?;
    let models: BTreeSet<&str> = inputs.ratings.iter().map(|r| r.model_id.as_str()).collect();
    if models.is_empty() {
        return Err(Error::EmptyReport);
    }
    let (single, multi) = split_turn_sets(&inputs.questions);
    let judge = FixtureJudge::new(&inputs.judge_pairs);
    let mut out = BTreeMap::new();
    for m in models {
        let has_ann = inputs.annotations.iter().any(|a| a.model_id == m);
        let judged: Vec<String> = inputs
            .judge_pairs
            .iter()
            .filter(|p| p.model_id == m)
            .map(|p| p.question_id.clone())
            .collect();
        out.insert(
            m.to_string(),
            ModelReport {
                ratings: rating_distribution(&inputs.questions, &inputs.ratings, m)?,
                single_turn: rating_distribution(&single, &inputs.ratings, m)?,
                multi_turn: rating_distribution(&multi, &inputs.ratings, m)?,
                ability_accuracy: has_ann
                    .then(|| ability_accuracy(&inputs.questions, &inputs.annotations, m))
                    .transpose()?,
                judge: (!judged.is_empty()).then(|| judge_model(&judge, &judged, m)).transpose()?,
            },
        );
    }
    Ok(Report {
        questions: inputs.questions.len(),
        single_turn_questions: single.len(),
        multi_turn_questions: multi.len(),
        models: out,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    /// Plain-text comparison tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "questions: {} (single-turn {}, multi-turn {})\n",
            self.questions, self.single_turn_questions, self.multi_turn_questions
        );
        let sections: [(&str, fn(&ModelReport) -> RatingDistribution); 3] = [
            ("all", |m| m.ratings),
            ("single-turn", |m| m.single_turn),
            ("multi-turn", |m| m.multi_turn),
        ];
        for (title, get) in sections {
            let _ = writeln!(s, "ratings ({title})");
            let _ = writeln!(s, "{:<16} {:>4} {:>4} {:>4} {:>4} {:>5}", "model", "A", "B", "C", "D", "A+B");
            for (name, m) in &self.models {
                let d = get(m);
                let _ = writeln!(s, "{name:<16} {:>4} {:>4} {:>4} {:>4} {:>5}", d.a, d.b, d.c, d.d, d.a_or_b);
            }
            s.push('\n');
        }
        let abilities: BTreeSet<Ability> = self
            .models
            .values()
            .filter_map(|m| m.ability_accuracy.as_ref())
            .flat_map(|a| a.keys().copied())
            .collect();
        if !abilities.is_empty() {
            let _ = write!(s, "ability accuracy (%)\n{:<16}", "model");
            for a in &abilities {
                let _ = write!(s, " {:>6}", a.to_string());
            }
            s.push('\n');
            for (name, m) in &self.models {
                let Some(acc) = &m.ability_accuracy else { continue };
                let _ = write!(s, "{name:<16}");
                for a in &abilities {
                    match acc.get(a) {
                        Some(v) => {
                            let _ = write!(s, " {v:>6.1}");
                        }
                        None => {
                            let _ = write!(s, " {:>6}", "-");
                        }
                    }
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if self.models.values().any(|m| m.judge.is_some()) {
            let _ = writeln!(s, "judge scores\n{:<16} {:>8} {:>10} {:>8}", "model", "total", "reference", "ratio");
            for (name, m) in &self.models {
                if let Some(j) = &m.judge {
                    let _ = writeln!(
                        s,
                        "{name:<16} {:>8} {:>10} {:>7.2}%",
                        j.model_total, j.reference_total, j.ratio
                    );
                }
            }
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.json", self.to_json()), ("report.txt", self.to_text())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Synthetic fixtures shaped like an 82-question, 50-image evaluation set:
/// 30 images with one question and 20 images carrying 52 questions between
/// them (12 with three, 8 with two).
pub mod fixtures {
    use super::*;

    pub fn questions() -> Vec<EvalQuestion> {
        const ALL: [Ability; 6] = [Ability::IU, Ability::VU, Ability::OCR, Ability::KTA, Ability::RA, Ability::MDA];
        let mut out = Vec::new();
        for img in 0..50 {
            let turns = match img {
                0..30 => 1,
                30..42 => 3,
                _ => 2,
            };
            for t in 1..=turns {
                let n = out.len();
                out.push(EvalQuestion {
                    question_id: format!("q{n:03}"),
                    image_id: format!("img{img:02}"),
                    turn_index: t,
                    text: format!("question {n}"),
                    required_abilities: BTreeSet::from([ALL[n % 6], ALL[(n / 6 + 1) % 6]]),
                });
            }
        }
        out
    }

    pub fn ratings(questions: &[EvalQuestion], model_id: &str, grades: impl Fn(usize) -> Grade) -> Vec<Rating> {
        questions
            .iter()
            .enumerate()
            .map(|(i, q)| Rating {
                question_id: q.question_id.clone(),
                model_id: model_id.into(),
                grade: grades(i),
            })
            .collect()
    }
}
