//! Attachment, enhanced-graph and tagging metrics in gold-tokenization mode,
//! following the conventions of the CoNLL 2018 and IWPT 2020 evaluation
//! scripts.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::conllu::Sentence;

/// Features kept by the official script when scoring UFeats.
pub const UNIVERSAL_FEATURES: &[&str] = &[
    "PronType", "NumType", "Poss", "Reflex", "Foreign", "Abbr", "Gender", "Animacy", "Number", "Case", "Definite",
    "Degree", "VerbForm", "Mood", "Tense", "Aspect", "Voice", "Evident", "Polarity", "Person", "Polite",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("gold has {gold} sentences, system has {system}")]
    SentenceCount { gold: usize, system: usize },

    #[error("sentence {sentence}: gold has {gold} tokens, system has {system}")]
    TokenCount { sentence: usize, gold: usize, system: usize },

    #[error("sentence {sentence}, token {token}: gold form {gold:?} differs from system form {system:?}")]
    Form {
        sentence: usize,
        token: usize,
        gold: String,
        system: String,
    },
}

/// Counts and derived values for one metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Score {
    pub gold: usize,
    pub system: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    pub fn from_counts(gold: usize, system: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, system);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Score {
            gold,
            system,
            correct,
            precision,
            recall,
            f1,
        }
    }

    /// Accuracy over aligned tokens.
    pub fn accuracy(&self) -> f64 {
        self.recall
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Metric {
    #[serde(rename = "UPOS")]
    Upos,
    #[serde(rename = "UFeats")]
    Ufeats,
    #[serde(rename = "UAS")]
    Uas,
    #[serde(rename = "LAS")]
    Las,
    #[serde(rename = "EULAS")]
    Eulas,
    #[serde(rename = "ELAS")]
    Elas,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Upos => "UPOS",
            Metric::Ufeats => "UFeats",
            Metric::Uas => "UAS",
            Metric::Las => "LAS",
            Metric::Eulas => "EULAS",
            Metric::Elas => "ELAS",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<Metric, Score>,
}

#[derive(Serialize)]
struct Record<'a> {
    metric: &'static str,
    #[serde(flatten)]
    score: &'a Score,
}

impl EvalReport {
    pub fn get(&self, metric: Metric) -> Option<&Score> {
        self.metrics.get(&metric)
    }

    /// F1 (or accuracy) of `metric`, zero when absent.
    pub fn value(&self, metric: Metric) -> f64 {
        self.get(metric).map_or(0.0, |s| s.f1)
    }

    /// One JSON object per line, one line per metric.
    pub fn to_json_lines(&self) -> String {
        self.metrics
            .iter()
            .map(|(m, s)| serde_json::to_string(&Record { metric: m.name(), score: s }).expect("serializable") + "\n")
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Metric     | Precision |    Recall |  F1 Score")?;
        writeln!(f, "-----------+-----------+-----------+-----------")?;
        for (m, s) in &self.metrics {
            writeln!(
                f,
                "{:<11}|{:>10.2} |{:>10.2} |{:>10.2}",
                m.name(),
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1
            )?;
        }
        Ok(())
    }
}

fn align(gold: &[Sentence], system: &[Sentence]) -> Result<(), EvalError> {
    if gold.len() != system.len() {
        return Err(EvalError::SentenceCount {
            gold: gold.len(),
            system: system.len(),
        });
    }
    for (i, (g, s)) in gold.iter().zip(system).enumerate() {
        if g.len() != s.len() {
            return Err(EvalError::TokenCount {
                sentence: i + 1,
                gold: g.len(),
                system: s.len(),
            });
        }
        for (gt, st) in g.tokens.iter().zip(&s.tokens) {
            if gt.form != st.form {
                return Err(EvalError::Form {
                    sentence: i + 1,
                    token: gt.id,
                    gold: gt.form.clone(),
                    system: st.form.clone(),
                });
            }
        }
    }
    Ok(())
}

fn universal_relation(label: &str) -> &str {
    label.split(':').next().unwrap_or(label)
}

fn token_pairs<'a>(gold: &'a [Sentence], system: &'a [Sentence]) -> impl Iterator<Item = (&'a crate::conllu::Token, &'a crate::conllu::Token)> {
    gold.iter().zip(system).flat_map(|(g, s)| g.tokens.iter().zip(&s.tokens))
}

/// UAS and LAS. Labels are compared on their universal part.
pub fn score_basic(gold: &[Sentence], system: &[Sentence]) -> Result<(Score, Score), EvalError> {
    align(gold, system)?;
    let (mut total, mut uas, mut las) = (0, 0, 0);
    for (g, s) in token_pairs(gold, system) {
        total += 1;
        if g.head.is_some() && g.head == s.head {
            uas += 1;
            let gl = g.deprel.as_deref().map(universal_relation);
            let sl = s.deprel.as_deref().map(universal_relation);
            if gl.is_some() && gl == sl {
                las += 1;
            }
        }
    }
    Ok((
        Score::from_counts(total, total, uas),
        Score::from_counts(total, total, las),
    ))
}

fn multiset_f1(gold: &BTreeMap<(usize, usize, usize, String), usize>, system: &BTreeMap<(usize, usize, usize, String), usize>) -> Score {
    let g: usize = gold.values().sum();
    let s: usize = system.values().sum();
    let correct = gold
        .iter()
        .map(|(k, &c)| c.min(system.get(k).copied().unwrap_or(0)))
        .sum();
    Score::from_counts(g, s, correct)
}

/// EULAS and ELAS: F1 over `(dependent, head, label)` triples, with EULAS
/// truncating labels at the first colon.
pub fn score_enhanced(gold: &[Sentence], system: &[Sentence]) -> Result<(Score, Score), EvalError> {
    align(gold, system)?;
    type Bag = BTreeMap<(usize, usize, usize, String), usize>;
    let collect = |sents: &[Sentence], truncate: bool| {
        let mut bag = Bag::new();
        for (i, s) in sents.iter().enumerate() {
            for (h, d, l) in s.enhanced_edges() {
                let l = if truncate { universal_relation(&l).to_owned() } else { l };
                *bag.entry((i, d, h, l)).or_default() += 1;
            }
        }
        bag
    };
    let eulas = multiset_f1(&collect(gold, true), &collect(system, true));
    let elas = multiset_f1(&collect(gold, false), &collect(system, false));
    Ok((eulas, elas))
}

/// Universal features of a FEATS bundle in canonical order.
pub fn universal_feats(feats: &[String]) -> Vec<&str> {
    let mut kept: Vec<&str> = feats
        .iter()
        .map(String::as_str)
        .filter(|f| UNIVERSAL_FEATURES.contains(&f.split('=').next().unwrap_or(f)))
        .collect();
    kept.sort_unstable();
    kept
}

/// UPOS and UFeats accuracy.
pub fn score_tags(gold: &[Sentence], system: &[Sentence]) -> Result<(Score, Score), EvalError> {
    align(gold, system)?;
    let (mut total, mut upos, mut feats) = (0, 0, 0);
    for (g, s) in token_pairs(gold, system) {
        total += 1;
        upos += usize::from(g.upos == s.upos);
        feats += usize::from(universal_feats(&g.feats) == universal_feats(&s.feats));
    }
    Ok((
        Score::from_counts(total, total, upos),
        Score::from_counts(total, total, feats),
    ))
}

/// Every metric the gold annotation supports.
pub fn evaluate(gold: &[Sentence], system: &[Sentence]) -> Result<EvalReport, EvalError> {
    align(gold, system)?;
    let mut report = EvalReport::default();
    let (upos, feats) = score_tags(gold, system)?;
    report.metrics.insert(Metric::Upos, upos);
    report.metrics.insert(Metric::Ufeats, feats);
    let has_basic = gold.iter().flat_map(|s| &s.tokens).any(|t| t.head.is_some());
    if has_basic {
        let (uas, las) = score_basic(gold, system)?;
        report.metrics.insert(Metric::Uas, uas);
        report.metrics.insert(Metric::Las, las);
    }
    if gold.iter().any(Sentence::has_enhanced) {
        let (eulas, elas) = score_enhanced(gold, system)?;
        report.metrics.insert(Metric::Eulas, eulas);
        report.metrics.insert(Metric::Elas, elas);
    }
    Ok(report)
}
