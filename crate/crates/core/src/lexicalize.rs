//! Delexicalization of enhanced labels such as `obl:at` into placeholders
//! such as `obl:[case]`, and the rule cascade that restores them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;

const DEFAULT_RULES: &str = include_str!("../data/lexrules.toml");

#[derive(Debug, Error)]
pub enum LexError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid rule file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Rules for one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexRuleConfig {
    /// Base relation to the attachment relations that supply its material.
    pub relations: BTreeMap<String, Vec<String>>,
    /// Relation joining multiword markers such as "because of".
    pub fixed: String,
    pub joiner: String,
}

impl Default for LexRuleConfig {
    fn default() -> Self {
        let rel = |base: &str, attach: &[&str]| (base.to_owned(), attach.iter().map(|a| a.to_string()).collect());
        LexRuleConfig {
            relations: [
                rel("obl", &["case"]),
                rel("nmod", &["case"]),
                rel("acl", &["mark", "case"]),
                rel("advcl", &["mark", "case"]),
                rel("conj", &["cc"]),
            ]
            .into(),
            fixed: "fixed".into(),
            joiner: "_".into(),
        }
    }
}

/// Per-language rule tables; `default` applies to unlisted languages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexRules {
    pub languages: BTreeMap<String, LexRuleConfig>,
}

impl LexRules {
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rule file parses")
    }

    pub fn parse(text: &str) -> Result<Self, LexError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self, LexError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn for_language(&self, lang: &str) -> &LexRuleConfig {
        self.languages
            .get(lang)
            .or_else(|| self.languages.get("default"))
            .or_else(|| self.languages.values().next())
            .expect("rule set has at least one language")
    }
}

/// Placeholder label for `base` with material from `attach`.
pub fn placeholder(base: &str, attach: &str) -> String {
    format!("{}:[{}]", base, attach)
}

/// Splits `base:[attach]` into its parts.
pub fn parse_placeholder(label: &str) -> Option<(&str, &str)> {
    let (base, rest) = label.split_once(':')?;
    let attach = rest.strip_prefix('[')?.strip_suffix(']')?;
    Some((base, attach))
}

pub fn is_placeholder(label: &str) -> bool {
    label.contains('[')
}

fn base_of(label: &str) -> &str {
    label.split(':').next().unwrap_or(label)
}

/// Enhanced adjacency of a sentence, indexed by token id (0 = root).
struct Graph {
    dependents: Vec<Vec<(usize, String)>>,
    heads: Vec<Vec<(usize, String)>>,
    forms: Vec<String>,
}

impl Graph {
    fn new(sentence: &Sentence) -> Self {
        let n = sentence.len();
        let mut dependents = vec![Vec::new(); n + 1];
        let mut heads = vec![Vec::new(); n + 1];
        for (h, d, l) in sentence.enhanced_edges() {
            dependents[h].push((d, l.clone()));
            heads[d].push((h, l));
        }
        for list in dependents.iter_mut().chain(heads.iter_mut()) {
            list.sort();
        }
        let mut forms = vec![String::new()];
        forms.extend(sentence.tokens.iter().map(|t| t.form.to_lowercase()));
        Graph {
            dependents,
            heads,
            forms,
        }
    }

    /// Lowercased form of `marker` joined with its fixed dependents.
    fn material(&self, marker: usize, config: &LexRuleConfig) -> String {
        let mut parts = vec![self.forms[marker].clone()];
        for (d, l) in &self.dependents[marker] {
            if base_of(l) == config.fixed && *d > marker {
                parts.push(self.forms[*d].clone());
            }
        }
        parts.join(&config.joiner)
    }

    /// Materials of the dependents of `token` attached via `attach`, leftmost first.
    fn direct(&self, token: usize, attach: &str, config: &LexRuleConfig) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.dependents[token]
            .iter()
            .filter(|(d, l)| base_of(l) == attach && seen.insert(*d))
            .map(|(d, _)| self.material(*d, config))
            .collect()
    }

    /// Tokens linked to `token` by conjunction, in search order: conjunction
    /// heads, own conjuncts, then sibling conjuncts.
    fn conjunction_neighbours(&self, token: usize) -> Vec<usize> {
        let mut order = Vec::new();
        let push = |v: usize, order: &mut Vec<usize>| {
            if v != token && v != 0 && !order.contains(&v) {
                order.push(v);
            }
        };
        let conj_heads: Vec<usize> = self.heads[token]
            .iter()
            .filter(|(_, l)| base_of(l) == "conj")
            .map(|(h, _)| *h)
            .collect();
        for &h in &conj_heads {
            push(h, &mut order);
        }
        for (d, l) in &self.dependents[token] {
            if base_of(l) == "conj" {
                push(*d, &mut order);
            }
        }
        for &h in &conj_heads {
            for (d, l) in &self.dependents[h] {
                if base_of(l) == "conj" {
                    push(*d, &mut order);
                }
            }
        }
        order
    }
}

/// Which cascade step produced a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Direct,
    Conjunction,
    Fallback,
}

/// Rewrites lexicalized labels to placeholders where the material can be
/// traced to an attachment dependent, directly or through a conjunct.
pub fn delexicalize(sentence: &Sentence, config: &LexRuleConfig) -> Sentence {
    let graph = Graph::new(sentence);
    let mut out = sentence.clone();
    for token in &mut out.tokens {
        let id = token.id;
        token.deps = token
            .deps
            .iter()
            .map(|(h, label)| (*h, delex_label(&graph, id, label, config)))
            .collect();
    }
    out
}

fn delex_label(graph: &Graph, token: usize, label: &str, config: &LexRuleConfig) -> String {
    match delex_match(graph, token, label, config) {
        Some((base, attach, _)) => placeholder(base, attach),
        None => label.to_owned(),
    }
}

/// Relation base, attachment and rule by which `label` delexicalizes.
fn delex_match<'a>(
    graph: &Graph,
    token: usize,
    label: &'a str,
    config: &'a LexRuleConfig,
) -> Option<(&'a str, &'a str, Rule)> {
    if is_placeholder(label) {
        return None;
    }
    let (base, lexical) = label.split_once(':')?;
    let attachments = config.relations.get(base)?;
    for attach in attachments {
        if graph.direct(token, attach, config).iter().any(|m| m == lexical) {
            return Some((base, attach, Rule::Direct));
        }
    }
    for attach in attachments {
        for v in graph.conjunction_neighbours(token) {
            if graph.direct(v, attach, config).iter().any(|m| m == lexical) {
                return Some((base, attach, Rule::Conjunction));
            }
        }
    }
    None
}

/// One resolved placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RelexStep {
    pub token: usize,
    pub head: usize,
    pub placeholder: String,
    pub label: String,
    pub rule: Rule,
}

/// Resolves every placeholder and records the rule that resolved it.
pub fn relexicalize_traced(sentence: &Sentence, config: &LexRuleConfig) -> (Sentence, Vec<RelexStep>) {
    let graph = Graph::new(sentence);
    let mut out = sentence.clone();
    let mut trace = Vec::new();
    for token in &mut out.tokens {
        let id = token.id;
        let mut deps = BTreeSet::new();
        for (h, label) in &token.deps {
            let (resolved, rule) = relex_label(&graph, id, label, config);
            if let Some(rule) = rule {
                trace.push(RelexStep {
                    token: id,
                    head: *h,
                    placeholder: label.clone(),
                    label: resolved.clone(),
                    rule,
                });
            }
            deps.insert((*h, resolved));
        }
        token.deps = deps;
    }
    (out, trace)
}

pub fn relexicalize(sentence: &Sentence, config: &LexRuleConfig) -> Sentence {
    relexicalize_traced(sentence, config).0
}

fn relex_label(graph: &Graph, token: usize, label: &str, config: &LexRuleConfig) -> (String, Option<Rule>) {
    let Some((base, attach)) = parse_placeholder(label) else {
        if is_placeholder(label) {
            // Malformed bracket syntax: keep the part before any colon.
            return (base_of(label).to_owned(), Some(Rule::Fallback));
        }
        return (label.to_owned(), None);
    };
    if let Some(m) = graph.direct(token, attach, config).into_iter().next() {
        return (format!("{}:{}", base, m), Some(Rule::Direct));
    }
    for v in graph.conjunction_neighbours(token) {
        if let Some(m) = graph.direct(v, attach, config).into_iter().next() {
            return (format!("{}:{}", base, m), Some(Rule::Conjunction));
        }
    }
    (base.to_owned(), Some(Rule::Fallback))
}

/// A gold label that did not survive delexicalization and relexicalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub sentence: usize,
    pub token: usize,
    pub head: usize,
    pub gold: String,
    pub placeholder: String,
    pub restored: String,
    /// Rule that removed the lexical material.
    pub delex_rule: Rule,
    /// Rule that restored it.
    pub rule: Rule,
}

/// Round-trip statistics of the cascade over gold sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FidelityReport {
    pub edges: usize,
    pub delexicalized: usize,
    pub restored: BTreeMap<Rule, usize>,
    pub divergences: Vec<Divergence>,
    pub labels_before: usize,
    pub labels_after: usize,
}

impl FidelityReport {
    /// Divergent edges whose label was removed by a direct match.
    pub fn direct_divergences(&self) -> usize {
        self.divergences.iter().filter(|d| d.delex_rule == Rule::Direct).count()
    }
}

pub fn fidelity_report(sentences: &[Sentence], config: &LexRuleConfig) -> FidelityReport {
    let mut report = FidelityReport::default();
    let mut before = BTreeSet::new();
    let mut after = BTreeSet::new();
    for (si, gold) in sentences.iter().enumerate() {
        let graph = Graph::new(gold);
        let delex = delexicalize(gold, config);
        let (_, trace) = relexicalize_traced(&delex, config);
        for (g, d) in gold.tokens.iter().zip(&delex.tokens) {
            report.edges += g.deps.len();
            before.extend(g.deps.iter().map(|(_, l)| l.clone()));
            after.extend(d.deps.iter().map(|(_, l)| l.clone()));
            report.delexicalized += d.deps.iter().filter(|(_, l)| is_placeholder(l)).count();
        }
        for step in trace {
            *report.restored.entry(step.rule).or_default() += 1;
            let gold_labels: Vec<(&String, Rule)> = gold.tokens[step.token - 1]
                .deps
                .iter()
                .filter(|(h, _)| *h == step.head)
                .filter_map(|(_, l)| {
                    delex_match(&graph, step.token, l, config)
                        .filter(|(b, a, _)| placeholder(b, a) == step.placeholder)
                        .map(|(_, _, r)| (l, r))
                })
                .collect();
            if !gold_labels.iter().any(|(l, _)| **l == step.label) {
                let (gold_label, delex_rule) = gold_labels
                    .first()
                    .map(|(l, r)| (l.to_string(), *r))
                    .unwrap_or((String::new(), Rule::Fallback));
                report.divergences.push(Divergence {
                    sentence: si + 1,
                    token: step.token,
                    head: step.head,
                    gold: gold_label,
                    placeholder: step.placeholder,
                    restored: step.label,
                    delex_rule,
                    rule: step.rule,
                });
            }
        }
    }
    report.labels_before = before.len();
    report.labels_after = after.len();
    report
}
