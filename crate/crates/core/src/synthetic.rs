//! Deterministic generator of small English-like treebanks with UPOS,
//! features, basic trees and enhanced graphs.
//!
//! Enhanced graphs follow the usual English conventions: oblique, nominal
//! modifier, adverbial clause and conjunct relations carry their case, mark
//! or coordinator as a subtype, and shared dependents of coordinations are
//! propagated to every conjunct.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conllu::{Sentence, Token};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub seed: u64,
    /// Probability of coordinating a noun phrase.
    pub coordination: f64,
    /// Probability of an oblique prepositional phrase.
    pub oblique: f64,
    /// Probability of a subordinate clause.
    pub clause: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 100,
            seed: 0,
            coordination: 0.3,
            oblique: 0.6,
            clause: 0.2,
        }
    }
}

struct Noun(&'static str, &'static str);
struct Verb {
    lemma: &'static str,
    pres3: &'static str,
    past: &'static str,
    transitive: bool,
}

const NOUNS: &[Noun] = &[
    Noun("dog", "dogs"),
    Noun("cat", "cats"),
    Noun("student", "students"),
    Noun("teacher", "teachers"),
    Noun("school", "schools"),
    Noun("park", "parks"),
    Noun("house", "houses"),
    Noun("book", "books"),
    Noun("letter", "letters"),
    Noun("city", "cities"),
    Noun("river", "rivers"),
    Noun("garden", "gardens"),
    Noun("friend", "friends"),
    Noun("child", "children"),
    Noun("table", "tables"),
    Noun("rain", "rains"),
];

/// Lemmas used both as nouns and as verbs.
const AMBIGUOUS: &[(Noun, Verb)] = &[
    (
        Noun("walk", "walks"),
        Verb {
            lemma: "walk",
            pres3: "walks",
            past: "walked",
            transitive: false,
        },
    ),
    (
        Noun("work", "works"),
        Verb {
            lemma: "work",
            pres3: "works",
            past: "worked",
            transitive: false,
        },
    ),
    (
        Noun("plan", "plans"),
        Verb {
            lemma: "plan",
            pres3: "plans",
            past: "planned",
            transitive: true,
        },
    ),
    (
        Noun("watch", "watches"),
        Verb {
            lemma: "watch",
            pres3: "watches",
            past: "watched",
            transitive: true,
        },
    ),
    (
        Noun("fish", "fish"),
        Verb {
            lemma: "fish",
            pres3: "fishes",
            past: "fished",
            transitive: false,
        },
    ),
];

const VERBS: &[Verb] = &[
    Verb {
        lemma: "see",
        pres3: "sees",
        past: "saw",
        transitive: true,
    },
    Verb {
        lemma: "read",
        pres3: "reads",
        past: "read",
        transitive: true,
    },
    Verb {
        lemma: "write",
        pres3: "writes",
        past: "wrote",
        transitive: true,
    },
    Verb {
        lemma: "find",
        pres3: "finds",
        past: "found",
        transitive: true,
    },
    Verb {
        lemma: "sleep",
        pres3: "sleeps",
        past: "slept",
        transitive: false,
    },
    Verb {
        lemma: "arrive",
        pres3: "arrives",
        past: "arrived",
        transitive: false,
    },
    Verb {
        lemma: "stay",
        pres3: "stays",
        past: "stayed",
        transitive: false,
    },
];

const ADJECTIVES: &[&str] = &["big", "small", "old", "red", "happy", "quiet"];
const ADVERBS: &[&str] = &["often", "today", "quickly", "again"];
const PREPOSITIONS: &[&str] = &["at", "in", "near", "with", "from"];
const COORDINATORS: &[&str] = &["and", "or"];
const SUBORDINATORS: &[&str] = &["because", "while", "when"];
const PRONOUNS: &[(&str, &str)] = &[
    ("he", "Case=Nom|Gender=Masc|Number=Sing|Person=3|PronType=Prs"),
    ("she", "Case=Nom|Gender=Fem|Number=Sing|Person=3|PronType=Prs"),
    ("they", "Case=Nom|Number=Plur|Person=3|PronType=Prs"),
];

struct Node {
    form: String,
    lemma: String,
    upos: &'static str,
    feats: String,
    head: usize,
    deprel: String,
    extra: Vec<(usize, String)>,
}

#[derive(Clone, Copy)]
struct Phrase {
    head: usize,
    plural: bool,
}

struct Builder<'a, R> {
    nodes: Vec<Node>,
    rng: &'a mut R,
    config: &'a SyntheticConfig,
}

impl<'a, R: Rng> Builder<'a, R> {
    fn push(&mut self, form: &str, lemma: &str, upos: &'static str, feats: &str) -> usize {
        self.nodes.push(Node {
            form: form.into(),
            lemma: lemma.into(),
            upos,
            feats: feats.into(),
            head: 0,
            deprel: String::new(),
            extra: Vec::new(),
        });
        self.nodes.len()
    }

    fn attach(&mut self, dep: usize, head: usize, rel: &str) {
        let node = &mut self.nodes[dep - 1];
        node.head = head;
        node.deprel = rel.into();
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn noun_entry(&mut self) -> (&'static str, &'static str) {
        if self.chance(0.2) {
            let (n, _) = AMBIGUOUS.choose(self.rng).expect("non-empty");
            (n.0, n.1)
        } else {
            let n = NOUNS.choose(self.rng).expect("non-empty");
            (n.0, n.1)
        }
    }

    /// Determiner, adjectives and a noun; optionally a nominal modifier.
    fn simple_np(&mut self, allow_nmod: bool) -> Phrase {
        let (lemma, plural_form) = self.noun_entry();
        let plural = self.chance(0.35);
        let det = if plural {
            if self.chance(0.5) {
                Some(("the", "Definite=Def|PronType=Art"))
            } else {
                None
            }
        } else if self.chance(0.6) {
            Some(("the", "Definite=Def|PronType=Art"))
        } else {
            Some(("a", "Definite=Ind|PronType=Art"))
        };
        let det = det.map(|(f, feats)| self.push(f, f, "DET", feats));
        let adj = if self.chance(0.3) {
            let a = *ADJECTIVES.choose(self.rng).expect("non-empty");
            Some(self.push(a, a, "ADJ", "Degree=Pos"))
        } else {
            None
        };
        let (form, feats) = if plural {
            (plural_form, "Number=Plur")
        } else {
            (lemma, "Number=Sing")
        };
        let noun = self.push(form, lemma, "NOUN", feats);
        if let Some(d) = det {
            self.attach(d, noun, "det");
        }
        if let Some(a) = adj {
            self.attach(a, noun, "amod");
        }
        if allow_nmod && self.chance(0.15) {
            let p = self.pp(false);
            self.attach(p.head, noun, "nmod");
        }
        Phrase { head: noun, plural }
    }

    /// A noun phrase, possibly coordinated. Returns the first conjunct and
    /// the later conjuncts.
    fn np(&mut self, allow_nmod: bool) -> (Phrase, Vec<usize>) {
        let first = self.simple_np(allow_nmod);
        let mut conjuncts = Vec::new();
        if self.chance(self.config.coordination) {
            let c = *COORDINATORS.choose(self.rng).expect("non-empty");
            let cc = self.push(c, c, "CCONJ", "_");
            let second = self.simple_np(false);
            self.attach(cc, second.head, "cc");
            self.attach(second.head, first.head, "conj");
            conjuncts.push(second.head);
        }
        let plural = first.plural || !conjuncts.is_empty();
        (
            Phrase {
                head: first.head,
                plural,
            },
            conjuncts,
        )
    }

    /// Preposition plus noun phrase; the caller attaches the noun.
    fn pp(&mut self, allow_coordination: bool) -> Phrase {
        let fixed = self.chance(0.12);
        let case = if fixed {
            let b = self.push("because", "because", "ADP", "_");
            let of = self.push("of", "of", "ADP", "_");
            self.attach(of, b, "fixed");
            b
        } else {
            let p = *PREPOSITIONS.choose(self.rng).expect("non-empty");
            self.push(p, p, "ADP", "_")
        };
        let (np, conjuncts) = if allow_coordination {
            self.np(false)
        } else {
            (self.simple_np(false), Vec::new())
        };
        self.attach(case, np.head, "case");
        for c in conjuncts {
            self.nodes[c - 1].extra.push((usize::MAX, "shared".into()));
        }
        np
    }

    fn subject(&mut self) -> (Phrase, Vec<usize>) {
        if self.chance(0.25) {
            let (p, feats) = *PRONOUNS.choose(self.rng).expect("non-empty");
            let id = self.push(p, p, "PRON", feats);
            (
                Phrase {
                    head: id,
                    plural: p == "they",
                },
                Vec::new(),
            )
        } else {
            self.np(true)
        }
    }

    fn verb_entry(&mut self) -> &'static Verb {
        if self.chance(0.25) {
            &AMBIGUOUS.choose(self.rng).expect("non-empty").1
        } else {
            VERBS.choose(self.rng).expect("non-empty")
        }
    }

    /// Subject, verb, object, adverb and obliques. Returns the verb.
    fn clause(&mut self, depth: usize) -> usize {
        let (subj, subj_conj) = self.subject();
        let verb = self.verb_entry();
        let aux = if self.chance(0.2) {
            Some(self.push("will", "will", "AUX", "VerbForm=Fin"))
        } else {
            None
        };
        let (form, feats) = if aux.is_some() {
            (verb.lemma, "VerbForm=Inf")
        } else if self.chance(0.5) {
            (verb.past, "Mood=Ind|Tense=Past|VerbForm=Fin")
        } else if subj.plural {
            (verb.lemma, "Mood=Ind|Tense=Pres|VerbForm=Fin")
        } else {
            (verb.pres3, "Mood=Ind|Number=Sing|Person=3|Tense=Pres|VerbForm=Fin")
        };
        let v = self.push(form, verb.lemma, "VERB", feats);
        self.attach(subj.head, v, "nsubj");
        for &c in &subj_conj {
            self.nodes[c - 1].extra.push((v, "nsubj".into()));
        }
        if let Some(a) = aux {
            self.attach(a, v, "aux");
        }
        if verb.transitive {
            let (obj, conj) = self.np(true);
            self.attach(obj.head, v, "obj");
            for c in conj {
                self.nodes[c - 1].extra.push((v, "obj".into()));
            }
        }
        if self.chance(0.2) {
            let a = *ADVERBS.choose(self.rng).expect("non-empty");
            let adv = self.push(a, a, "ADV", "_");
            self.attach(adv, v, "advmod");
        }
        if self.chance(self.config.oblique) {
            let start = self.nodes.len();
            let obl = self.pp(true);
            self.attach(obl.head, v, "obl");
            self.resolve_shared(start, v, obl.head);
        }
        if depth == 0 && self.chance(self.config.clause) {
            let s = *SUBORDINATORS.choose(self.rng).expect("non-empty");
            let mark = self.push(s, s, "SCONJ", "_");
            let inner = self.clause(depth + 1);
            self.attach(mark, inner, "mark");
            self.attach(inner, v, "advcl");
        }
        v
    }

    /// Gives conjuncts created since `start` a copy of the oblique relation.
    fn resolve_shared(&mut self, start: usize, head: usize, first: usize) {
        for node in &mut self.nodes[start..] {
            for e in node.extra.iter_mut() {
                if e.0 == usize::MAX {
                    *e = (head, format!("obl@{}", first));
                }
            }
        }
    }

    /// Subtype of a relation from its marker dependents, if any.
    fn material(&self, id: usize, markers: &[&str]) -> Option<String> {
        for m in markers {
            let found = self
                .nodes
                .iter()
                .enumerate()
                .find(|(_, n)| n.head == id && n.deprel == *m)
                .map(|(i, _)| i + 1);
            if let Some(marker) = found {
                let mut parts = vec![self.nodes[marker - 1].form.to_lowercase()];
                for (i, n) in self.nodes.iter().enumerate() {
                    if n.head == marker && n.deprel == "fixed" && i + 1 > marker {
                        parts.push(n.form.to_lowercase());
                    }
                }
                return Some(parts.join("_"));
            }
        }
        None
    }

    fn enhanced_label(&self, id: usize) -> String {
        let node = &self.nodes[id - 1];
        let markers: &[&str] = match node.deprel.as_str() {
            "obl" | "nmod" => &["case"],
            "advcl" => &["mark", "case"],
            "conj" => &["cc"],
            _ => &[],
        };
        match self.material(id, markers) {
            Some(m) => format!("{}:{}", node.deprel, m),
            None => node.deprel.clone(),
        }
    }

    fn finish(mut self, root: usize, index: usize) -> Sentence {
        let punct = self.push(".", ".", "PUNCT", "_");
        self.attach(punct, root, "punct");
        self.nodes[root - 1].deprel = "root".into();
        let mut tokens = Vec::with_capacity(self.nodes.len());
        for id in 1..=self.nodes.len() {
            let node = &self.nodes[id - 1];
            let mut t = Token::new(id, node.form.clone());
            t.lemma = node.lemma.clone();
            t.upos = node.upos.into();
            t.set_feats_string(&node.feats);
            t.head = Some(node.head);
            t.deprel = Some(node.deprel.clone());
            t.deps.insert((node.head, self.enhanced_label(id)));
            for (h, rel) in &node.extra {
                let rel = match rel.strip_prefix("obl@") {
                    Some(first) => self.enhanced_label(first.parse().expect("index")),
                    None => rel.clone(),
                };
                t.deps.insert((*h, rel));
            }
            tokens.push(t);
        }
        let mut s = Sentence::from_tokens(tokens);
        let text: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
        s.comments = vec![
            format!("# sent_id = synthetic-{}", index + 1),
            format!("# text = {}", text.join(" ")),
        ];
        s
    }
}

/// Generates `config.sentences` sentences; the same config always yields
/// the same corpus.
pub fn generate(config: &SyntheticConfig) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.sentences)
        .map(|i| {
            let mut b = Builder {
                nodes: Vec::new(),
                rng: &mut rng,
                config,
            };
            let root = b.clause(0);
            b.finish(root, i)
        })
        .collect()
}
