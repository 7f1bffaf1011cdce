use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Synthetic label encoding the absence of an edge.
pub const NULL_LABEL: &str = "∅";

/// Fallback class for tags unseen in training.
pub const UNK: &str = "<unk>";

/// Bidirectional string index. Serialised as its item list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, idx: usize) -> &str {
        &self.items[idx]
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

/// Dependency labels, optionally with the ∅ class at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    vocab: Vocab,
    null_index: Option<usize>,
}

impl LabelVocabulary {
    /// Builds a sorted vocabulary; `with_null` prepends ∅.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(labels: I, with_null: bool) -> Self {
        let unique: BTreeSet<&str> = labels.into_iter().filter(|l| *l != NULL_LABEL).collect();
        let mut items = Vec::with_capacity(unique.len() + 1);
        if with_null {
            items.push(NULL_LABEL.to_owned());
        }
        items.extend(unique.into_iter().map(str::to_owned));
        LabelVocabulary {
            vocab: items.into(),
            null_index: with_null.then_some(0),
        }
    }

    /// Number of output channels, including ∅ when present.
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn null_index(&self) -> Option<usize> {
        self.null_index
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.vocab.get(label)
    }

    pub fn label(&self, idx: usize) -> &str {
        self.vocab.item(idx)
    }

    pub fn labels(&self) -> &[String] {
        self.vocab.items()
    }
}

/// Tag vocabulary with `<unk>` at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    vocab: Vocab,
}

impl TagVocabulary {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tags: I) -> Self {
        let unique: BTreeSet<&str> = tags.into_iter().filter(|t| *t != UNK).collect();
        let mut items = vec![UNK.to_owned()];
        items.extend(unique.into_iter().map(str::to_owned));
        TagVocabulary { vocab: items.into() }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Index of `tag`, or the `<unk>` class.
    pub fn index(&self, tag: &str) -> usize {
        self.vocab.get(tag).unwrap_or(0)
    }

    pub fn tag(&self, idx: usize) -> &str {
        self.vocab.item(idx)
    }
}
