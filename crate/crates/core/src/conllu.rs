//! Reading and writing CoNLL-U files.
//!
//! Both the basic layer (HEAD/DEPREL) and the enhanced layer (DEPS) are
//! kept. Comments, MISC and multiword-token lines are passed through
//! untouched. Empty nodes (decimal ids such as `3.1`) are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConlluError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("sentence ending at line {line}: {message}")]
    InvalidSentence { line: usize, message: String },
}

fn malformed(line: usize, message: impl Into<String>) -> ConlluError {
    ConlluError::Malformed {
        line,
        message: message.into(),
    }
}

/// An enhanced dependency: `head` is 0 for the root.
pub type Dep = (usize, String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    /// `Key=Value` entries in file order; empty for `_`.
    pub feats: Vec<String>,
    pub head: Option<usize>,
    pub deprel: Option<String>,
    pub deps: BTreeSet<Dep>,
    pub misc: String,
}

impl Token {
    pub fn new(id: usize, form: impl Into<String>) -> Self {
        Token {
            id,
            form: form.into(),
            lemma: "_".into(),
            upos: "_".into(),
            xpos: "_".into(),
            feats: Vec::new(),
            head: None,
            deprel: None,
            deps: BTreeSet::new(),
            misc: "_".into(),
        }
    }

    /// FEATS column as written to file.
    pub fn feats_string(&self) -> String {
        if self.feats.is_empty() {
            "_".into()
        } else {
            self.feats.join("|")
        }
    }

    pub fn set_feats_string(&mut self, feats: &str) {
        self.feats = if feats == "_" || feats.is_empty() {
            Vec::new()
        } else {
            feats.split('|').map(str::to_owned).collect()
        };
    }

    /// DEPS column as written to file, sorted by head and then label.
    pub fn deps_string(&self) -> String {
        if self.deps.is_empty() {
            "_".into()
        } else {
            self.deps
                .iter()
                .map(|(h, l)| format!("{}:{}", h, l))
                .collect::<Vec<_>>()
                .join("|")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiwordToken {
    pub start: usize,
    pub end: usize,
    pub form: String,
    pub misc: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sentence {
    /// Comment lines including the leading `#`.
    pub comments: Vec<String>,
    pub tokens: Vec<Token>,
    pub multiword_ranges: Vec<MultiwordToken>,
}

impl Sentence {
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        Sentence {
            tokens,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Heads of the basic layer, if every token has one.
    pub fn heads(&self) -> Option<Vec<usize>> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn has_enhanced(&self) -> bool {
        self.tokens.iter().any(|t| !t.deps.is_empty())
    }

    /// All enhanced edges as `(head, dependent, label)`.
    pub fn enhanced_edges(&self) -> Vec<(usize, usize, String)> {
        self.tokens
            .iter()
            .flat_map(|t| t.deps.iter().map(move |(h, l)| (*h, t.id, l.clone())))
            .collect()
    }

    /// Checks the structural invariants of the sentence.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        for (idx, token) in self.tokens.iter().enumerate() {
            if token.id != idx + 1 {
                return Err(format!(
                    "token ids must be 1..n in order, found {} at position {}",
                    token.id,
                    idx + 1
                ));
            }
            if let Some(head) = token.head {
                if head > n {
                    return Err(format!("head {} of token {} out of range", head, token.id));
                }
            }
            for (head, _) in &token.deps {
                if *head > n {
                    return Err(format!(
                        "enhanced head {} of token {} out of range",
                        head, token.id
                    ));
                }
                if *head == token.id {
                    return Err(format!("enhanced self-loop on token {}", token.id));
                }
            }
        }
        if let Some(heads) = self.heads() {
            check_tree(&heads)?;
        }
        Ok(())
    }
}

/// Checks that 1-based `heads` (0 = root) form a single-rooted tree.
pub fn check_tree(heads: &[usize]) -> Result<(), String> {
    let n = heads.len();
    if n == 0 {
        return Ok(());
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!("expected exactly one root, found {}", roots));
    }
    for (dep, &head) in heads.iter().enumerate() {
        if head > n {
            return Err(format!("head {} out of range", head));
        }
        if head == dep + 1 {
            return Err(format!("token {} is its own head", dep + 1));
        }
    }
    // Walk up from every token; a path longer than n means a cycle.
    for start in 1..=n {
        let mut cur = start;
        let mut steps = 0;
        while cur != 0 {
            cur = heads[cur - 1];
            steps += 1;
            if steps > n {
                return Err(format!("cycle through token {}", start));
            }
        }
    }
    Ok(())
}

fn parse_index(field: &str, line: usize, what: &str) -> Result<usize, ConlluError> {
    field
        .parse::<usize>()
        .map_err(|_| malformed(line, format!("non-integer {}: {:?}", what, field)))
}

fn parse_token(line_no: usize, fields: &[&str]) -> Result<Token, ConlluError> {
    let id = parse_index(fields[0], line_no, "id")?;
    if id == 0 {
        return Err(malformed(line_no, "token id must be at least 1"));
    }
    let head = match fields[6] {
        "_" => None,
        h => Some(parse_index(h, line_no, "head")?),
    };
    let deprel = match fields[7] {
        "_" => None,
        r => Some(r.to_owned()),
    };
    let mut deps = BTreeSet::new();
    if fields[8] != "_" {
        for entry in fields[8].split('|') {
            let (h, label) = entry
                .split_once(':')
                .ok_or_else(|| malformed(line_no, format!("malformed DEPS entry {:?}", entry)))?;
            if h.contains('.') {
                return Err(malformed(
                    line_no,
                    format!("empty-node head {:?} in DEPS is not supported", h),
                ));
            }
            let h = parse_index(h, line_no, "DEPS head")?;
            if label.is_empty() {
                return Err(malformed(line_no, "empty DEPS label"));
            }
            if h == id {
                return Err(malformed(line_no, format!("DEPS self-loop on token {}", id)));
            }
            if !deps.insert((h, label.to_owned())) {
                return Err(malformed(line_no, format!("duplicate DEPS entry {:?}", entry)));
            }
        }
    }
    let mut token = Token {
        id,
        form: fields[1].to_owned(),
        lemma: fields[2].to_owned(),
        upos: fields[3].to_owned(),
        xpos: fields[4].to_owned(),
        feats: Vec::new(),
        head,
        deprel,
        deps,
        misc: fields[9].to_owned(),
    };
    token.set_feats_string(fields[5]);
    Ok(token)
}

fn finish_sentence(
    sentence: Sentence,
    first_line: &[usize],
    end_line: usize,
) -> Result<Sentence, ConlluError> {
    let n = sentence.tokens.len();
    for (token, &line) in sentence.tokens.iter().zip(first_line) {
        if let Some(h) = token.head {
            if h > n {
                return Err(malformed(line, format!("head {} out of range 0..={}", h, n)));
            }
        }
        if let Some((h, _)) = token.deps.iter().find(|(h, _)| *h > n) {
            return Err(malformed(
                line,
                format!("DEPS head {} out of range 0..={}", h, n),
            ));
        }
    }
    sentence
        .validate()
        .map_err(|message| ConlluError::InvalidSentence {
            line: end_line,
            message,
        })?;
    Ok(sentence)
}

/// Reads all sentences from a CoNLL-U stream.
pub fn read_conllu<R: BufRead>(reader: R) -> Result<Vec<Sentence>, ConlluError> {
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    let mut token_lines = Vec::new();
    let mut in_sentence = false;
    let mut line_no = 0;

    for line in reader.lines() {
        let line = line?;
        line_no += 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);

        if line.trim().is_empty() {
            if in_sentence {
                let sentence = std::mem::take(&mut current);
                sentences.push(finish_sentence(sentence, &token_lines, line_no)?);
                token_lines.clear();
                in_sentence = false;
            }
            continue;
        }
        in_sentence = true;

        if line.starts_with('#') {
            if !current.tokens.is_empty() {
                return Err(malformed(line_no, "comment line inside token block"));
            }
            current.comments.push(line.to_owned());
            continue;
        }

        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 10 {
            return Err(malformed(
                line_no,
                format!("expected 10 tab-separated columns, found {}", fields.len()),
            ));
        }

        if fields[0].contains('.') {
            return Err(malformed(
                line_no,
                format!("empty node {:?} is not supported", fields[0]),
            ));
        }

        if let Some((start, end)) = fields[0].split_once('-') {
            let start = parse_index(start, line_no, "range start")?;
            let end = parse_index(end, line_no, "range end")?;
            if start == 0 || end < start {
                return Err(malformed(line_no, format!("invalid range {:?}", fields[0])));
            }
            current.multiword_ranges.push(MultiwordToken {
                start,
                end,
                form: fields[1].to_owned(),
                misc: fields[9].to_owned(),
            });
            continue;
        }

        let token = parse_token(line_no, &fields)?;
        if token.id != current.tokens.len() + 1 {
            return Err(malformed(
                line_no,
                format!(
                    "expected token id {}, found {}",
                    current.tokens.len() + 1,
                    token.id
                ),
            ));
        }
        current.tokens.push(token);
        token_lines.push(line_no);
    }

    if in_sentence {
        sentences.push(finish_sentence(current, &token_lines, line_no)?);
    }

    Ok(sentences)
}

pub fn read_conllu_str(text: &str) -> Result<Vec<Sentence>, ConlluError> {
    read_conllu(text.as_bytes())
}

pub fn read_conllu_file(path: impl AsRef<std::path::Path>) -> Result<Vec<Sentence>, ConlluError> {
    let file = std::fs::File::open(path)?;
    read_conllu(io::BufReader::new(file))
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.form,
            self.lemma,
            self.upos,
            self.xpos,
            self.feats_string(),
            self.head.map_or_else(|| "_".to_owned(), |h| h.to_string()),
            self.deprel.as_deref().unwrap_or("_"),
            self.deps_string(),
            self.misc
        )
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for comment in &self.comments {
            writeln!(f, "{}", comment)?;
        }
        for token in &self.tokens {
            for mwt in self.multiword_ranges.iter().filter(|m| m.start == token.id) {
                writeln!(
                    f,
                    "{}-{}\t{}\t_\t_\t_\t_\t_\t_\t_\t{}",
                    mwt.start, mwt.end, mwt.form, mwt.misc
                )?;
            }
            writeln!(f, "{}", token)?;
        }
        writeln!(f)
    }
}

pub fn write_conllu<W: Write>(sentences: &[Sentence], mut writer: W) -> io::Result<()> {
    for sentence in sentences {
        write!(writer, "{}", sentence)?;
    }
    writer.flush()
}

pub fn to_conllu_string(sentences: &[Sentence]) -> String {
    sentences.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_line() {
        let line = "1\tschool\t_\t_\t_\t_\t2\tobl\t2:obl:at\t_";
        let fields: Vec<&str> = line.split('\t').collect();
        let t = parse_token(1, &fields).unwrap();
        assert_eq!(t.id, 1);
        assert_eq!(t.head, Some(2));
        assert_eq!(t.deprel.as_deref(), Some("obl"));
        assert_eq!(t.deps, BTreeSet::from([(2, "obl:at".to_owned())]));
    }

    #[test]
    fn field_mapping() {
        let text = "1\tat\t_\tADP\t_\t_\t2\tcase\t2:case\t_\n\
                    2\tschool\t_\t_\t_\t_\t0\troot\t0:root\t_\n";
        let s = read_conllu_str(text).unwrap();
        let t = &s[0].tokens[0];
        assert_eq!(t.form, "at");
        assert_eq!(t.upos, "ADP");
        assert_eq!(t.head, Some(2));
        assert_eq!(t.deprel.as_deref(), Some("case"));
        assert!(t.deps.contains(&(2, "case".to_owned())));
    }

    #[test]
    fn empty_input() {
        assert!(read_conllu_str("").unwrap().is_empty());
        assert!(read_conllu_str("\n\n").unwrap().is_empty());
    }

    #[test]
    fn deps_sorted_on_output() {
        let mut t = Token::new(1, "x");
        t.deps.insert((4, "conj:or".into()));
        t.deps.insert((2, "obl:at".into()));
        assert_eq!(t.deps_string(), "2:obl:at|4:conj:or");
        assert_eq!(Token::new(1, "y").deps_string(), "_");
    }

    #[test]
    fn rejects_wrong_column_count() {
        let err = read_conllu_str("1\tx\t_\n").unwrap_err();
        assert!(matches!(err, ConlluError::Malformed { line: 1, .. }));
    }

    #[test]
    fn rejects_empty_nodes() {
        let text = "1\ta\t_\t_\t_\t_\t0\troot\t0:root\t_\n\
                    1.1\tb\t_\t_\t_\t_\t_\t_\t1:dep\t_\n";
        let err = read_conllu_str(text).unwrap_err();
        assert!(matches!(err, ConlluError::Malformed { line: 2, .. }));
    }

    #[test]
    fn rejects_head_out_of_range() {
        let text = "# c\n1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n2\tb\t_\t_\t_\t_\t7\tdep\t_\t_\n";
        match read_conllu_str(text).unwrap_err() {
            ConlluError::Malformed { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {:?}", e),
        }
    }

    #[test]
    fn rejects_non_integer_head() {
        let text = "1\ta\t_\t_\t_\t_\tx\troot\t_\t_\n";
        assert!(matches!(
            read_conllu_str(text).unwrap_err(),
            ConlluError::Malformed { line: 1, .. }
        ));
    }

    #[test]
    fn rejects_cycles_and_multiple_roots() {
        let cyclic = "1\ta\t_\t_\t_\t_\t2\tdep\t_\t_\n\
                      2\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n\
                      3\tc\t_\t_\t_\t_\t0\troot\t_\t_\n";
        assert!(matches!(
            read_conllu_str(cyclic).unwrap_err(),
            ConlluError::InvalidSentence { .. }
        ));
        let two_roots = "1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n\
                         2\tb\t_\t_\t_\t_\t0\troot\t_\t_\n";
        assert!(read_conllu_str(two_roots).is_err());
    }

    #[test]
    fn rejects_deps_self_loop_and_duplicates() {
        let self_loop = "1\ta\t_\t_\t_\t_\t0\troot\t1:dep\t_\n";
        assert!(read_conllu_str(self_loop).is_err());
        let dup = "1\ta\t_\t_\t_\t_\t0\troot\t0:root|0:root\t_\n";
        assert!(read_conllu_str(dup).is_err());
    }

    #[test]
    fn multiword_and_comments_round_trip() {
        let text = "# sent_id = 1\n# text = don't go\n\
                    1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\tSpaceAfter=No\n\
                    1\tdo\tdo\tAUX\t_\tMood=Ind|VerbForm=Fin\t3\taux\t3:aux\t_\n\
                    2\tn't\tnot\tPART\t_\t_\t3\tadvmod\t3:advmod\t_\n\
                    3\tgo\tgo\tVERB\t_\t_\t0\troot\t0:root\t_\n\n";
        let parsed = read_conllu_str(text).unwrap();
        assert_eq!(parsed[0].multiword_ranges.len(), 1);
        assert_eq!(to_conllu_string(&parsed), text);
    }

    #[test]
    fn missing_final_blank_line() {
        let text = "1\ta\t_\t_\t_\t_\t0\troot\t_\t_";
        assert_eq!(read_conllu_str(text).unwrap().len(), 1);
    }
}
