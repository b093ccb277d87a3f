//! Rule-based cross-sentence coreference between a source sentence and its
//! context sentences.
//!
//! Mentions come from a closed pronoun set and a noun-chunk grammar
//! (`DET? ADJ* NOUN+`) over a small POS lexicon. A source pronoun links to the
//! most recent compatible nominal in the contexts (nearest sentence first,
//! rightmost mention within a sentence); a source nominal links to every
//! context nominal with the same head noun.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{extract_examples, ContextualExample, CorpusFormat, Document};
use crate::error::{Error, Result};
use crate::synthgen::{Gender, Lexicon};

const DEFAULT_RULES: &str = include_str!("../data/rules.jsonl");

pub const DEFAULT_PRONOUNS: [&str; 11] = [
    "it", "he", "she", "they", "him", "her", "them", "its", "his", "this", "that",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Noun,
    Det,
    Adj,
    Pron,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Number {
    #[serde(rename = "SG")]
    Singular,
    #[serde(rename = "PL")]
    Plural,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexEntry {
    pub token: String,
    pub pos: Pos,
    pub number: Option<Number>,
    pub gender: Option<Gender>,
}

#[derive(Clone, Debug)]
pub struct RuleSet {
    entries: HashMap<String, LexEntry>,
    pronouns: BTreeSet<String>,
    case_sensitive: bool,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet::parse(DEFAULT_RULES.as_bytes(), "builtin rules").expect("builtin rule lexicon parses")
    }
}

impl RuleSet {
    pub fn parse<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let err = |msg: String| Error::Format {
                path: name.to_string(),
                line: i + 1,
                msg,
            };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: LexEntry = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            entries.insert(e.token.clone(), e);
        }
        Ok(RuleSet {
            entries,
            pronouns: DEFAULT_PRONOUNS.iter().map(|s| s.to_string()).collect(),
            case_sensitive: false,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f), &path.display().to_string())
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut toks: Vec<&String> = self.entries.keys().collect();
        toks.sort();
        for t in toks {
            serde_json::to_writer(&mut out, &self.entries[t])?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn with_pronouns<I: IntoIterator<Item = S>, S: Into<String>>(mut self, pronouns: I) -> Self {
        self.pronouns = pronouns.into_iter().map(Into::into).collect();
        self
    }

    pub fn case_sensitive(mut self, yes: bool) -> Self {
        self.case_sensitive = yes;
        self
    }

    pub fn insert(&mut self, entry: LexEntry) {
        self.entries.insert(entry.token.clone(), entry);
    }

    /// Adds the source side of a synthetic lexicon: nouns (singular, no
    /// natural gender), adjectives and the determiner.
    pub fn extend_from_lexicon(&mut self, lex: &Lexicon) {
        for n in &lex.nouns {
            self.insert(LexEntry {
                token: n.source.clone(),
                pos: Pos::Noun,
                number: Some(Number::Singular),
                gender: None,
            });
        }
        for a in &lex.adjectives {
            self.insert(LexEntry {
                token: a.source.clone(),
                pos: Pos::Adj,
                number: None,
                gender: None,
            });
        }
        self.insert(LexEntry {
            token: lex.determiner.source.clone(),
            pos: Pos::Det,
            number: None,
            gender: None,
        });
    }

    /// Nominal lexicon tokens, sorted. Used as the default replacement pool.
    pub fn nouns(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .entries
            .values()
            .filter(|e| e.pos == Pos::Noun)
            .map(|e| e.token.clone())
            .collect();
        v.sort();
        v
    }

    fn norm<'a>(&self, tok: &'a str) -> std::borrow::Cow<'a, str> {
        if self.case_sensitive {
            tok.into()
        } else {
            tok.to_lowercase().into()
        }
    }

    fn pos(&self, tok: &str) -> Pos {
        let t = self.norm(tok);
        match self.entries.get(t.as_ref()) {
            Some(e) => e.pos,
            None if self.pronouns.contains(t.as_ref()) => Pos::Pron,
            None if self.singular_of(t.as_ref()).is_some() => Pos::Noun,
            None => Pos::Other,
        }
    }

    /// Lexicon noun that `tok` is a regular plural of (`-s` / `-es`).
    fn singular_of(&self, tok: &str) -> Option<&LexEntry> {
        ["s", "es"].iter().find_map(|suf| {
            let stem = tok.strip_suffix(suf)?;
            self.entries.get(stem).filter(|e| e.pos == Pos::Noun)
        })
    }

    fn is_pronoun(&self, tok: &str) -> bool {
        self.pronouns.contains(self.norm(tok).as_ref())
    }

    fn features(&self, tok: &str) -> (Option<Number>, Option<Gender>) {
        match self.entries.get(self.norm(tok).as_ref()) {
            Some(e) => (e.number, e.gender),
            None => (None, None),
        }
    }

    fn noun_number(&self, head: &str) -> Number {
        if let (Some(n), _) = self.features(head) {
            return n;
        }
        let h = self.norm(head);
        if h.len() > 3 && h.ends_with('s') && !h.ends_with("ss") {
            Number::Plural
        } else {
            Number::Singular
        }
    }

    fn compatible(&self, pronoun: &str, nominal_head: &str) -> bool {
        let (pn, pg) = self.features(pronoun);
        if let Some(pn) = pn {
            if pn != self.noun_number(nominal_head) {
                return false;
            }
        }
        match (pg, self.features(nominal_head).1) {
            (Some(a), Some(b)) => a == b,
            (Some(Gender::M | Gender::F), None) => false,
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Location {
    Context(usize),
    Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MentionKind {
    Pronoun,
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub location: Location,
    pub start: usize,
    pub end: usize,
    pub surface: Vec<String>,
    pub kind: MentionKind,
}

impl Mention {
    fn key(&self) -> (Location, usize, usize) {
        (self.location, self.start, self.end)
    }

    fn head(&self) -> &str {
        self.surface.last().expect("mentions are non-empty")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorefChain {
    pub antecedents: Vec<Mention>,
    pub anaphors: Vec<Mention>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub example: ContextualExample,
    pub chains: Vec<CorefChain>,
}

pub fn detect_mentions(sentence: &[String], rules: &RuleSet) -> Vec<Mention> {
    detect_mentions_at(sentence, Location::Source, rules)
}

/// Left-to-right greedy chunking; mentions never overlap.
pub fn detect_mentions_at(sentence: &[String], location: Location, rules: &RuleSet) -> Vec<Mention> {
    let pos: Vec<Pos> = sentence.iter().map(|t| rules.pos(t)).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < sentence.len() {
        let mut j = i;
        if pos[j] == Pos::Det {
            j += 1;
        }
        while j < sentence.len() && pos[j] == Pos::Adj {
            j += 1;
        }
        let nouns_from = j;
        while j < sentence.len() && pos[j] == Pos::Noun {
            j += 1;
        }
        if j > nouns_from {
            out.push(Mention {
                location,
                start: i,
                end: j,
                surface: sentence[i..j].to_vec(),
                kind: MentionKind::Nominal,
            });
            i = j;
        } else if rules.is_pronoun(&sentence[i]) {
            out.push(Mention {
                location,
                start: i,
                end: i + 1,
                surface: vec![sentence[i].clone()],
                kind: MentionKind::Pronoun,
            });
            i += 1;
        } else {
            i += 1;
        }
    }
    out
}

pub fn resolve(example: &ContextualExample, rules: &RuleSet) -> AnnotatedExample {
    let ctx_mentions: Vec<Vec<Mention>> = example
        .contexts
        .iter()
        .enumerate()
        .map(|(k, c)| {
            detect_mentions_at(c, Location::Context(k), rules)
                .into_iter()
                .filter(|m| m.kind == MentionKind::Nominal)
                .collect()
        })
        .collect();
    let src_mentions = detect_mentions_at(&example.source, Location::Source, rules);

    let mut links: Vec<(Vec<Mention>, Mention)> = Vec::new();
    for m in src_mentions {
        match m.kind {
            MentionKind::Pronoun => {
                let found = ctx_mentions.iter().rev().find_map(|ms| {
                    ms.iter()
                        .filter(|c| rules.compatible(&m.surface[0], c.head()))
                        .max_by_key(|c| c.start)
                });
                if let Some(ante) = found {
                    links.push((vec![ante.clone()], m));
                }
            }
            MentionKind::Nominal => {
                let head = rules.norm(m.head()).into_owned();
                let antes: Vec<Mention> = ctx_mentions
                    .iter()
                    .flatten()
                    .filter(|c| rules.norm(c.head()) == head)
                    .cloned()
                    .collect();
                if !antes.is_empty() {
                    links.push((antes, m));
                }
            }
        }
    }

    AnnotatedExample {
        example: example.clone(),
        chains: merge_links(links),
    }
}

/// Links that share an antecedent mention end up in the same chain.
fn merge_links(links: Vec<(Vec<Mention>, Mention)>) -> Vec<CorefChain> {
    let mut chains: Vec<CorefChain> = Vec::new();
    for (antes, ana) in links {
        let keys: BTreeSet<_> = antes.iter().map(Mention::key).collect();
        let (hit, mut rest): (Vec<CorefChain>, Vec<CorefChain>) = chains
            .into_iter()
            .partition(|c| c.antecedents.iter().any(|a| keys.contains(&a.key())));
        let mut merged = CorefChain {
            antecedents: antes,
            anaphors: vec![ana],
        };
        for c in hit {
            merged.antecedents.extend(c.antecedents);
            merged.anaphors.extend(c.anaphors);
        }
        merged.antecedents.sort_by_key(Mention::key);
        merged.antecedents.dedup_by_key(|m| m.key());
        merged.anaphors.sort_by_key(Mention::key);
        merged.anaphors.dedup_by_key(|m| m.key());
        rest.push(merged);
        chains = rest;
    }
    chains.sort_by_key(|c| c.anaphors[0].key());
    chains
}

pub fn filter_annotated(examples: &[AnnotatedExample]) -> Vec<AnnotatedExample> {
    examples.iter().filter(|e| !e.chains.is_empty()).cloned().collect()
}

pub fn annotation_rate(examples: &[AnnotatedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("annotation_rate of an empty example list"));
    }
    let hit = examples.iter().filter(|e| !e.chains.is_empty()).count();
    Ok(hit as f64 / examples.len() as f64)
}

pub fn annotate_documents(docs: &[Document], context_size: usize, rules: &RuleSet) -> Vec<AnnotatedExample> {
    docs.iter()
        .flat_map(|d| extract_examples(d, context_size))
        .map(|e| resolve(&e, rules))
        .collect()
}

// ---- annotated dataset file ------------------------------------------------

#[derive(Serialize, Deserialize)]
pub(crate) struct SpanRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ctx: Option<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ChainRecord {
    pub antecedents: Vec<SpanRecord>,
    pub anaphors: Vec<SpanRecord>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct AnnotatedRecord {
    pub doc: String,
    pub i: usize,
    pub src: String,
    pub tgt: String,
    pub chains: Vec<ChainRecord>,
}

impl AnnotatedRecord {
    pub(crate) fn from_example(a: &AnnotatedExample) -> Self {
        let span = |m: &Mention| SpanRecord {
            ctx: match m.location {
                Location::Context(k) => Some(k),
                Location::Source => None,
            },
            start: m.start,
            end: m.end,
        };
        AnnotatedRecord {
            doc: a.example.doc_id.clone(),
            i: a.example.index,
            src: a.example.source.join(" "),
            tgt: a.example.target.join(" "),
            chains: a
                .chains
                .iter()
                .map(|c| ChainRecord {
                    antecedents: c.antecedents.iter().map(span).collect(),
                    anaphors: c.anaphors.iter().map(span).collect(),
                })
                .collect(),
        }
    }
}

pub fn write_annotated<W: Write>(examples: &[AnnotatedExample], mut out: W) -> std::io::Result<()> {
    for a in examples {
        serde_json::to_writer(&mut out, &AnnotatedRecord::from_example(a))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Rebuilds annotated examples from a file. Contexts come from the documents
/// in the file itself, so every sentence of a document must be present.
pub fn load_annotated(path: &Path, context_size: usize, rules: &RuleSet) -> Result<Vec<AnnotatedExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotated(&text, &path.display().to_string(), context_size, rules)
}

pub(crate) fn parse_annotated(
    text: &str,
    name: &str,
    context_size: usize,
    rules: &RuleSet,
) -> Result<Vec<AnnotatedExample>> {
    let mut stripped = String::new();
    let mut chains: HashMap<(String, usize), (usize, Vec<ChainRecord>)> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotatedRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: name.to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        stripped.push_str(
            &serde_json::json!({"doc": rec.doc, "i": rec.i, "src": rec.src, "tgt": rec.tgt}).to_string(),
        );
        stripped.push('\n');
        chains.insert((rec.doc, rec.i), (lineno + 1, rec.chains));
    }
    let docs = crate::corpus::parse_corpus(stripped.as_bytes(), name, CorpusFormat::JsonLines)?;
    let mut out = Vec::new();
    for d in &docs {
        for ex in extract_examples(d, context_size) {
            let (line, recs) = chains
                .remove(&(ex.doc_id.clone(), ex.index))
                .expect("every parsed record has chains");
            let bad = |msg: &str| Error::Format {
                path: name.to_string(),
                line,
                msg: msg.to_string(),
            };
            let mut cs = Vec::new();
            for c in recs {
                let mut antecedents = Vec::new();
                for s in &c.antecedents {
                    let k = s.ctx.ok_or_else(|| bad("antecedent without ctx"))?;
                    let sent = ex.contexts.get(k).ok_or_else(|| bad("antecedent ctx out of range"))?;
                    antecedents.push(span_mention(sent, Location::Context(k), s, rules).ok_or_else(|| bad("bad span"))?);
                }
                let mut anaphors = Vec::new();
                for s in &c.anaphors {
                    anaphors.push(span_mention(&ex.source, Location::Source, s, rules).ok_or_else(|| bad("bad span"))?);
                }
                if antecedents.is_empty() || anaphors.is_empty() {
                    return Err(bad("chain needs antecedents and anaphors"));
                }
                cs.push(CorefChain { antecedents, anaphors });
            }
            out.push(AnnotatedExample { example: ex, chains: cs });
        }
    }
    Ok(out)
}

fn span_mention(sent: &[String], location: Location, s: &SpanRecord, rules: &RuleSet) -> Option<Mention> {
    if s.start >= s.end || s.end > sent.len() {
        return None;
    }
    let surface = sent[s.start..s.end].to_vec();
    let kind = if surface.len() == 1 && rules.is_pronoun(&surface[0]) && rules.pos(&surface[0]) != Pos::Noun {
        MentionKind::Pronoun
    } else {
        MentionKind::Nominal
    };
    Some(Mention {
        location,
        start: s.start,
        end: s.end,
        surface,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn ex(ctx: &[&str], src: &str) -> ContextualExample {
        ContextualExample {
            doc_id: "d".into(),
            index: ctx.len(),
            source: tokenize(src),
            target: tokenize("x"),
            contexts: ctx.iter().map(|c| tokenize(c)).collect(),
        }
    }

    #[test]
    fn nominal_chunk() {
        let m = detect_mentions(&tokenize("the red coat is here"), &RuleSet::default());
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end, m[0].kind), (0, 3, MentionKind::Nominal));
        assert_eq!(m[0].surface, tokenize("the red coat"));
    }

    #[test]
    fn pronoun_and_nothing() {
        let rules = RuleSet::default();
        let m = detect_mentions(&tokenize("it falls"), &rules);
        assert_eq!((m.len(), m[0].start, m[0].end, m[0].kind), (1, 0, 1, MentionKind::Pronoun));
        assert!(detect_mentions(&tokenize("falls quickly"), &rules).is_empty());
    }

    #[test]
    fn demonstrative_determiner_forms_a_chunk() {
        let rules = RuleSet::default();
        let m = detect_mentions(&tokenize("that old book and that"), &rules);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].start, m[0].end, m[0].kind), (0, 3, MentionKind::Nominal));
        assert_eq!((m[1].start, m[1].kind), (4, MentionKind::Pronoun));
    }

    #[test]
    fn case_handling() {
        let rules = RuleSet::default();
        assert_eq!(detect_mentions(&tokenize("The Coat"), &rules).len(), 1);
        let cs = RuleSet::default().case_sensitive(true);
        assert!(detect_mentions(&tokenize("The Coat"), &cs).is_empty());
    }

    #[test]
    fn pronoun_links_to_single_antecedent() {
        let a = resolve(&ex(&["the coat is red"], "it falls"), &RuleSet::default());
        assert_eq!(a.chains.len(), 1);
        let c = &a.chains[0];
        assert_eq!(c.antecedents[0].surface, tokenize("the coat"));
        assert_eq!(c.antecedents[0].location, Location::Context(0));
        assert_eq!(c.anaphors[0].surface, tokenize("it"));
    }

    #[test]
    fn most_recent_context_wins() {
        let a = resolve(&ex(&["the coat is red", "the lamp is old"], "it falls"), &RuleSet::default());
        assert_eq!(a.chains.len(), 1);
        assert_eq!(a.chains[0].antecedents[0].surface, tokenize("the lamp"));
        assert_eq!(a.chains[0].antecedents[0].location, Location::Context(1));
    }

    #[test]
    fn rightmost_within_sentence() {
        let a = resolve(&ex(&["the coat is on the table"], "it falls"), &RuleSet::default());
        assert_eq!(a.chains[0].antecedents[0].surface, tokenize("the table"));
    }

    #[test]
    fn agreement_filters_candidates() {
        let rules = RuleSet::default();
        let a = resolve(&ex(&["the woman is here", "the coats are old"], "she falls"), &rules);
        assert_eq!(a.chains[0].antecedents[0].surface, tokenize("the woman"));
        let a = resolve(&ex(&["the man is here", "the coats are old"], "they fall"), &rules);
        assert_eq!(a.chains[0].antecedents[0].surface, tokenize("the coats"));
        let a = resolve(&ex(&["the woman is here"], "it falls"), &rules);
        assert!(a.chains.is_empty());
    }

    #[test]
    fn no_contexts_no_chains() {
        assert!(resolve(&ex(&[], "it falls"), &RuleSet::default()).chains.is_empty());
    }

    #[test]
    fn nominal_head_match_and_merge() {
        let rules = RuleSet::default();
        let a = resolve(&ex(&["the coat is red", "a coat is old"], "the new coat and it"), &rules);
        // "the new coat" links to both coats; "it" links to "a coat"; shared antecedent merges them.
        assert_eq!(a.chains.len(), 1);
        assert_eq!(a.chains[0].antecedents.len(), 2);
        assert_eq!(a.chains[0].anaphors.len(), 2);
    }

    #[test]
    fn filter_and_rate() {
        let rules = RuleSet::default();
        let items = vec![
            resolve(&ex(&["falls"], "it falls"), &rules),
            resolve(&ex(&["the coat is red"], "it falls"), &rules),
            resolve(&ex(&["the coat is red"], "the coat and it"), &rules),
        ];
        assert_eq!(items.iter().map(|a| a.chains.len()).collect::<Vec<_>>(), vec![0, 1, 1]);
        let f = filter_annotated(&items);
        assert_eq!(f.len(), 2);
        assert_eq!(filter_annotated(&f), f);
        assert!((annotation_rate(&items).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(annotation_rate(&f).unwrap(), 1.0);
        assert!(annotation_rate(&[]).is_err());
        assert!(filter_annotated(&items[..1]).is_empty());
    }

    #[test]
    fn annotated_file_round_trip() {
        let rules = RuleSet::default();
        let doc = Document {
            doc_id: "d".into(),
            pairs: vec![
                crate::corpus::SentencePair {
                    index: 0,
                    source_text: "the coat is red".into(),
                    target_text: "di mantel ist rot".into(),
                },
                crate::corpus::SentencePair {
                    index: 1,
                    source_text: "it falls".into(),
                    target_text: "er faellt".into(),
                },
            ],
        };
        let ann = annotate_documents(&[doc], 2, &rules);
        let mut buf = Vec::new();
        write_annotated(&ann, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains(r#""chains":[{"antecedents":[{"ctx":0,"start":0,"end":2}],"anaphors":[{"start":0,"end":1}]}]"#), "{text}");
        let back = parse_annotated(&text, "mem", 2, &rules).unwrap();
        assert_eq!(back, ann);
    }
}
