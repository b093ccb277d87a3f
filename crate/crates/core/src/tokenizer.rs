//! Word vocabulary, optional BPE segmentation and example encoding.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ContextualExample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const BOC: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<boc>"];

/// End-of-word marker attached to the last symbol of a BPE-segmented word.
pub const END_OF_WORD: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn id_or_unk(&self, tok: &str) -> usize {
        self.id(tok).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::UnknownId {
            id: id as u32,
            size: self.tokens.len(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn push(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Rec<'a> {
            id: usize,
            tok: &'a str,
        }
        for (id, tok) in self.tokens.iter().enumerate() {
            serde_json::to_writer(&mut out, &Rec { id, tok })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn parse<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Rec {
            id: usize,
            tok: String,
        }
        let mut tokens = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let bad = |msg: String| Error::Format {
                path: name.to_string(),
                line: lineno + 1,
                msg,
            };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Rec = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.id != tokens.len() {
                return Err(bad(format!("expected id {}, found {}", tokens.len(), rec.id)));
            }
            if rec.id < RESERVED.len() && rec.tok != RESERVED[rec.id] {
                return Err(bad(format!("reserved id {} must be {:?}", rec.id, RESERVED[rec.id])));
            }
            tokens.push(rec.tok);
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Format {
                path: name.to_string(),
                line: tokens.len() + 1,
                msg: "missing reserved tokens".into(),
            });
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format {
                    path: name.to_string(),
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(f), &path.display().to_string())
    }
}

/// Tokens with count >= `min_count` get ids after the reserved block, most
/// frequent first, ties in lexicographic order.
pub fn build_vocab<'a, I>(stream: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in stream {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut v = Vocabulary::reserved_only();
    for (t, _) in ranked {
        v.push(t.to_string());
    }
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn initial_symbols(word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = syms.last_mut() {
            last.push_str(END_OF_WORD);
        }
        syms
    }

    /// Applies merges by rank until none is applicable.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut syms = Self::initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == l && &syms[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    pub fn segment_all(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.segment(t)).collect()
    }

    /// Joins symbols back into words; a word ends at a symbol carrying the
    /// end-of-word marker.
    pub fn join(symbols: &[String]) -> Vec<String> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for s in symbols {
            match s.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    cur.push_str(stem);
                    words.push(std::mem::take(&mut cur));
                }
                None => cur.push_str(s),
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut merges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: "expected \"left right\"".into(),
                    })
                }
            }
        }
        Self::from_merges(merges)
    }
}

/// Greedy pair merging over word frequencies. The most frequent pair wins,
/// ties go to the lexicographically smallest pair.
pub fn train_bpe<'a, I>(words: I, num_merges: usize) -> BpeModel
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for w in words {
        *freq.entry(w).or_default() += 1;
    }
    let mut vocab: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(w, c)| (BpeModel::initial_symbols(w), c))
        .collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &vocab {
            for w in syms.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        let Some(((l, r), _)) = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in &mut vocab {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == l && syms[i + 1] == r {
                    syms[i] = format!("{l}{r}");
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((l, r));
    }
    BpeModel::from_merges(merges).expect("each merge removes its pair from the corpus")
}

/// Token ids for the model-facing surface of a sentence.
pub fn surface(tokens: &[String], bpe: Option<&BpeModel>) -> Vec<String> {
    match bpe {
        Some(b) => b.segment_all(tokens),
        None => tokens.to_vec(),
    }
}

pub fn encode(tokens: &[String], vocab: &Vocabulary, bpe: Option<&BpeModel>) -> Vec<usize> {
    surface(tokens, bpe).iter().map(|t| vocab.id_or_unk(t)).collect()
}

/// Inverse of `encode`. Reserved ids other than UNK are dropped.
pub fn decode(ids: &[usize], vocab: &Vocabulary, bpe: Option<&BpeModel>) -> Result<Vec<String>> {
    let mut syms = Vec::with_capacity(ids.len());
    for &id in ids {
        let t = vocab.token(id)?;
        if id < RESERVED.len() && id != UNK {
            continue;
        }
        syms.push(t.to_string());
    }
    Ok(match bpe {
        Some(_) => BpeModel::join(&syms),
        None => syms,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncodedExample {
    /// One `[BOC, tokens..]` sequence per context sentence, oldest first.
    pub contexts: Vec<Vec<usize>>,
    /// `[BOS, tokens.., EOS]`
    pub source: Vec<usize>,
    /// `[BOS, tokens.., EOS]`
    pub target: Vec<usize>,
}

pub fn encode_context(ctx: &[String], vocab: &Vocabulary, bpe: Option<&BpeModel>) -> Vec<usize> {
    let mut s = vec![BOC];
    s.extend(encode(ctx, vocab, bpe));
    s
}

pub fn encode_sentence(tokens: &[String], vocab: &Vocabulary, bpe: Option<&BpeModel>) -> Vec<usize> {
    let mut s = vec![BOS];
    s.extend(encode(tokens, vocab, bpe));
    s.push(EOS);
    s
}

pub fn encode_example(ex: &ContextualExample, vocab: &Vocabulary, bpe: Option<&BpeModel>) -> EncodedExample {
    encode_parts(&ex.contexts, &ex.source, &ex.target, vocab, bpe)
}

pub fn encode_parts(
    contexts: &[Vec<String>],
    source: &[String],
    target: &[String],
    vocab: &Vocabulary,
    bpe: Option<&BpeModel>,
) -> EncodedExample {
    EncodedExample {
        contexts: contexts.iter().map(|c| encode_context(c, vocab, bpe)).collect(),
        source: encode_sentence(source, vocab, bpe),
        target: encode_sentence(target, vocab, bpe),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn vocab_order_and_threshold() {
        let v = build_vocab("a a b".split(' '), 1);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        let v = build_vocab("a a b".split(' '), 3);
        assert_eq!(v.len(), RESERVED.len());
        assert_eq!(build_vocab("c b a b c".split(' '), 1).tokens()[5..], ["b", "c", "a"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab("x y z x".split(' '), 1);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"id\":0,\"tok\":\"<pad>\"}\n"));
        assert_eq!(Vocabulary::parse(&buf[..], "mem").unwrap(), v);
        let bad = "{\"id\":0,\"tok\":\"x\"}\n";
        assert!(Vocabulary::parse(bad.as_bytes(), "mem").is_err());
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab("the coat is red".split(' '), 1);
        let s = toks("the coat is red");
        assert_eq!(decode(&encode(&s, &v, None), &v, None).unwrap(), s);
        assert_eq!(encode(&toks("the lamp"), &v, None)[1], UNK);
        assert!(encode(&[], &v, None).is_empty());
        assert!(matches!(decode(&[99], &v, None), Err(Error::UnknownId { id: 99, .. })));
    }

    #[test]
    fn first_merge_low_lowest() {
        let mut words = vec!["low"; 5];
        words.extend(["lowest"; 2]);
        let m = train_bpe(words.iter().copied(), 1);
        assert_eq!(m.merges(), [("l".to_string(), "o".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = train_bpe(["hello"].into_iter(), 0);
        assert!(m.merges().is_empty());
        assert_eq!(m.segment("abc"), ["a", "b", "c</w>"]);
    }

    #[test]
    fn bpe_is_deterministic_and_bounded() {
        let words: Vec<&str> = "the lower lowest newer newest wider".split(' ').collect();
        let a = train_bpe(words.iter().copied(), 1000);
        let b = train_bpe(words.iter().copied(), 1000);
        assert_eq!(a, b);
        // Once every word is a single symbol no pair remains.
        for w in &words {
            assert_eq!(a.segment(w), [format!("{w}</w>")]);
        }
    }

    #[test]
    fn bpe_file_round_trip_and_encoding() {
        let corpus = "the coat is red the lamp is old";
        let bpe = train_bpe(corpus.split(' '), 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bpe.txt");
        bpe.save(&p).unwrap();
        assert_eq!(BpeModel::load(&p).unwrap(), bpe);
        let sents = toks(corpus);
        let v = build_vocab(bpe.segment_all(&sents).iter().map(String::as_str), 1);
        assert_eq!(decode(&encode(&sents, &v, Some(&bpe)), &v, Some(&bpe)).unwrap(), sents);
    }

    #[test]
    fn example_markup() {
        let v = build_vocab("a b c".split(' '), 1);
        let ex = ContextualExample {
            doc_id: "d".into(),
            index: 2,
            source: toks("a b"),
            target: toks("c"),
            contexts: vec![toks("a"), toks("b c")],
        };
        let e = encode_example(&ex, &v, None);
        assert_eq!(e.contexts.iter().flatten().filter(|&&i| i == BOC).count(), 2);
        assert!(e.contexts.iter().all(|c| c[0] == BOC));
        assert_eq!(e.source.first(), Some(&BOS));
        assert_eq!(e.source.last(), Some(&EOS));
        assert_eq!(e.target.len(), 3);
        let none = encode_example(&ContextualExample { contexts: vec![], ..ex }, &v, None);
        assert!(none.contexts.is_empty());
    }

    proptest! {
        #[test]
        fn round_trip_with_corpus_vocab(words in prop::collection::vec("[a-e]{1,6}", 1..30), merges in 0usize..40) {
            let v = build_vocab(words.iter().map(String::as_str), 1);
            prop_assert_eq!(decode(&encode(&words, &v, None), &v, None).unwrap(), words.clone());
            let bpe = train_bpe(words.iter().map(String::as_str), merges);
            prop_assert!(bpe.merges().len() <= merges);
            let sv = build_vocab(bpe.segment_all(&words).iter().map(String::as_str), 1);
            prop_assert_eq!(decode(&encode(&words, &sv, Some(&bpe)), &sv, Some(&bpe)).unwrap(), words);
        }
    }
}
