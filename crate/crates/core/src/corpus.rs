//! Document-level parallel corpus: ingestion, context windows and
//! document-based splits.
//!
//! Corpus files are JSON-lines, one sentence pair per line:
//!
//! ```text
//! {"doc": "d0", "i": 0, "src": "the coat is red", "tgt": "la mantel ist rot"}
//! ```
//!
//! Records of one document may be interleaved with other documents, but their
//! indices must run 0, 1, 2, ... in file order.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub index: usize,
    pub source_text: String,
    pub target_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub pairs: Vec<SentencePair>,
}

/// One translation example with its preceding source sentences
/// (oldest first) from the same document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualExample {
    pub doc_id: String,
    pub index: usize,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub contexts: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    JsonLines,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" => Ok(CorpusFormat::JsonLines),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    doc: String,
    i: usize,
    src: String,
    tgt: String,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), &path.display().to_string(), format)
}

pub fn parse_corpus<R: BufRead>(reader: R, name: &str, format: CorpusFormat) -> Result<Vec<Document>> {
    let CorpusFormat::JsonLines = format;
    let mut docs: Vec<Document> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let fmt_err = |msg: String| Error::Format {
            path: name.to_string(),
            line: lineno,
            msg,
        };
        let line = line.map_err(|e| fmt_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fmt_err(e.to_string()))?;
        if rec.doc.is_empty() {
            return Err(fmt_err("empty doc id".into()));
        }
        if rec.src.trim().is_empty() || rec.tgt.trim().is_empty() {
            return Err(fmt_err("empty source or target text".into()));
        }
        let slot = *by_id.entry(rec.doc.clone()).or_insert_with(|| {
            docs.push(Document {
                doc_id: rec.doc.clone(),
                pairs: Vec::new(),
            });
            docs.len() - 1
        });
        let doc = &mut docs[slot];
        if rec.i < doc.pairs.len() {
            return Err(fmt_err(format!("duplicate index {} in document {}", rec.i, rec.doc)));
        }
        if rec.i != doc.pairs.len() {
            return Err(fmt_err(format!(
                "non-monotone/gapped index {} in document {} (expected {})",
                rec.i,
                rec.doc,
                doc.pairs.len()
            )));
        }
        doc.pairs.push(SentencePair {
            index: rec.i,
            source_text: rec.src,
            target_text: rec.tgt,
        });
    }
    Ok(docs)
}

pub fn write_corpus<W: Write>(docs: &[Document], mut out: W) -> std::io::Result<()> {
    for doc in docs {
        for p in &doc.pairs {
            let rec = Record {
                doc: doc.doc_id.clone(),
                i: p.index,
                src: p.source_text.clone(),
                tgt: p.target_text.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(docs, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One example per sentence pair; example `i` gets the source sides of pairs
/// `max(0, i - n)..i` as contexts.
pub fn extract_examples(doc: &Document, n: usize) -> Vec<ContextualExample> {
    let sources: Vec<Vec<String>> = doc.pairs.iter().map(|p| tokenize(&p.source_text)).collect();
    doc.pairs
        .iter()
        .enumerate()
        .map(|(i, p)| ContextualExample {
            doc_id: doc.doc_id.clone(),
            index: p.index,
            source: sources[i].clone(),
            target: tokenize(&p.target_text),
            contexts: sources[i.saturating_sub(n)..i].to_vec(),
        })
        .collect()
}

pub fn extract_all(docs: &[Document], n: usize) -> Vec<ContextualExample> {
    docs.iter().flat_map(|d| extract_examples(d, n)).collect()
}

/// Partitions documents into train/valid/test. The assignment depends only on
/// the set of document ids, the ratios and the seed: ids are sorted, shuffled
/// with the seeded stream and cut into consecutive blocks whose sizes come
/// from largest-remainder rounding (every non-zero ratio receives at least
/// one document). Within each split the input order is kept.
pub fn split_by_documents(docs: &[Document], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!("split ratios must be non-negative: {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
    }
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    let n = docs.len();
    if n < nonzero {
        return Err(Error::Config(format!(
            "{n} documents cannot fill {nonzero} non-empty splits"
        )));
    }

    let counts = split_counts(n, &ratios);
    let mut ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    StreamRng::labeled(seed, "split").shuffle(&mut ids);
    let mut bucket: HashMap<&str, usize> = HashMap::new();
    let mut it = ids.into_iter();
    for (k, &c) in counts.iter().enumerate() {
        for id in it.by_ref().take(c) {
            bucket.insert(id, k);
        }
    }

    let mut split = DatasetSplit::default();
    for d in docs {
        match bucket[d.doc_id.as_str()] {
            0 => split.train.push(d.clone()),
            1 => split.valid.push(d.clone()),
            _ => split.test.push(d.clone()),
        }
    }
    Ok(split)
}

fn split_counts(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    for k in 0..3 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[k] = 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<Vec<Document>> {
        parse_corpus(s.as_bytes(), "mem", CorpusFormat::JsonLines)
    }

    fn doc(id: &str, n: usize) -> Document {
        Document {
            doc_id: id.into(),
            pairs: (0..n)
                .map(|i| SentencePair {
                    index: i,
                    source_text: format!("s{i} a"),
                    target_text: format!("t{i} b"),
                })
                .collect(),
        }
    }

    #[test]
    fn loads_single_document() {
        let text = r#"{"doc":"d0","i":0,"src":"a b","tgt":"x y"}
{"doc":"d0","i":1,"src":"c","tgt":"z"}
{"doc":"d0","i":2,"src":"d e","tgt":"w"}
"#;
        let docs = parse(text).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].pairs.len(), 3);
        assert_eq!(docs[0].pairs[2].source_text, "d e");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn gapped_index_is_rejected_with_line() {
        let text = r#"{"doc":"d0","i":0,"src":"a","tgt":"x"}
{"doc":"d0","i":2,"src":"c","tgt":"z"}
"#;
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("non-monotone/gapped"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        let dup = r#"{"doc":"d0","i":0,"src":"a","tgt":"x"}
{"doc":"d0","i":0,"src":"a","tgt":"x"}
"#;
        assert!(parse(dup).unwrap_err().to_string().contains("duplicate"));
        let bad = r#"{"doc":"d0","i":0,"src":"a"}"#;
        assert!(parse(bad).unwrap_err().to_string().contains("mem:1:"));
        let extra = r#"{"doc":"d0","i":0,"src":"a","tgt":"x","zzz":1}"#;
        assert!(parse(extra).is_err());
        let blank = r#"{"doc":"d0","i":0,"src":"  ","tgt":"x"}"#;
        assert!(parse(blank).is_err());
    }

    #[test]
    fn interleaved_documents_are_grouped() {
        let text = r#"{"doc":"a","i":0,"src":"1","tgt":"1"}
{"doc":"b","i":0,"src":"2","tgt":"2"}
{"doc":"a","i":1,"src":"3","tgt":"3"}
"#;
        let docs = parse(text).unwrap();
        assert_eq!(docs.iter().map(|d| d.pairs.len()).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn context_windows() {
        let d = doc("d", 3);
        let ex = extract_examples(&d, 2);
        assert_eq!(ex[0].contexts.len(), 0);
        assert_eq!(ex[2].contexts, vec![tokenize("s0 a"), tokenize("s1 a")]);
        assert!(extract_examples(&d, 0).iter().all(|e| e.contexts.is_empty()));
        let ex5 = extract_examples(&doc("d", 5), 2);
        assert_eq!(ex5[4].contexts, vec![tokenize("s2 a"), tokenize("s3 a")]);
    }

    #[test]
    fn split_is_deterministic() {
        let docs: Vec<_> = (0..10).map(|i| doc(&format!("d{i}"), 2)).collect();
        let a = split_by_documents(&docs, [0.8, 0.1, 0.1], 7).unwrap();
        let b = split_by_documents(&docs, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        let mut rev = docs.clone();
        rev.reverse();
        let c = split_by_documents(&rev, [0.8, 0.1, 0.1], 7).unwrap();
        let ids = |v: &[Document]| v.iter().map(|d| d.doc_id.clone()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&a.test), ids(&c.test));
    }

    #[test]
    fn split_all_train_and_too_few_docs() {
        let docs: Vec<_> = (0..4).map(|i| doc(&format!("d{i}"), 1)).collect();
        let s = split_by_documents(&docs, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train.len(), 4);
        assert!(split_by_documents(&docs[..2], [0.5, 0.25, 0.25], 1).is_err());
        assert!(split_by_documents(&docs, [0.5, 0.5, 0.5], 1).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_ids(n in 3usize..60, seed in any::<u64>(), a in 1u32..10, b in 1u32..10, c in 1u32..10) {
            let docs: Vec<_> = (0..n).map(|i| doc(&format!("d{i}"), 1)).collect();
            let s = (a + b + c) as f64;
            let r = [a as f64 / s, b as f64 / s, 1.0 - a as f64 / s - b as f64 / s];
            let split = split_by_documents(&docs, r, seed).unwrap();
            let ids = |v: &[Document]| v.iter().map(|d| d.doc_id.clone()).collect::<BTreeSet<_>>();
            let (tr, va, te) = (ids(&split.train), ids(&split.valid), ids(&split.test));
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            prop_assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());
        }

        #[test]
        fn contexts_are_preceding_sources(len in 1usize..12, n in 0usize..4) {
            let d = doc("x", len);
            for (i, ex) in extract_examples(&d, n).iter().enumerate() {
                let lo = i.saturating_sub(n);
                prop_assert_eq!(ex.contexts.len(), i - lo);
                for (k, c) in ex.contexts.iter().enumerate() {
                    prop_assert_eq!(c, &tokenize(&d.pairs[lo + k].source_text));
                }
            }
        }
    }
}
