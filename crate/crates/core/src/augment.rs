//! Contrastive contexts: antecedent tokens of every coreference chain are
//! masked, then each masked token is either dropped or swapped for another
//! word.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coref::{AnnotatedExample, Location};
use crate::corpus::ContextualExample;
use crate::error::{Error, Result};
use crate::rng::{example_seed, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Both,
    OmitOnly,
    ReplaceOnly,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Strategy::Both),
            "omit-only" => Ok(Strategy::OmitOnly),
            "replace-only" => Ok(Strategy::ReplaceOnly),
            _ => Err(Error::Config(format!("unknown corruption strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Both => "both",
            Strategy::OmitOnly => "omit-only",
            Strategy::ReplaceOnly => "replace-only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChainSelection {
    #[default]
    All,
    SampleOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub p_omit: f64,
    pub seed: u64,
    pub replacement_pool: Vec<String>,
    pub strategy: Strategy,
    /// Contrastive variants generated per example.
    pub variants: usize,
    pub chains: ChainSelection,
}

impl CorruptionConfig {
    pub fn new(seed: u64, replacement_pool: Vec<String>) -> Self {
        CorruptionConfig {
            p_omit: 0.5,
            seed,
            replacement_pool,
            strategy: Strategy::Both,
            variants: 1,
            chains: ChainSelection::All,
        }
    }

    /// Deletion probability after applying the strategy switch.
    pub fn effective_p_omit(&self) -> f64 {
        match self.strategy {
            Strategy::Both => self.p_omit,
            Strategy::OmitOnly => 1.0,
            Strategy::ReplaceOnly => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_omit) {
            return Err(Error::Config(format!("p_omit {} outside [0, 1]", self.p_omit)));
        }
        if self.effective_p_omit() < 1.0 && self.replacement_pool.is_empty() {
            return Err(Error::Config("replacement pool is empty".into()));
        }
        if self.variants == 0 {
            return Err(Error::Config("variants must be at least 1".into()));
        }
        Ok(())
    }
}

/// Context token after masking. The mask never leaves this module: `corrupt`
/// resolves every `Mask` into an omission or a replacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskedToken {
    Keep(String),
    Mask { original: String },
}

impl std::fmt::Display for MaskedToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskedToken::Keep(t) => f.write_str(t),
            MaskedToken::Mask { .. } => f.write_str("MASK"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    Omit,
    Replace(String),
}

/// Edit at `(ctx, pos)`, where `pos` indexes the original context sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub ctx: usize,
    pub pos: usize,
    pub kind: EditKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub contexts: Vec<Vec<String>>,
    pub edits: Vec<Edit>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub original: AnnotatedExample,
    /// At least one corrupted context set; the first is the primary one.
    pub variants: Vec<Corruption>,
}

impl ContrastivePair {
    pub fn example(&self) -> &ContextualExample {
        &self.original.example
    }

    pub fn corrupted_contexts(&self) -> &[Vec<String>] {
        &self.variants[0].contexts
    }

    pub fn edits(&self) -> &[Edit] {
        &self.variants[0].edits
    }
}

pub fn mask_antecedents(example: &AnnotatedExample) -> Result<Vec<Vec<MaskedToken>>> {
    let all: Vec<usize> = (0..example.chains.len()).collect();
    mask_chains(example, &all)
}

fn mask_chains(example: &AnnotatedExample, chains: &[usize]) -> Result<Vec<Vec<MaskedToken>>> {
    if example.chains.is_empty() {
        return Err(Error::NoChains);
    }
    let mut masked: Vec<Vec<MaskedToken>> = example
        .example
        .contexts
        .iter()
        .map(|c| c.iter().cloned().map(MaskedToken::Keep).collect())
        .collect();
    for &ci in chains {
        for m in &example.chains[ci].antecedents {
            let Location::Context(k) = m.location else {
                continue;
            };
            for tok in &mut masked[k][m.start..m.end] {
                if let MaskedToken::Keep(t) = tok {
                    *tok = MaskedToken::Mask {
                        original: std::mem::take(t),
                    };
                }
            }
        }
    }
    Ok(masked)
}

/// Resolves every mask, in reading order, with one uniform draw `u`:
/// `u < p_omit` deletes the token, otherwise the token is replaced by
/// `pool[below(len)]` from the pool with the original token removed.
pub fn corrupt(
    masked: &[Vec<MaskedToken>],
    p_omit: f64,
    pool: &[String],
    rng: &mut StreamRng,
) -> Result<Corruption> {
    if !masked.iter().flatten().any(|t| matches!(t, MaskedToken::Mask { .. })) {
        return Err(Error::NoChains);
    }
    let mut contexts = Vec::with_capacity(masked.len());
    let mut edits = Vec::new();
    for (k, sent) in masked.iter().enumerate() {
        let mut out = Vec::with_capacity(sent.len());
        for (pos, tok) in sent.iter().enumerate() {
            match tok {
                MaskedToken::Keep(t) => out.push(t.clone()),
                MaskedToken::Mask { original } => {
                    if rng.next_f64() < p_omit {
                        edits.push(Edit {
                            ctx: k,
                            pos,
                            kind: EditKind::Omit,
                        });
                    } else {
                        let candidates: Vec<&String> = pool.iter().filter(|w| *w != original).collect();
                        if candidates.is_empty() {
                            return Err(Error::PoolExhausted(original.clone()));
                        }
                        let new = candidates[rng.below(candidates.len())].clone();
                        out.push(new.clone());
                        edits.push(Edit {
                            ctx: k,
                            pos,
                            kind: EditKind::Replace(new),
                        });
                    }
                }
            }
        }
        contexts.push(out);
    }
    Ok(Corruption { contexts, edits })
}

/// Random stream for variant `v` of an example.
pub fn variant_rng(seed: u64, example: &ContextualExample, v: usize) -> StreamRng {
    StreamRng::new(example_seed(seed, &example.doc_id, example.index), v as u64)
}

pub fn make_pair(example: &AnnotatedExample, config: &CorruptionConfig) -> Result<ContrastivePair> {
    let p = config.effective_p_omit();
    let mut variants = Vec::with_capacity(config.variants);
    for v in 0..config.variants {
        let mut rng = variant_rng(config.seed, &example.example, v);
        let masked = match config.chains {
            ChainSelection::All => mask_antecedents(example)?,
            ChainSelection::SampleOne => {
                if example.chains.is_empty() {
                    return Err(Error::NoChains);
                }
                let pick = rng.below(example.chains.len());
                mask_chains(example, &[pick])?
            }
        };
        variants.push(corrupt(&masked, p, &config.replacement_pool, &mut rng)?);
    }
    Ok(ContrastivePair {
        original: example.clone(),
        variants,
    })
}

/// One pair per input. Seeds are per example, so the output for an example
/// does not depend on its position in the input.
pub fn build_contrastive_dataset(
    annotated: &[AnnotatedExample],
    config: &CorruptionConfig,
) -> Result<Vec<ContrastivePair>> {
    config.validate()?;
    annotated.par_iter().map(|a| make_pair(a, config)).collect()
}

// ---- augmented dataset file --------------------------------------------

fn edits_json(edits: &[Edit]) -> Value {
    Value::Array(
        edits
            .iter()
            .map(|e| match &e.kind {
                EditKind::Omit => json!([e.ctx, e.pos, "O"]),
                EditKind::Replace(t) => json!([e.ctx, e.pos, "R", t]),
            })
            .collect(),
    )
}

fn parse_edits(v: &Value) -> Option<Vec<Edit>> {
    v.as_array()?
        .iter()
        .map(|e| {
            let a = e.as_array()?;
            let ctx = a.first()?.as_u64()? as usize;
            let pos = a.get(1)?.as_u64()? as usize;
            let kind = match a.get(2)?.as_str()? {
                "O" if a.len() == 3 => EditKind::Omit,
                "R" if a.len() == 4 => EditKind::Replace(a[3].as_str()?.to_string()),
                _ => return None,
            };
            Some(Edit { ctx, pos, kind })
        })
        .collect()
}

/// Annotated record plus `ctx` (original contexts), `ctx_corrupt` and
/// `edits`; extra variants go to `more_variants`.
pub fn write_augmented<W: Write>(pairs: &[ContrastivePair], mut out: W) -> std::io::Result<()> {
    for p in pairs {
        let rec = crate::coref::AnnotatedRecord::from_example(&p.original);
        let mut v = serde_json::to_value(&rec)?;
        let obj = v.as_object_mut().expect("record is an object");
        obj.insert("ctx".into(), json!(p.original.example.contexts));
        obj.insert("ctx_corrupt".into(), json!(p.variants[0].contexts));
        obj.insert("edits".into(), edits_json(&p.variants[0].edits));
        if p.variants.len() > 1 {
            let more: Vec<Value> = p.variants[1..]
                .iter()
                .map(|c| json!({"ctx_corrupt": c.contexts, "edits": edits_json(&c.edits)}))
                .collect();
            obj.insert("more_variants".into(), Value::Array(more));
        }
        serde_json::to_writer(&mut out, &v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_augmented(pairs: &[ContrastivePair], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_augmented(pairs, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_augmented(path: &Path, rules: &crate::coref::RuleSet) -> Result<Vec<ContrastivePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_augmented(&text, &path.display().to_string(), rules)
}

pub fn parse_augmented(text: &str, name: &str, rules: &crate::coref::RuleSet) -> Result<Vec<ContrastivePair>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format {
            path: name.to_string(),
            line: lineno + 1,
            msg,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let ctx: Vec<Vec<String>> =
            serde_json::from_value(v.get("ctx").cloned().unwrap_or(Value::Null)).map_err(|e| bad(format!("ctx: {e}")))?;
        // Rebuild a one-document corpus holding the contexts and the example,
        // then reuse the annotated-record parser for span validation.
        let doc = v["doc"].as_str().ok_or_else(|| bad("missing doc".into()))?;
        let idx = v["i"].as_u64().ok_or_else(|| bad("missing i".into()))? as usize;
        let mut synthetic = String::new();
        for (k, c) in ctx.iter().enumerate() {
            synthetic.push_str(
                &json!({"doc": doc, "i": k, "src": c.join(" "), "tgt": "_", "chains": []}).to_string(),
            );
            synthetic.push('\n');
        }
        let mut rec = v.clone();
        rec["i"] = json!(ctx.len());
        synthetic.push_str(&rec.to_string());
        synthetic.push('\n');
        let mut ann = crate::coref::parse_annotated(&synthetic, name, ctx.len(), rules)
            .map_err(|e| bad(e.to_string()))?
            .pop()
            .ok_or_else(|| bad("empty record".into()))?;
        ann.example.index = idx;

        let mut variants = vec![Corruption {
            contexts: serde_json::from_value(v["ctx_corrupt"].clone()).map_err(|e| bad(format!("ctx_corrupt: {e}")))?,
            edits: parse_edits(&v["edits"]).ok_or_else(|| bad("malformed edits".into()))?,
        }];
        if let Some(more) = v.get("more_variants").and_then(Value::as_array) {
            for m in more {
                variants.push(Corruption {
                    contexts: serde_json::from_value(m["ctx_corrupt"].clone())
                        .map_err(|e| bad(format!("ctx_corrupt: {e}")))?,
                    edits: parse_edits(&m["edits"]).ok_or_else(|| bad("malformed edits".into()))?,
                });
            }
        }
        out.push(ContrastivePair {
            original: ann,
            variants,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coref::{resolve, RuleSet};
    use crate::corpus::tokenize;
    use proptest::prelude::*;
    use super::Strategy;

    fn annotated(ctx: &[&str], src: &str, index: usize) -> AnnotatedExample {
        let ex = ContextualExample {
            doc_id: "doc".into(),
            index,
            source: tokenize(src),
            target: tokenize("x y"),
            contexts: ctx.iter().map(|c| tokenize(c)).collect(),
        };
        resolve(&ex, &RuleSet::default())
    }

    fn render(m: &[Vec<MaskedToken>]) -> Vec<String> {
        m.iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
            .collect()
    }

    fn pool() -> Vec<String> {
        ["lamp", "door", "cup", "book"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn masks_antecedent_span() {
        let a = annotated(&["the coat is red"], "it falls", 1);
        assert_eq!(render(&mask_antecedents(&a).unwrap()), vec!["MASK MASK is red"]);
    }

    #[test]
    fn masks_every_chain_and_whole_sentences() {
        let a = annotated(&["the coat is on the table"], "the table and the coat", 1);
        assert_eq!(a.chains.len(), 2);
        assert_eq!(render(&mask_antecedents(&a).unwrap()), vec!["MASK MASK is on MASK MASK"]);
        let a = annotated(&["the red coat"], "it falls", 1);
        assert_eq!(render(&mask_antecedents(&a).unwrap()), vec!["MASK MASK MASK"]);
        let none = annotated(&["falls"], "it falls", 1);
        assert!(matches!(mask_antecedents(&none), Err(Error::NoChains)));
    }

    #[test]
    fn omit_everything() {
        let a = annotated(&["the coat is red"], "it falls", 1);
        let m = mask_antecedents(&a).unwrap();
        let c = corrupt(&m, 1.0, &pool(), &mut StreamRng::new(1, 0)).unwrap();
        assert_eq!(c.contexts, vec![tokenize("is red")]);
        assert_eq!(c.edits.iter().map(|e| e.kind.clone()).collect::<Vec<_>>(), vec![EditKind::Omit, EditKind::Omit]);
    }

    #[test]
    fn replace_everything() {
        let a = annotated(&["the coat is red"], "it falls", 1);
        let m = mask_antecedents(&a).unwrap();
        let pool: Vec<String> = ["coat", "the", "lamp"].iter().map(|s| s.to_string()).collect();
        for seed in 0..20 {
            let c = corrupt(&m, 0.0, &pool, &mut StreamRng::new(seed, 0)).unwrap();
            assert_eq!(c.contexts[0].len(), 4);
            assert_ne!(c.contexts[0][0], "the");
            assert_ne!(c.contexts[0][1], "coat");
            assert_eq!(&c.contexts[0][2..], &tokenize("is red")[..]);
        }
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let a = annotated(&["the coat is red"], "it falls", 1);
        let m = mask_antecedents(&a).unwrap();
        let pool = vec!["the".to_string()];
        assert!(matches!(
            corrupt(&m, 0.0, &pool, &mut StreamRng::new(0, 0)),
            Err(Error::PoolExhausted(_))
        ));
    }

    #[test]
    fn half_omission_replays_from_the_stream() {
        let a = annotated(&["the coat is red", "the old lamp is here"], "the coat and it", 2);
        let m = mask_antecedents(&a).unwrap();
        let pool = pool();
        let c = corrupt(&m, 0.5, &pool, &mut StreamRng::new(42, 7)).unwrap();

        // Independent replay of the documented draw sequence.
        let mut r = StreamRng::new(42, 7);
        let mut expected = Vec::new();
        for sent in &a.example.contexts {
            let mut out = Vec::new();
            let masked_positions: Vec<bool> = match sent[1].as_str() {
                "coat" => vec![true, true, false, false],
                _ => vec![true, true, true, false, false],
            };
            for (tok, &is_masked) in sent.iter().zip(&masked_positions) {
                if !is_masked {
                    out.push(tok.clone());
                    continue;
                }
                let u = (r.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                if u >= 0.5 {
                    let cands: Vec<&String> = pool.iter().filter(|w| *w != tok).collect();
                    let j = ((r.next_u64() as u128 * cands.len() as u128) >> 64) as usize;
                    out.push(cands[j].clone());
                }
            }
            expected.push(out);
        }
        assert_eq!(c.contexts, expected);
    }

    #[test]
    fn dataset_is_order_independent() {
        let items = vec![
            annotated(&["the coat is red"], "it falls", 1),
            annotated(&["the lamp is old"], "it breaks", 3),
            annotated(&["the cup is new", "the book is red"], "it moves", 5),
        ];
        let cfg = CorruptionConfig::new(9, pool());
        let a = build_contrastive_dataset(&items, &cfg).unwrap();
        assert_eq!(a.len(), 3);
        let mut rev = items.clone();
        rev.reverse();
        let mut b = build_contrastive_dataset(&rev, &cfg).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn strategies_and_variants() {
        let a = annotated(&["the coat is red"], "it falls", 1);
        let mut cfg = CorruptionConfig::new(3, pool());
        cfg.strategy = Strategy::OmitOnly;
        let p = make_pair(&a, &cfg).unwrap();
        assert!(p.edits().iter().all(|e| e.kind == EditKind::Omit));
        cfg.strategy = Strategy::ReplaceOnly;
        cfg.variants = 3;
        let p = make_pair(&a, &cfg).unwrap();
        assert_eq!(p.variants.len(), 3);
        assert!(p.variants.iter().flat_map(|v| &v.edits).all(|e| matches!(e.kind, EditKind::Replace(_))));
    }

    #[test]
    fn sample_one_chain_masks_a_single_chain() {
        let a = annotated(&["the coat is on the table"], "the table and the coat", 1);
        let mut cfg = CorruptionConfig::new(3, pool());
        cfg.chains = ChainSelection::SampleOne;
        cfg.strategy = Strategy::OmitOnly;
        let p = make_pair(&a, &cfg).unwrap();
        assert_eq!(p.edits().len(), 2);
    }

    #[test]
    fn augmented_file_round_trip() {
        let items = vec![
            annotated(&["the coat is red"], "it falls", 1),
            annotated(&["the cup is new", "the book is red"], "it moves", 5),
        ];
        let mut cfg = CorruptionConfig::new(1, pool());
        cfg.variants = 2;
        let pairs = build_contrastive_dataset(&items, &cfg).unwrap();
        let mut buf = Vec::new();
        write_augmented(&pairs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"ctx_corrupt\"") && text.contains("\"edits\""));
        let back = parse_augmented(&text, "mem", &RuleSet::default()).unwrap();
        assert_eq!(back, pairs);
    }

    #[test]
    fn omit_fraction_converges() {
        let a = annotated(&["the big red old coat is red"], "it falls", 0);
        let m = mask_antecedents(&a).unwrap();
        let mut omitted = 0usize;
        let mut total = 0usize;
        let mut i = 0;
        while total < 20_000 {
            let c = corrupt(&m, 0.5, &pool(), &mut StreamRng::new(5, i)).unwrap();
            omitted += c.edits.iter().filter(|e| e.kind == EditKind::Omit).count();
            total += c.edits.len();
            i += 1;
        }
        assert!((omitted as f64 / total as f64 - 0.5).abs() < 0.03);
    }

    proptest! {
        #[test]
        fn corruption_invariants(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let a = annotated(&["the coat is on the table", "a lamp is here"], "it falls and the coat", 2);
            let m = mask_antecedents(&a).unwrap();
            let c = corrupt(&m, p, &pool(), &mut StreamRng::new(seed, 0)).unwrap();
            prop_assert_ne!(&c.contexts, &a.example.contexts);
            for (k, (orig, new)) in a.example.contexts.iter().zip(&c.contexts).enumerate() {
                let omitted = c.edits.iter().filter(|e| e.ctx == k && e.kind == EditKind::Omit).count();
                prop_assert_eq!(new.len(), orig.len() - omitted);
                // Unmasked tokens survive in order.
                let kept: Vec<&String> = orig.iter().enumerate()
                    .filter(|(i, _)| matches!(m[k][*i], MaskedToken::Keep(_)))
                    .map(|(_, t)| t).collect();
                let mut it = new.iter();
                for t in kept {
                    prop_assert!(it.any(|x| x == t));
                }
            }
            for chain in &a.chains {
                let hit = chain.antecedents.iter().any(|m| {
                    let Location::Context(k) = m.location else { return false };
                    c.edits.iter().any(|e| e.ctx == k && (m.start..m.end).contains(&e.pos))
                });
                prop_assert!(hit);
            }
        }
    }
}
