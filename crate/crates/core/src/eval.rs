//! Corpus BLEU, greedy and beam decoding, and contrastive pronoun scoring.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::model::{Input, Model};
use crate::synthgen::ContrastiveTestItem;
use crate::tokenizer::{BOS, EOS};

// ---- BLEU ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    None,
    #[default]
    AddEpsilon,
}

impl std::str::FromStr for Smoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Smoothing::None),
            "add-epsilon" => Ok(Smoothing::AddEpsilon),
            _ => Err(Error::Config(format!("unknown smoothing {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub epsilon: f64,
    pub case_sensitive: bool,
    /// Split tokens into characters before counting n-grams.
    pub char_level: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_n: 4,
            smoothing: Smoothing::AddEpsilon,
            epsilon: 0.1,
            case_sensitive: true,
            char_level: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    /// Modified precisions p1..pN after smoothing.
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_length: usize,
    pub ref_length: usize,
    pub smoothing: Smoothing,
    pub epsilon: f64,
}

fn units(tokens: &[String], cfg: &BleuConfig) -> Vec<String> {
    let norm = |t: &str| if cfg.case_sensitive { t.to_string() } else { t.to_lowercase() };
    if cfg.char_level {
        tokens.iter().flat_map(|t| norm(t).chars().map(String::from).collect::<Vec<_>>()).collect()
    } else {
        tokens.iter().map(|t| norm(t)).collect()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus-level BLEU with clipped n-gram counts summed over segments and
/// `BP = exp(1 - r/c)` when `c <= r`. Orders with no hypothesis n-grams at
/// all are left out of the geometric mean. With add-epsilon smoothing a zero
/// match count becomes `epsilon`.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], cfg: &BleuConfig) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if cfg.max_n == 0 {
        return Err(Error::Config("max_n must be positive".into()));
    }
    let mut matches = vec![0usize; cfg.max_n];
    let mut totals = vec![0usize; cfg.max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let h = units(h, cfg);
        let rf = units(rf, cfg);
        c += h.len();
        r += rf.len();
        for n in 1..=cfg.max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&rf, n);
            for (g, k) in &hc {
                matches[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    let mut precisions = Vec::with_capacity(cfg.max_n);
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut zero = false;
    for n in 0..cfg.max_n {
        if totals[n] == 0 {
            precisions.push(0.0);
            continue;
        }
        let m = match (matches[n], cfg.smoothing) {
            (0, Smoothing::AddEpsilon) => cfg.epsilon,
            (m, _) => m as f64,
        };
        let p = m / totals[n] as f64;
        precisions.push(p);
        orders += 1;
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c <= r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let bleu = if zero || orders == 0 {
        0.0
    } else {
        100.0 * bp * (log_sum / orders as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty: bp,
        hyp_length: c,
        ref_length: r,
        smoothing: cfg.smoothing,
        epsilon: cfg.epsilon,
    })
}

// ---- decoding --------------------------------------------------------------

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Length cap for generated tokens (EOS included).
pub fn default_max_len<F: Scalar>(model: &Model<F>, source_len: usize) -> usize {
    (2 * source_len + 10).min(model.config().max_len - 1)
}

/// Batched greedy decoding. Returns token ids without BOS/EOS. `max_len`
/// caps generated tokens, EOS included.
pub fn greedy_decode<F: Scalar>(model: &Model<F>, inputs: &[Input<'_>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let mem = model.encode(inputs)?;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; inputs.len()];
    let mut active: Vec<usize> = (0..inputs.len()).collect();
    let cap = max_len.min(model.config().max_len - 1);
    for _ in 0..cap {
        if active.is_empty() {
            break;
        }
        let pre: Vec<Vec<usize>> = active.iter().map(|&i| prefixes[i].clone()).collect();
        let logits = model.next_token_logits(&mem, &active, &pre)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, row) in active.iter().zip(&logits) {
            let tok = argmax(&log_softmax(row));
            prefixes[i].push(tok);
            if tok != EOS {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS).collect())
        .collect())
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

fn normalized(h: &Hyp, length_norm: bool) -> f64 {
    if length_norm {
        h.score / ((h.tokens.len() - 1) as f64).powf(0.6)
    } else {
        h.score
    }
}

/// Beam search for one input. Hypotheses are ranked by summed
/// log-probability, divided by `length^0.6` when `length_norm` is set.
/// `beam_size = 1` is exactly greedy decoding.
pub fn beam_decode<F: Scalar>(
    model: &Model<F>,
    input: Input<'_>,
    beam_size: usize,
    length_norm: bool,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let mem = model.encode(&[input])?;
    let cap = max_len.min(model.config().max_len - 1);
    let mut live = vec![Hyp {
        tokens: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..cap {
        let rows = vec![0; live.len()];
        let pre: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let logits = model.next_token_logits(&mem, &rows, &pre)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, row) in logits.iter().enumerate() {
            for (tok, lp) in log_softmax(row).into_iter().enumerate() {
                cands.push((live[b].score + lp, b, tok));
            }
        }
        // Highest score first; ties go to the earlier beam, then lower id.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for (score, b, tok) in cands.into_iter().take(beam_size) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let h = Hyp { tokens, score };
            if tok == EOS {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if finished.len() >= beam_size || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    let mut best = &pool[0];
    for h in &pool[1..] {
        if normalized(h, length_norm) > normalized(best, length_norm) {
            best = h;
        }
    }
    Ok(best.tokens[1..].iter().copied().take_while(|&t| t != EOS).collect())
}

// ---- contrastive scoring ---------------------------------------------------

/// Encoded contrastive test item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringItem {
    pub contexts: Vec<Vec<usize>>,
    pub source: Vec<usize>,
    pub correct: Vec<usize>,
    pub incorrect: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub correct: f64,
    pub incorrect: Vec<f64>,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveResult {
    pub accuracy: f64,
    pub correct_count: usize,
    pub item_count: usize,
    pub items: Vec<ItemScore>,
}

/// Items scored per forward pass.
const SCORE_CHUNK: usize = 16;

/// An item counts as correct only if the correct variant scores strictly
/// higher than every incorrect one.
pub fn contrastive_accuracy<F: Scalar>(model: &Model<F>, suite: &[ScoringItem]) -> Result<ContrastiveResult> {
    if suite.is_empty() {
        return Err(Error::Empty("contrastive suite"));
    }
    if suite.iter().any(|it| it.incorrect.is_empty()) {
        return Err(Error::Config("contrastive item without incorrect variants".into()));
    }
    let scored: Vec<Vec<ItemScore>> = suite
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let mut inputs = Vec::new();
            for it in chunk {
                for t in std::iter::once(&it.correct).chain(&it.incorrect) {
                    inputs.push(Input {
                        contexts: &it.contexts,
                        source: &it.source,
                        target: t,
                    });
                }
            }
            let lps = model.log_probs(&inputs)?;
            let mut pos = 0;
            Ok(chunk
                .iter()
                .map(|it| {
                    let correct = lps[pos];
                    let incorrect = lps[pos + 1..pos + 1 + it.incorrect.len()].to_vec();
                    pos += 1 + it.incorrect.len();
                    ItemScore {
                        ok: incorrect.iter().all(|&s| correct > s),
                        correct,
                        incorrect,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let items: Vec<ItemScore> = scored.into_iter().flatten().collect();
    let correct_count = items.iter().filter(|s| s.ok).count();
    Ok(ContrastiveResult {
        accuracy: correct_count as f64 / items.len() as f64,
        correct_count,
        item_count: items.len(),
        items,
    })
}

// ---- suite file ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteRecord {
    ctx: Vec<String>,
    src: String,
    tgt: String,
    wrong: Vec<String>,
}

pub fn write_suite<W: Write>(items: &[ContrastiveTestItem], mut out: W) -> std::io::Result<()> {
    for it in items {
        let rec = SuiteRecord {
            ctx: it.contexts.iter().map(|c| c.join(" ")).collect(),
            src: it.source.join(" "),
            tgt: it.target_correct.join(" "),
            wrong: it.targets_incorrect.iter().map(|w| w.join(" ")).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_suite(items: &[ContrastiveTestItem], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_suite(items, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a suite file. The pronoun position is recovered as the first token
/// where the correct and the first incorrect target differ.
pub fn parse_suite(text: &str, name: &str) -> Result<Vec<ContrastiveTestItem>> {
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
        let rec: SuiteRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.wrong.is_empty() {
            return Err(bad("item without incorrect variants".into()));
        }
        let target_correct = tokenize(&rec.tgt);
        let targets_incorrect: Vec<Vec<String>> = rec.wrong.iter().map(|w| tokenize(w)).collect();
        let pronoun_position = target_correct
            .iter()
            .zip(&targets_incorrect[0])
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        out.push(ContrastiveTestItem {
            contexts: rec.ctx.iter().map(|c| tokenize(c)).collect(),
            source: tokenize(&rec.src),
            target_correct,
            targets_incorrect,
            pronoun_position,
        });
    }
    Ok(out)
}

pub fn load_suite(path: &Path) -> Result<Vec<ContrastiveTestItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_suite(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::tokenizer::BOC;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn none() -> BleuConfig {
        BleuConfig {
            smoothing: Smoothing::None,
            ..BleuConfig::default()
        }
    }

    #[test]
    fn identity_is_100() {
        let h = vec![t("der mantel ist rot"), t("er faellt")];
        assert_eq!(corpus_bleu(&h, &h, &none()).unwrap().bleu, 100.0);
        assert_eq!(corpus_bleu(&h, &h, &BleuConfig::default()).unwrap().bleu, 100.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let r = corpus_bleu(&[t("the the the the the the the")], &[t("the cat is on the mat")], &none()).unwrap();
        assert!((r.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(format!("{:.6}", r.precisions[0]), "0.285714");
    }

    #[test]
    fn zero_overlap_without_smoothing() {
        let r = corpus_bleu(&[t("a b c d e")], &[t("a b c x e")], &none()).unwrap();
        assert_eq!(r.matches[3], 0);
        assert_eq!(r.bleu, 0.0);
        let s = corpus_bleu(&[t("a b c d e")], &[t("a b c x e")], &BleuConfig::default()).unwrap();
        assert!(s.bleu > 0.0);
        assert_eq!(s.precisions[3], 0.1 / 2.0);
    }

    #[test]
    fn brevity_penalty() {
        let r = corpus_bleu(&[t("a b c d")], &[t("a b c d e f g h")], &none()).unwrap();
        assert!((r.brevity_penalty - (1.0f64 - 2.0).exp()).abs() < 1e-15);
        assert!((r.bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        let long = corpus_bleu(&[t("a b c d e")], &[t("a b c d")], &none()).unwrap();
        assert_eq!(long.brevity_penalty, 1.0);
    }

    #[test]
    fn case_and_char_modes() {
        let cfg = BleuConfig {
            case_sensitive: false,
            ..none()
        };
        assert_eq!(corpus_bleu(&[t("Der Mantel")], &[t("der mantel")], &cfg).unwrap().bleu, 100.0);
        assert!(corpus_bleu(&[t("Der Mantel")], &[t("der mantel")], &none()).unwrap().bleu < 100.0);
        let chars = BleuConfig {
            char_level: true,
            ..none()
        };
        let r = corpus_bleu(&[t("ab cd")], &[t("abcd")], &chars).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.hyp_length, 4);
    }

    #[test]
    fn bleu_errors() {
        assert!(corpus_bleu(&[], &[], &none()).is_err());
        assert!(corpus_bleu(&[t("a")], &[], &none()).is_err());
    }

    proptest! {
        #[test]
        fn bleu_is_order_invariant(segs in prop::collection::vec(("[a-d]( [a-d]){0,6}", "[a-d]( [a-d]){0,6}"), 1..8), seed in any::<u64>()) {
            let hyps: Vec<Vec<String>> = segs.iter().map(|s| t(&s.0)).collect();
            let refs: Vec<Vec<String>> = segs.iter().map(|s| t(&s.1)).collect();
            let a = corpus_bleu(&hyps, &refs, &BleuConfig::default()).unwrap();
            let mut idx: Vec<usize> = (0..hyps.len()).collect();
            crate::rng::StreamRng::new(seed, 0).shuffle(&mut idx);
            let h2: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
            let r2: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
            let b = corpus_bleu(&h2, &r2, &BleuConfig::default()).unwrap();
            prop_assert_eq!(a.matches, b.matches);
            prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
            prop_assert!(a.bleu >= 0.0 && a.bleu <= 100.0);
            prop_assert_eq!(corpus_bleu(&hyps, &hyps, &BleuConfig::default()).unwrap().bleu, 100.0);
        }
    }

    fn model(variant: Variant, seed: u64) -> Model<f64> {
        Model::new(
            ModelConfig {
                variant,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                dropout: 0.0,
                max_len: 24,
                vocab_size: 10,
                context_size: 2,
                share_embeddings: true,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn beam_one_equals_greedy() {
        for v in Variant::ALL {
            for seed in 0..4 {
                let m = model(v, seed);
                let srcs = [vec![BOS, 5, 6, EOS], vec![BOS, 7, EOS], vec![BOS, 9, 8, 7, 6, EOS]];
                let ctx = vec![vec![BOC, 6, 7]];
                let inputs: Vec<Input> = srcs
                    .iter()
                    .map(|s| Input {
                        contexts: &ctx,
                        source: s,
                        target: &[],
                    })
                    .collect();
                let greedy = greedy_decode(&m, &inputs, 12).unwrap();
                for (inp, g) in inputs.iter().zip(&greedy) {
                    assert_eq!(&beam_decode(&m, *inp, 1, false, 12).unwrap(), g);
                    assert_eq!(&beam_decode(&m, *inp, 1, true, 12).unwrap(), g);
                    assert!(g.len() <= 12);
                    assert!(!g.contains(&EOS));
                }
            }
        }
    }

    #[test]
    fn decodes_deterministic_distribution() {
        // Strong bias on a single token at every step: the model can only
        // produce it until the cap, then the cap ends decoding.
        let mut m = model(Variant::Sent, 1);
        let w = m.params().id("out.w").unwrap();
        let b = m.params().id("out.b").unwrap();
        m.params_mut().get_mut(w).data_mut().fill(0.0);
        for (i, x) in m.params_mut().get_mut(b).data_mut().iter_mut().enumerate() {
            *x = if i == 7 { 50.0 } else { 0.0 };
        }
        let src = vec![BOS, 5, EOS];
        let inp = Input {
            contexts: &[],
            source: &src,
            target: &[],
        };
        assert_eq!(greedy_decode(&m, &[inp], 5).unwrap()[0], vec![7; 5]);
        assert_eq!(beam_decode(&m, inp, 3, true, 5).unwrap(), vec![7; 5]);
        // EOS favoured: empty output.
        for (i, x) in m.params_mut().get_mut(b).data_mut().iter_mut().enumerate() {
            *x = if i == EOS { 50.0 } else { 0.0 };
        }
        assert!(greedy_decode(&m, &[inp], 5).unwrap()[0].is_empty());
    }

    #[test]
    fn beam_search_finds_higher_scores() {
        let m = model(Variant::MultiEnc, 3);
        let src = vec![BOS, 5, 6, 7, EOS];
        let ctx = vec![vec![BOC, 8]];
        let inp = Input {
            contexts: &ctx,
            source: &src,
            target: &[],
        };
        let score = |toks: &[usize]| {
            let mut tgt = vec![BOS];
            tgt.extend_from_slice(toks);
            tgt.push(EOS);
            m.log_prob(Input { target: &tgt, ..inp }).unwrap()
        };
        let g = greedy_decode(&m, &[inp], 8).unwrap().remove(0);
        let b = beam_decode(&m, inp, 4, false, 8).unwrap();
        if g.len() < 8 && b.len() < 8 {
            assert!(score(&b) >= score(&g) - 1e-12);
        }
    }

    fn item(ctx: &[usize], correct: &[usize], wrong: &[&[usize]]) -> ScoringItem {
        let wrap = |x: &[usize]| [&[BOS][..], x, &[EOS]].concat();
        ScoringItem {
            contexts: vec![[&[BOC][..], ctx].concat()],
            source: vec![BOS, 5, EOS],
            correct: wrap(correct),
            incorrect: wrong.iter().map(|w| wrap(w)).collect(),
        }
    }

    #[test]
    fn ties_count_as_wrong() {
        let mut m = model(Variant::Sent, 0);
        let w = m.params().id("out.w").unwrap();
        let b = m.params().id("out.b").unwrap();
        m.params_mut().get_mut(w).data_mut().fill(0.0);
        m.params_mut().get_mut(b).data_mut().fill(0.0);
        let suite = vec![item(&[6], &[7], &[&[8], &[9]]); 4];
        let r = contrastive_accuracy(&m, &suite).unwrap();
        assert_eq!(r.accuracy, 0.0);
        // Bias towards token 7 makes the correct variant win.
        m.params_mut().get_mut(b).data_mut()[7] = 3.0;
        let mut suite = suite;
        suite[3] = item(&[6], &[8], &[&[7], &[9]]);
        let r = contrastive_accuracy(&m, &suite).unwrap();
        assert_eq!(r.correct_count, 3);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn accuracy_is_order_and_duplicate_invariant() {
        let m = model(Variant::MultiEnc, 5);
        let suite: Vec<ScoringItem> = (0..20)
            .map(|i| item(&[5 + i % 4], &[6 + i % 3], &[&[5 + (i + 1) % 4], &[9]]))
            .collect();
        let a = contrastive_accuracy(&m, &suite).unwrap();
        let mut rev = suite.clone();
        rev.reverse();
        let b = contrastive_accuracy(&m, &rev).unwrap();
        assert_eq!(a.correct_count, b.correct_count);
        let mut dup = suite.clone();
        dup.push(suite[0].clone());
        let c = contrastive_accuracy(&m, &dup).unwrap();
        assert_eq!(c.correct_count, a.correct_count + a.items[0].ok as usize);
        // Scores agree with single-example log-probs.
        let single = m
            .log_prob(Input {
                contexts: &suite[2].contexts,
                source: &suite[2].source,
                target: &suite[2].incorrect[1],
            })
            .unwrap();
        assert_eq!(a.items[2].incorrect[1], single);
    }

    #[test]
    fn scoring_errors() {
        let m = model(Variant::Sent, 0);
        assert!(contrastive_accuracy(&m, &[]).is_err());
        assert!(contrastive_accuracy(&m, &[item(&[5], &[6], &[])]).is_err());
    }

    #[test]
    fn suite_round_trip() {
        let items = vec![ContrastiveTestItem {
            contexts: vec![t("the coat is red")],
            source: t("it falls"),
            target_correct: t("er faellt"),
            targets_incorrect: vec![t("sie faellt"), t("es faellt")],
            pronoun_position: 0,
        }];
        let mut buf = Vec::new();
        write_suite(&items, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "{\"ctx\":[\"the coat is red\"],\"src\":\"it falls\",\"tgt\":\"er faellt\",\"wrong\":[\"sie faellt\",\"es faellt\"]}\n"
        );
        assert_eq!(parse_suite(&text, "mem").unwrap(), items);
        assert!(parse_suite("{\"ctx\":[],\"src\":\"a\",\"tgt\":\"b\",\"wrong\":[]}", "mem").is_err());
    }
}
