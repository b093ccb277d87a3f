//! Transformer encoder-decoder with four ways of reading preceding context.
//!
//! All variants share the pre-norm layer layout
//! `x + drop(sublayer(ln(x)))` with a final layer norm per stack. The
//! context-aware variants differ only in how the encoder memory is built:
//!
//! * `Sent`: source only.
//! * `Concat`: `[BOC c1 .. BOC c2 .. BOS x .. EOS]` through one encoder, with
//!   positions running over the whole sequence.
//! * `MultiEnc`: the flattened contexts go through the source encoder (same
//!   weights), source states attend over them, and a gate mixes the two.
//! * `MultiEncHier`: each context sentence is encoded on its own by the
//!   source encoder, pooled to one vector by attention with a learned query,
//!   passed through one sentence-level layer (pooled vectors plus sentence
//!   positions, pre-norm self-attention and FFN, final norm), then attended
//!   by the source states and gated as above.
//!
//! The gate is `g = sigmoid(W_g [h_src; h_ctx] + b_g)` and the memory is
//! `g * h_src + (1 - g) * h_ctx`, applied once to the final encoder output.
//! Examples without context keep `h_src` exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tokenizer::{EncodedExample, BOC, BOS, EOS, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Sent,
    Concat,
    MultiEnc,
    MultiEncHier,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sent, Variant::Concat, Variant::MultiEnc, Variant::MultiEncHier];

    pub fn uses_context(self) -> bool {
        self != Variant::Sent
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sent" => Ok(Variant::Sent),
            "concat" => Ok(Variant::Concat),
            "multi-enc" => Ok(Variant::MultiEnc),
            "multi-enc-hier" => Ok(Variant::MultiEncHier),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Sent => "sent",
            Variant::Concat => "concat",
            Variant::MultiEnc => "multi-enc",
            Variant::MultiEncHier => "multi-enc-hier",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub context_size: usize,
    pub share_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::MultiEnc,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout: 0.1,
            max_len: 128,
            vocab_size: 0,
            context_size: 2,
            share_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("n_layers, d_ff and max_len must be positive".into());
        }
        if self.vocab_size <= BOC {
            return bad(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
}

type Decl = Vec<(String, Vec<usize>, Init)>;

fn lin(decl: &mut Decl, name: &str, i: usize, o: usize) {
    decl.push((format!("{name}.w"), vec![i, o], Init::Xavier));
    decl.push((format!("{name}.b"), vec![o], Init::Zeros));
}

fn norm(decl: &mut Decl, name: &str, d: usize) {
    decl.push((format!("{name}.g"), vec![d], Init::Ones));
    decl.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn attn(decl: &mut Decl, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        lin(decl, &format!("{name}.{p}"), d, d);
    }
}

fn enc_layer(decl: &mut Decl, p: &str, d: usize, d_ff: usize) {
    norm(decl, &format!("{p}ln1"), d);
    attn(decl, &format!("{p}attn"), d);
    norm(decl, &format!("{p}ln2"), d);
    lin(decl, &format!("{p}ff1"), d, d_ff);
    lin(decl, &format!("{p}ff2"), d_ff, d);
}

/// Parameter declarations in registration order, plus `(alias, target)`
/// pairs.
pub fn declare(config: &ModelConfig) -> (Decl, Vec<(String, String)>) {
    let (d, ff) = (config.d_model, config.d_ff);
    let mut decl = Decl::new();
    let mut aliases = Vec::new();

    decl.push(("emb.src".into(), vec![config.vocab_size, d], Init::Xavier));
    if config.share_embeddings {
        aliases.push(("emb.tgt".into(), "emb.src".into()));
    } else {
        decl.push(("emb.tgt".into(), vec![config.vocab_size, d], Init::Xavier));
    }
    let enc_start = decl.len();
    for l in 0..config.n_layers {
        enc_layer(&mut decl, &format!("enc.{l}."), d, ff);
    }
    norm(&mut decl, "enc.ln", d);
    if matches!(config.variant, Variant::MultiEnc | Variant::MultiEncHier) {
        for (name, _, _) in &decl[enc_start..] {
            aliases.push((format!("ctx_{name}"), name.clone()));
        }
        attn(&mut decl, "s2c", d);
        lin(&mut decl, "gate", 2 * d, d);
    }
    if config.variant == Variant::MultiEncHier {
        decl.push(("hier.query".into(), vec![1, d], Init::Xavier));
        attn(&mut decl, "hier.pool", d);
        enc_layer(&mut decl, "hier.", d, ff);
        norm(&mut decl, "hier.ln", d);
    }
    for l in 0..config.n_layers {
        let p = format!("dec.{l}.");
        norm(&mut decl, &format!("{p}ln1"), d);
        attn(&mut decl, &format!("{p}self"), d);
        norm(&mut decl, &format!("{p}ln2"), d);
        attn(&mut decl, &format!("{p}cross"), d);
        norm(&mut decl, &format!("{p}ln3"), d);
        lin(&mut decl, &format!("{p}ff1"), d, ff);
        lin(&mut decl, &format!("{p}ff2"), ff, d);
    }
    norm(&mut decl, "dec.ln", d);
    lin(&mut decl, "out", d, config.vocab_size);
    (decl, aliases)
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains. Each tensor is
/// drawn from its own stream keyed by the parameter name.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    config.validate()?;
    let (decl, aliases) = declare(config);
    let mut store = ParamStore::new();
    for (name, shape, init) in decl {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::ZERO; n],
            Init::Ones => vec![F::ONE; n],
            Init::Xavier => {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let mut rng = StreamRng::labeled(seed, &format!("init/{name}"));
                (0..n)
                    .map(|_| F::from_f64((2.0 * rng.next_f64() - 1.0) * limit))
                    .collect()
            }
        };
        store.insert(&name, Tensor::new(shape, data)?);
    }
    for (alias, target) in aliases {
        let id = store.id(&target).expect("alias target declared");
        store.alias(&alias, id);
    }
    Ok(store)
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Encoder {
    layers: Vec<EncLayer>,
    ln: Norm,
}

#[derive(Clone, Debug)]
struct Hier {
    query: ParamId,
    pool: Attn,
    layer: EncLayer,
    ln: Norm,
}

#[derive(Clone, Debug)]
struct Ctx {
    encoder: Encoder,
    s2c: Attn,
    gate: Linear,
    hier: Option<Hier>,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: ParamId,
    encoder: Encoder,
    ctx: Option<Ctx>,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out: Linear,
}

struct Resolver<'a, F> {
    store: &'a ParamStore<F>,
    config: &'a ModelConfig,
    shapes: std::collections::HashMap<String, Vec<usize>>,
}

impl<F: Scalar> Resolver<'_, F> {
    fn id(&self, name: &str) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let want = &self.shapes[name];
        let got = self.store.get(id).shape();
        if got != want.as_slice() {
            return Err(Error::Shape {
                op: "parameter",
                lhs: want.clone(),
                rhs: got.to_vec(),
            });
        }
        Ok(id)
    }
    fn lin(&self, n: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.id(&format!("{n}.w"))?,
            b: self.id(&format!("{n}.b"))?,
        })
    }
    fn norm(&self, n: &str) -> Result<Norm> {
        Ok(Norm {
            g: self.id(&format!("{n}.g"))?,
            b: self.id(&format!("{n}.b"))?,
        })
    }
    fn attn(&self, n: &str) -> Result<Attn> {
        Ok(Attn {
            q: self.lin(&format!("{n}.q"))?,
            k: self.lin(&format!("{n}.k"))?,
            v: self.lin(&format!("{n}.v"))?,
            o: self.lin(&format!("{n}.o"))?,
        })
    }
    fn enc_layer(&self, p: &str, attn: &str) -> Result<EncLayer> {
        Ok(EncLayer {
            ln1: self.norm(&format!("{p}ln1"))?,
            attn: self.attn(&format!("{p}{attn}"))?,
            ln2: self.norm(&format!("{p}ln2"))?,
            ff1: self.lin(&format!("{p}ff1"))?,
            ff2: self.lin(&format!("{p}ff2"))?,
        })
    }
    fn encoder(&self, prefix: &str) -> Result<Encoder> {
        Ok(Encoder {
            layers: (0..self.config.n_layers)
                .map(|l| self.enc_layer(&format!("{prefix}enc.{l}."), "attn"))
                .collect::<Result<_>>()?,
            ln: self.norm(&format!("{prefix}enc.ln"))?,
        })
    }
    fn layout(&self) -> Result<Layout> {
        let c = self.config;
        let ctx = match c.variant {
            Variant::MultiEnc | Variant::MultiEncHier => Some(Ctx {
                encoder: self.encoder("ctx_")?,
                s2c: self.attn("s2c")?,
                gate: self.lin("gate")?,
                hier: if c.variant == Variant::MultiEncHier {
                    Some(Hier {
                        query: self.id("hier.query")?,
                        pool: self.attn("hier.pool")?,
                        layer: self.enc_layer("hier.", "attn")?,
                        ln: self.norm("hier.ln")?,
                    })
                } else {
                    None
                },
            }),
            _ => None,
        };
        Ok(Layout {
            src_emb: self.id("emb.src")?,
            tgt_emb: self.id("emb.tgt")?,
            encoder: self.encoder("")?,
            ctx,
            dec: (0..c.n_layers)
                .map(|l| {
                    let p = format!("dec.{l}.");
                    Ok(DecLayer {
                        ln1: self.norm(&format!("{p}ln1"))?,
                        self_attn: self.attn(&format!("{p}self"))?,
                        ln2: self.norm(&format!("{p}ln2"))?,
                        cross: self.attn(&format!("{p}cross"))?,
                        ln3: self.norm(&format!("{p}ln3"))?,
                        ff1: self.lin(&format!("{p}ff1"))?,
                        ff2: self.lin(&format!("{p}ff2"))?,
                    })
                })
                .collect::<Result<_>>()?,
            dec_ln: self.norm("dec.ln")?,
            out: self.lin("out")?,
        })
    }
}

/// Borrowed model input: encoded contexts, source and target.
#[derive(Clone, Copy, Debug)]
pub struct Input<'a> {
    pub contexts: &'a [Vec<usize>],
    pub source: &'a [usize],
    pub target: &'a [usize],
}

impl<'a> From<&'a EncodedExample> for Input<'a> {
    fn from(e: &'a EncodedExample) -> Self {
        Input {
            contexts: &e.contexts,
            source: &e.source,
            target: &e.target,
        }
    }
}

/// Encoder output for a batch, detached from any graph.
#[derive(Clone, Debug)]
pub struct Memory<F> {
    pub states: Tensor<F>,
    pub len: usize,
    /// `[batch, len]`, true at padding.
    pub pad: Vec<bool>,
}

struct Encoded {
    states: Var,
    len: usize,
    pad: Vec<bool>,
    gate: Option<Var>,
}

/// Teacher-forced decoder output for a padded batch.
pub struct Forward {
    /// `[batch * steps, vocab]`
    pub logits: Var,
    pub batch: usize,
    pub steps: usize,
    /// Next-token labels per row, `PAD` at padding.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

fn pad_mask(pad: &[bool], batch: usize, tq: usize, tk: usize, causal: bool) -> Vec<bool> {
    let mut m = vec![false; batch * tq * tk];
    for b in 0..batch {
        for i in 0..tq {
            for j in 0..tk {
                m[(b * tq + i) * tk + j] = pad[b * tk + j] || (causal && j > i);
            }
        }
    }
    m
}

/// Right-pads sequences with PAD to a common length (at least 1).
fn pad_batch(seqs: &[Vec<usize>]) -> (Vec<usize>, Vec<bool>, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut pad = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        for t in 0..len {
            ids.push(s.get(t).copied().unwrap_or(PAD));
            pad.push(t >= s.len());
        }
    }
    (ids, pad, len)
}

pub fn sinusoid(pos: usize, i: usize, d: usize) -> f64 {
    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps an existing store; fails when a parameter is missing or has the
    /// wrong shape for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let (decl, aliases) = declare(&config);
        let mut shapes: std::collections::HashMap<String, Vec<usize>> =
            decl.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
        for (a, t) in &aliases {
            let s = shapes[t].clone();
            shapes.insert(a.clone(), s);
        }
        if params.len() != decl.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                decl.len(),
                params.len()
            )));
        }
        for (a, t) in &aliases {
            if params.id(a) != params.id(t) {
                return Err(Error::Config(format!("{a} must share storage with {t}")));
            }
        }
        let layout = Resolver {
            store: &params,
            config: &config,
            shapes,
        }
        .layout()?;
        Ok(Model { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    // ---- building blocks ------------------------------------------------

    fn linear(&self, g: &mut Graph<F>, p: &Linear, x: Var) -> Result<Var> {
        let w = g.param(&self.params, p.w);
        let b = g.param(&self.params, p.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph<F>, p: &Norm, x: Var) -> Result<Var> {
        let gain = g.param(&self.params, p.g);
        let bias = g.param(&self.params, p.b);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Multi-head attention. `xq` is `[batch * tq, d]`, `xkv` is
    /// `[batch * tk, d]`, `mask` is `[batch, tq, tk]` (true = blocked).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<F>,
        p: &Attn,
        xq: Var,
        xkv: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        mask: Vec<bool>,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let q = self.linear(g, &p.q, xq)?;
        let k = self.linear(g, &p.k, xkv)?;
        let v = self.linear(g, &p.v, xkv)?;
        let q = g.split_heads(q, batch, tq, h)?;
        let k = g.split_heads(k, batch, tk, h)?;
        let v = g.split_heads(v, batch, tk, h)?;
        let s = g.batch_matmul(q, k, true)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let s = g.masked_fill(s, mask, h)?;
        let a = g.softmax(s);
        let o = g.batch_matmul(a, v, false)?;
        let o = g.merge_heads(o, batch, tq, h)?;
        self.linear(g, &p.o, o)
    }

    fn feed_forward(&self, g: &mut Graph<F>, ff1: &Linear, ff2: &Linear, x: Var) -> Result<Var> {
        let hdn = self.linear(g, ff1, x)?;
        let hdn = g.relu(hdn);
        self.linear(g, ff2, hdn)
    }

    fn residual(&self, g: &mut Graph<F>, x: Var, branch: Var) -> Result<Var> {
        let branch = g.dropout(branch, self.config.dropout);
        g.add(x, branch)
    }

    fn enc_layer(&self, g: &mut Graph<F>, l: &EncLayer, x: Var, batch: usize, len: usize, pad: &[bool]) -> Result<Var> {
        let n = self.norm(g, &l.ln1, x)?;
        let a = self.attention(g, &l.attn, n, n, batch, len, len, pad_mask(pad, batch, len, len, false))?;
        let x = self.residual(g, x, a)?;
        let n = self.norm(g, &l.ln2, x)?;
        let f = self.feed_forward(g, &l.ff1, &l.ff2, n)?;
        self.residual(g, x, f)
    }

    fn encoder(&self, g: &mut Graph<F>, e: &Encoder, x: Var, batch: usize, len: usize, pad: &[bool]) -> Result<Var> {
        let mut x = x;
        for l in &e.layers {
            x = self.enc_layer(g, l, x, batch, len, pad)?;
        }
        self.norm(g, &e.ln, x)
    }

    /// Positional table rows for `positions`, as a `[n, d]` constant.
    fn positions(&self, g: &mut Graph<F>, positions: impl Iterator<Item = usize>) -> Var {
        let d = self.config.d_model;
        let mut data = Vec::new();
        let mut n = 0;
        for p in positions {
            data.extend((0..d).map(|i| F::from_f64(sinusoid(p, i, d))));
            n += 1;
        }
        g.constant(Tensor::new(vec![n, d], data).expect("positional table shape"))
    }

    /// `sqrt(d) * E[ids] + PE`, followed by dropout.
    fn embed(&self, g: &mut Graph<F>, table: ParamId, ids: &[usize], len: usize) -> Result<Var> {
        let t = g.param(&self.params, table);
        let e = g.embedding(t, ids)?;
        let e = g.scale(e, (self.config.d_model as f64).sqrt());
        let pe = self.positions(g, (0..ids.len()).map(|i| i % len));
        let x = g.add(e, pe)?;
        Ok(g.dropout(x, self.config.dropout))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn contexts<'a>(&self, input: &Input<'a>) -> &'a [Vec<usize>] {
        let c = input.contexts;
        &c[c.len().saturating_sub(self.config.context_size)..]
    }

    // ---- encoder memory -------------------------------------------------

    /// Encoder memory `[batch * len, d]` and its padding mask.
    pub fn encode_graph(&self, g: &mut Graph<F>, batch: &[Input<'_>]) -> Result<(Var, usize, Vec<bool>)> {
        let e = self.encode_parts(g, batch)?;
        Ok((e.states, e.len, e.pad))
    }

    fn encode_parts(&self, g: &mut Graph<F>, batch: &[Input<'_>]) -> Result<Encoded> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        for inp in batch {
            if inp.source.iter().all(|&t| t == BOS || t == EOS || t == PAD) {
                return Err(Error::EmptySource);
            }
        }
        let seqs: Vec<Vec<usize>> = match self.config.variant {
            Variant::Concat => batch
                .iter()
                .map(|inp| {
                    let mut s: Vec<usize> = self.contexts(inp).iter().flatten().copied().collect();
                    s.extend_from_slice(inp.source);
                    s
                })
                .collect(),
            _ => batch.iter().map(|inp| inp.source.to_vec()).collect(),
        };
        for s in &seqs {
            self.check_len(s.len())?;
        }
        let (ids, pad, len) = pad_batch(&seqs);
        let x = self.embed(g, self.layout.src_emb, &ids, len)?;
        let h_src = self.encoder(g, &self.layout.encoder, x, b, len, &pad)?;

        let plain = Encoded {
            states: h_src,
            len,
            pad: pad.clone(),
            gate: None,
        };
        let Some(ctx) = &self.layout.ctx else {
            return Ok(plain);
        };
        let has_ctx: Vec<bool> = batch.iter().map(|inp| !self.contexts(inp).is_empty()).collect();
        if !has_ctx.iter().any(|&h| h) {
            return Ok(plain);
        }
        let (h_ctx, ctx_len, ctx_pad) = match &ctx.hier {
            None => self.flat_context(g, ctx, batch)?,
            Some(hier) => self.hier_context(g, ctx, hier, batch)?,
        };
        let mask = pad_mask(&ctx_pad, b, len, ctx_len, false);
        let c = self.attention(g, &ctx.s2c, h_src, h_ctx, b, len, ctx_len, mask)?;
        let cat = g.concat_cols(&[h_src, c])?;
        let gate = self.linear(g, &ctx.gate, cat)?;
        let gate = g.sigmoid(gate);
        // g * h_src + (1 - g) * c = c + g * (h_src - c)
        let diff = g.sub(h_src, c)?;
        let gd = g.mul(gate, diff)?;
        let gated = g.add(c, gd)?;
        let d = self.config.d_model;
        let row_mask: Vec<F> = (0..b * len)
            .flat_map(|r| {
                let on = if has_ctx[r / len] { F::ONE } else { F::ZERO };
                std::iter::repeat_n(on, d)
            })
            .collect();
        let off: Vec<F> = row_mask.iter().map(|&m| F::ONE - m).collect();
        let on = g.constant(Tensor::new(vec![b * len, d], row_mask)?);
        let off = g.constant(Tensor::new(vec![b * len, d], off)?);
        let a = g.mul(on, gated)?;
        let s = g.mul(off, h_src)?;
        let h = g.add(a, s)?;
        Ok(Encoded {
            states: h,
            len,
            pad,
            gate: Some(gate),
        })
    }

    fn flat_context(&self, g: &mut Graph<F>, ctx: &Ctx, batch: &[Input<'_>]) -> Result<(Var, usize, Vec<bool>)> {
        let seqs: Vec<Vec<usize>> = batch
            .iter()
            .map(|inp| self.contexts(inp).iter().flatten().copied().collect())
            .collect();
        for s in &seqs {
            self.check_len(s.len())?;
        }
        let (ids, pad, len) = pad_batch(&seqs);
        let x = self.embed(g, self.layout.src_emb, &ids, len)?;
        let h = self.encoder(g, &ctx.encoder, x, batch.len(), len, &pad)?;
        Ok((h, len, pad))
    }

    fn hier_context(
        &self,
        g: &mut Graph<F>,
        ctx: &Ctx,
        hier: &Hier,
        batch: &[Input<'_>],
    ) -> Result<(Var, usize, Vec<bool>)> {
        let b = batch.len();
        let n = batch.iter().map(|inp| self.contexts(inp).len()).max().unwrap_or(0);
        let mut sents: Vec<Vec<usize>> = Vec::with_capacity(b * n);
        let mut missing = Vec::with_capacity(b * n);
        for inp in batch {
            let c = self.contexts(inp);
            for k in 0..n {
                match c.get(k) {
                    Some(s) => {
                        self.check_len(s.len())?;
                        sents.push(s.clone());
                        missing.push(false);
                    }
                    None => {
                        sents.push(Vec::new());
                        missing.push(true);
                    }
                }
            }
        }
        // Token level: every sentence through the shared encoder.
        let (ids, pad, len) = pad_batch(&sents);
        let x = self.embed(g, self.layout.src_emb, &ids, len)?;
        let tok = self.encoder(g, &ctx.encoder, x, b * n, len, &pad)?;
        // Pooling: one learned query attends over each sentence's tokens.
        let qt = g.param(&self.params, hier.query);
        let q = g.embedding(qt, &vec![0; b * n])?;
        let pooled = self.attention(g, &hier.pool, q, tok, b * n, 1, len, pad_mask(&pad, b * n, 1, len, false))?;
        // Sentence level over pooled vectors with sentence positions.
        let pe = self.positions(g, (0..b * n).map(|i| i % n));
        let x = g.add(pooled, pe)?;
        let x = self.enc_layer(g, &hier.layer, x, b, n, &missing)?;
        let x = self.norm(g, &hier.ln, x)?;
        Ok((x, n, missing))
    }

    /// Gate activations `[len, d]` for one example; `None` when the variant
    /// has no gate or the example has no context.
    pub fn gate_values(&self, input: Input<'_>) -> Result<Option<Tensor<F>>> {
        let mut g = Graph::new();
        let e = self.encode_parts(&mut g, &[input])?;
        Ok(e.gate.map(|v| g.value(v).clone()))
    }

    /// Encoder memory without gradient tracking, for decoding.
    pub fn encode(&self, batch: &[Input<'_>]) -> Result<Memory<F>> {
        let mut g = Graph::new();
        let (h, len, pad) = self.encode_graph(&mut g, batch)?;
        Ok(Memory {
            states: g.value(h).clone(),
            len,
            pad,
        })
    }

    // ---- decoder --------------------------------------------------------

    /// Decoder logits `[batch * steps, vocab]` for right-padded `prefixes`.
    #[allow(clippy::too_many_arguments)]
    fn decode_graph(
        &self,
        g: &mut Graph<F>,
        mem: Var,
        mem_len: usize,
        mem_pad: &[bool],
        prefixes: &[Vec<usize>],
    ) -> Result<(Var, usize)> {
        let b = prefixes.len();
        for p in prefixes {
            self.check_len(p.len())?;
        }
        let (ids, pad, steps) = pad_batch(prefixes);
        let mut x = self.embed(g, self.layout.tgt_emb, &ids, steps)?;
        let self_mask = pad_mask(&pad, b, steps, steps, true);
        let cross_mask = pad_mask(mem_pad, b, steps, mem_len, false);
        for l in &self.layout.dec {
            let n = self.norm(g, &l.ln1, x)?;
            let a = self.attention(g, &l.self_attn, n, n, b, steps, steps, self_mask.clone())?;
            x = self.residual(g, x, a)?;
            let n = self.norm(g, &l.ln2, x)?;
            let a = self.attention(g, &l.cross, n, mem, b, steps, mem_len, cross_mask.clone())?;
            x = self.residual(g, x, a)?;
            let n = self.norm(g, &l.ln3, x)?;
            let f = self.feed_forward(g, &l.ff1, &l.ff2, n)?;
            x = self.residual(g, x, f)?;
        }
        let x = self.norm(g, &self.layout.dec_ln, x)?;
        Ok((self.linear(g, &self.layout.out, x)?, steps))
    }

    /// Teacher-forced pass: the decoder reads `target[..len-1]` and predicts
    /// `target[1..]`.
    pub fn forward(&self, g: &mut Graph<F>, batch: &[Input<'_>]) -> Result<Forward> {
        for inp in batch {
            if inp.target.len() < 2 || inp.target[0] != BOS {
                return Err(Error::Config("target must start with BOS and hold a token".into()));
            }
        }
        let (mem, mem_len, mem_pad) = self.encode_graph(g, batch)?;
        let prefixes: Vec<Vec<usize>> = batch.iter().map(|i| i.target[..i.target.len() - 1].to_vec()).collect();
        let (logits, steps) = self.decode_graph(g, mem, mem_len, &mem_pad, &prefixes)?;
        let mut labels = Vec::with_capacity(batch.len() * steps);
        for inp in batch {
            for t in 0..steps {
                labels.push(inp.target.get(t + 1).copied().unwrap_or(PAD));
            }
        }
        Ok(Forward {
            logits,
            batch: batch.len(),
            steps,
            labels,
        })
    }

    /// Per-row log-probability of the label, zero at padding: `[batch * steps]`.
    pub fn token_log_probs(&self, g: &mut Graph<F>, fwd: &Forward) -> Result<Var> {
        let lp = g.log_softmax(fwd.logits);
        let picked = g.pick(lp, &fwd.labels)?;
        let mask: Vec<F> = fwd
            .labels
            .iter()
            .map(|&l| if l == PAD { F::ZERO } else { F::ONE })
            .collect();
        let m = g.constant(Tensor::new(vec![mask.len()], mask)?);
        g.mul(picked, m)
    }

    /// Summed target log-probability per example: `[batch]`.
    pub fn sequence_log_probs(&self, g: &mut Graph<F>, batch: &[Input<'_>]) -> Result<Var> {
        let fwd = self.forward(g, batch)?;
        let tok = self.token_log_probs(g, &fwd)?;
        let m = g.reshape(tok, &[fwd.batch, fwd.steps])?;
        Ok(g.sum_rows(m))
    }

    /// `log P(y | x, C)` in inference mode.
    pub fn log_prob(&self, input: Input<'_>) -> Result<f64> {
        Ok(self.log_probs(&[input])?[0])
    }

    pub fn log_probs(&self, batch: &[Input<'_>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.sequence_log_probs(&mut g, batch)?;
        Ok(g.value(v).to_f64_vec())
    }

    /// Teacher-forced logits `[target_len - 1, vocab]` for one example.
    pub fn logits(&self, input: Input<'_>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &[input])?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Logits at the last position of each prefix: `[batch, vocab]` rows.
    pub fn next_token_logits(&self, mem: &Memory<F>, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.d_model;
        let mut states = Vec::with_capacity(rows.len() * mem.len * d);
        let mut pad = Vec::with_capacity(rows.len() * mem.len);
        for &r in rows {
            states.extend_from_slice(&mem.states.data()[r * mem.len * d..(r + 1) * mem.len * d]);
            pad.extend_from_slice(&mem.pad[r * mem.len..(r + 1) * mem.len]);
        }
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![rows.len() * mem.len, d], states)?);
        let (logits, steps) = self.decode_graph(&mut g, m, mem.len, &pad, prefixes)?;
        let v = self.config.vocab_size;
        let data = g.value(logits).data();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = i * steps + p.len() - 1;
                data[row * v..(row + 1) * v].iter().map(|x| x.to_f64()).collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
