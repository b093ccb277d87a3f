use super::*;

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        dropout: 0.0,
        max_len: 32,
        vocab_size: 9,
        context_size: 2,
        share_embeddings: true,
    }
}

fn example(ctx: &[&[usize]], src: &[usize], tgt: &[usize]) -> EncodedExample {
    let mut source = vec![BOS];
    source.extend_from_slice(src);
    source.push(EOS);
    let mut target = vec![BOS];
    target.extend_from_slice(tgt);
    target.push(EOS);
    EncodedExample {
        contexts: ctx
            .iter()
            .map(|c| {
                let mut s = vec![BOC];
                s.extend_from_slice(c);
                s
            })
            .collect(),
        source,
        target,
    }
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

// ---- straight-line reference forward pass ----------------------------------

type M = Vec<Vec<f64>>;

struct Reference<'a> {
    p: &'a ParamStore<f64>,
    c: &'a ModelConfig,
}

impl Reference<'_> {
    fn t(&self, name: &str) -> (&[usize], &[f64]) {
        let t = self.p.by_name(name).unwrap_or_else(|| panic!("{name}"));
        (t.shape(), t.data())
    }

    fn linear(&self, x: &M, name: &str) -> M {
        let (s, w) = self.t(&format!("{name}.w"));
        let (_, b) = self.t(&format!("{name}.b"));
        let (n_in, n_out) = (s[0], s[1]);
        x.iter()
            .map(|r| {
                (0..n_out)
                    .map(|j| b[j] + (0..n_in).map(|i| r[i] * w[i * n_out + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(&self, x: &M, name: &str) -> M {
        let (_, g) = self.t(&format!("{name}.g"));
        let (_, b) = self.t(&format!("{name}.b"));
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                r.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
            })
            .collect()
    }

    fn mha(&self, xq: &M, xkv: &M, name: &str, causal: bool) -> M {
        let q = self.linear(xq, &format!("{name}.q"));
        let k = self.linear(xkv, &format!("{name}.k"));
        let v = self.linear(xkv, &format!("{name}.v"));
        let h = self.c.n_heads;
        let dh = self.c.d_model / h;
        let mut out = vec![vec![0.0; self.c.d_model]; xq.len()];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..xq.len() {
                let visible: Vec<usize> = (0..xkv.len()).filter(|&j| !causal || j <= i).collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&visible) {
                    for c in cols.clone() {
                        out[i][c] += w / z * v[j][c];
                    }
                }
            }
        }
        self.linear(&out, &format!("{name}.o"))
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn ff(&self, x: &M, p: &str) -> M {
        let h: M = self
            .linear(x, &format!("{p}ff1"))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        self.linear(&h, &format!("{p}ff2"))
    }

    fn pe(&self, pos: usize) -> Vec<f64> {
        let d = self.c.d_model;
        (0..d)
            .map(|i| {
                let a = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                if i % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect()
    }

    fn embed(&self, ids: &[usize], table: &str) -> M {
        let (s, e) = self.t(table);
        let d = s[1];
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                let pe = self.pe(pos);
                (0..d).map(|i| e[id * d + i] * (d as f64).sqrt() + pe[i]).collect()
            })
            .collect()
    }

    fn enc_layer(&self, x: M, p: &str) -> M {
        let n = self.ln(&x, &format!("{p}ln1"));
        let x = Self::add(&x, &self.mha(&n, &n, &format!("{p}attn"), false));
        let n = self.ln(&x, &format!("{p}ln2"));
        Self::add(&x, &self.ff(&n, p))
    }

    fn encoder(&self, ids: &[usize]) -> M {
        let mut x = self.embed(ids, "emb.src");
        for l in 0..self.c.n_layers {
            x = self.enc_layer(x, &format!("enc.{l}."));
        }
        self.ln(&x, "enc.ln")
    }

    fn gate(&self, hs: &M, c: &M) -> M {
        let cat: M = hs.iter().zip(c).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
        let g = self.linear(&cat, "gate");
        g.iter()
            .zip(hs.iter().zip(c))
            .map(|(gr, (hr, cr))| {
                (0..gr.len())
                    .map(|i| {
                        let s = 1.0 / (1.0 + (-gr[i]).exp());
                        s * hr[i] + (1.0 - s) * cr[i]
                    })
                    .collect()
            })
            .collect()
    }

    fn memory(&self, ex: &EncodedExample) -> M {
        let ctx = &ex.contexts[ex.contexts.len().saturating_sub(self.c.context_size)..];
        match self.c.variant {
            Variant::Sent => self.encoder(&ex.source),
            Variant::Concat => {
                let mut ids: Vec<usize> = ctx.iter().flatten().copied().collect();
                ids.extend(&ex.source);
                self.encoder(&ids)
            }
            Variant::MultiEnc => {
                let hs = self.encoder(&ex.source);
                if ctx.is_empty() {
                    return hs;
                }
                let flat: Vec<usize> = ctx.iter().flatten().copied().collect();
                let hc = self.encoder(&flat);
                let c = self.mha(&hs, &hc, "s2c", false);
                self.gate(&hs, &c)
            }
            Variant::MultiEncHier => {
                let hs = self.encoder(&ex.source);
                if ctx.is_empty() {
                    return hs;
                }
                let (_, q) = self.t("hier.query");
                let query = vec![q.to_vec()];
                let mut sents: M = ctx
                    .iter()
                    .map(|s| self.mha(&query, &self.encoder(s), "hier.pool", false).remove(0))
                    .collect();
                for (k, r) in sents.iter_mut().enumerate() {
                    for (v, p) in r.iter_mut().zip(self.pe(k)) {
                        *v += p;
                    }
                }
                let x = self.enc_layer(sents, "hier.");
                let x = self.ln(&x, "hier.ln");
                let c = self.mha(&hs, &x, "s2c", false);
                self.gate(&hs, &c)
            }
        }
    }

    fn logits(&self, ex: &EncodedExample) -> M {
        let mem = self.memory(ex);
        let mut y = self.embed(&ex.target[..ex.target.len() - 1], "emb.tgt");
        for l in 0..self.c.n_layers {
            let p = format!("dec.{l}.");
            let n = self.ln(&y, &format!("{p}ln1"));
            y = Self::add(&y, &self.mha(&n, &n, &format!("{p}self"), true));
            let n = self.ln(&y, &format!("{p}ln2"));
            y = Self::add(&y, &self.mha(&n, &mem, &format!("{p}cross"), false));
            let n = self.ln(&y, &format!("{p}ln3"));
            y = Self::add(&y, &self.ff(&n, &p));
        }
        let y = self.ln(&y, "dec.ln");
        self.linear(&y, "out")
    }
}

fn samples() -> Vec<EncodedExample> {
    vec![
        example(&[&[5, 6, 7], &[8, 5]], &[6, 7], &[7, 8, 5]),
        example(&[&[6]], &[5, 5, 8], &[6]),
        example(&[], &[7], &[8, 8]),
        example(&[&[5], &[6, 6], &[7, 8, 6, 5]], &[8, 6, 5, 7], &[5, 6, 7, 8]),
    ]
}

#[test]
fn matches_reference_forward() {
    for v in Variant::ALL {
        let c = config(v);
        let m: Model<f64> = Model::new(c.clone(), 17).unwrap();
        let r = Reference { p: m.params(), c: &c };
        for ex in samples() {
            let got = rows(&m.logits((&ex).into()).unwrap());
            let want = r.logits(&ex);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((a - b).abs() < 1e-10, "{v}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn init_is_deterministic() {
    let c = config(Variant::MultiEncHier);
    let a: ParamStore<f32> = init_params(&c, 3).unwrap();
    let b: ParamStore<f32> = init_params(&c, 3).unwrap();
    assert_eq!(a, b);
    let other: ParamStore<f32> = init_params(&c, 4).unwrap();
    assert_ne!(a.by_name("emb.src"), other.by_name("emb.src"));
    for (_, name, t) in a.iter() {
        if name.ends_with(".g") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
        if name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".w") {
            let s = t.shape();
            let limit = (6.0 / (s[0] + s[1]) as f64).sqrt() as f32;
            assert!(t.data().iter().all(|v| v.abs() <= limit), "{name}");
        }
    }
}

#[test]
fn context_encoder_shares_storage() {
    for v in [Variant::MultiEnc, Variant::MultiEncHier] {
        let m: Model<f32> = Model::new(config(v), 0).unwrap();
        let p = m.params();
        for (_, name, _) in p.iter() {
            if name.starts_with("enc.") {
                assert_eq!(p.id(&format!("ctx_{name}")), p.id(name));
            }
        }
        assert_eq!(p.id("emb.tgt"), p.id("emb.src"));
    }
    let mut c = config(Variant::Sent);
    c.share_embeddings = false;
    let m: Model<f32> = Model::new(c, 0).unwrap();
    assert_ne!(m.params().id("emb.tgt"), m.params().id("emb.src"));
}

#[test]
fn sent_ignores_context() {
    let m: Model<f64> = Model::new(config(Variant::Sent), 1).unwrap();
    let a = example(&[&[5, 6]], &[7], &[8, 5]);
    let b = example(&[&[8], &[7, 7, 7]], &[7], &[8, 5]);
    assert_eq!(m.logits((&a).into()).unwrap(), m.logits((&b).into()).unwrap());
}

#[test]
fn context_variants_read_context() {
    for v in [Variant::Concat, Variant::MultiEnc, Variant::MultiEncHier] {
        let m: Model<f64> = Model::new(config(v), 1).unwrap();
        let a = example(&[&[5, 6]], &[7], &[8, 5]);
        let b = example(&[&[8, 6]], &[7], &[8, 5]);
        assert_ne!(m.logits((&a).into()).unwrap(), m.logits((&b).into()).unwrap(), "{v}");
    }
}

#[test]
fn causal_masking() {
    for v in Variant::ALL {
        let m: Model<f64> = Model::new(config(v), 2).unwrap();
        let a = example(&[&[5]], &[6, 7], &[5, 6, 7, 8]);
        let mut b = a.clone();
        b.target[3] = 5;
        let (la, lb) = (rows(&m.logits((&a).into()).unwrap()), rows(&m.logits((&b).into()).unwrap()));
        assert_eq!(la[..3], lb[..3]);
        assert_ne!(la[3], lb[3]);
    }
}

#[test]
fn padding_is_invisible() {
    for v in Variant::ALL {
        let m: Model<f64> = Model::new(config(v), 5).unwrap();
        let exs = samples();
        let batch: Vec<Input> = exs.iter().map(Input::from).collect();
        let mut g = Graph::new();
        let fwd = m.forward(&mut g, &batch).unwrap();
        let all = rows(g.value(fwd.logits));
        for (i, ex) in exs.iter().enumerate() {
            let alone = rows(&m.logits(ex.into()).unwrap());
            assert_eq!(&all[i * fwd.steps..i * fwd.steps + alone.len()], &alone[..], "{v} item {i}");
        }
        let lp = m.log_probs(&batch).unwrap();
        for (i, ex) in exs.iter().enumerate() {
            assert_eq!(lp[i], m.log_prob(ex.into()).unwrap());
        }
    }
}

#[test]
fn padding_is_invisible_at_32_bit() {
    let m: Model<f32> = Model::new(config(Variant::MultiEncHier), 5).unwrap();
    let exs = samples();
    let batch: Vec<Input> = exs.iter().map(Input::from).collect();
    let lp = m.log_probs(&batch).unwrap();
    for (i, ex) in exs.iter().enumerate() {
        assert!((lp[i] - m.log_prob(ex.into()).unwrap()).abs() <= 1e-5);
    }
}

#[test]
fn gate_values_in_open_unit_interval() {
    for v in [Variant::MultiEnc, Variant::MultiEncHier] {
        let m: Model<f64> = Model::new(config(v), 8).unwrap();
        for ex in samples() {
            match m.gate_values((&ex).into()).unwrap() {
                Some(g) => assert!(g.data().iter().all(|&x| x > 0.0 && x < 1.0)),
                None => assert!(ex.contexts.is_empty()),
            }
        }
    }
}

#[test]
fn log_prob_is_consistent_with_logits() {
    for v in Variant::ALL {
        let m: Model<f64> = Model::new(config(v), 9).unwrap();
        for ex in samples() {
            let lp = m.log_prob((&ex).into()).unwrap();
            assert!(lp <= 0.0);
            let mut prod = 1.0;
            for (t, row) in rows(&m.logits((&ex).into()).unwrap()).iter().enumerate() {
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                prod *= row[ex.target[t + 1]].exp() / z;
            }
            assert!((lp.exp() - prod).abs() < 1e-12);
        }
    }
}

#[test]
fn two_way_uniform_log_prob() {
    let mut m: Model<f64> = Model::new(config(Variant::Sent), 0).unwrap();
    let w = m.params().id("out.w").unwrap();
    let b = m.params().id("out.b").unwrap();
    m.params_mut().get_mut(w).data_mut().fill(0.0);
    // Only EOS and token 5 stay reachable.
    for (i, x) in m.params_mut().get_mut(b).data_mut().iter_mut().enumerate() {
        *x = if i == EOS || i == 5 { 0.0 } else { -1e4 };
    }
    let ex = example(&[], &[6], &[5, 5]);
    let lp = m.log_prob((&ex).into()).unwrap();
    assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12, "{lp}");
}

#[test]
fn input_errors() {
    let m: Model<f64> = Model::new(config(Variant::Concat), 0).unwrap();
    let long: Vec<usize> = vec![5; 40];
    let ex = example(&[], &long, &[5]);
    assert!(matches!(m.log_prob((&ex).into()), Err(Error::SequenceTooLong { len: 42, max: 32 })));
    let ctx: Vec<usize> = vec![6; 30];
    let ex = example(&[&ctx], &[5], &[5]);
    assert!(matches!(m.log_prob((&ex).into()), Err(Error::SequenceTooLong { .. })));
    let ex = example(&[], &[], &[5]);
    assert!(matches!(m.log_prob((&ex).into()), Err(Error::EmptySource)));
}

#[test]
fn params_must_match_config() {
    let store: ParamStore<f32> = init_params(&config(Variant::MultiEnc), 0).unwrap();
    let mut c = config(Variant::MultiEnc);
    c.d_model = 8;
    let err = Model::from_params(c, store.clone()).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
    assert!(Model::from_params(config(Variant::Sent), store).is_err());
}

#[test]
fn context_window_keeps_latest_sentences() {
    let m: Model<f64> = Model::new(config(Variant::MultiEnc), 3).unwrap();
    let three = example(&[&[8], &[5], &[6]], &[7], &[5]);
    let two = example(&[&[5], &[6]], &[7], &[5]);
    assert_eq!(m.logits((&three).into()).unwrap(), m.logits((&two).into()).unwrap());
}
