//! Pre-norm transformer encoder with a pooled classifier head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{stream, Stream};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over unmasked positions.
    #[default]
    Mean,
    /// The first position only.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FsdError::Config(format!("encoder: {m}")));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len == 0 || self.d_ff == 0 {
            return bad("max_seq_len and d_ff must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2".into());
        }
        if self.vocab_size <= SEP_ID {
            return bad("vocab_size must cover the reserved ids".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `|W|·|D|`, the width of a flattened feature row.
    pub fn feature_width(&self) -> usize {
        self.max_seq_len * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2",
    "b2",
];

impl<T> LayerWeights<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn from_fields(mut next: impl FnMut() -> Result<T>) -> Result<Self> {
        Ok(LayerWeights {
            ln1_g: next()?,
            ln1_b: next()?,
            wq: next()?,
            bq: next()?,
            wk: next()?,
            bk: next()?,
            wv: next()?,
            bv: next()?,
            wo: next()?,
            bo: next()?,
            ln2_g: next()?,
            ln2_b: next()?,
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
        })
    }
}

/// Every weight of the encoder and its classifier, generic over storage so
/// the same layout serves plain tensors, graph variables and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    pub cls_w: T,
    pub cls_b: T,
}

pub type EncoderParams = EncoderWeights<Tensor>;

impl<T> EncoderWeights<T> {
    /// Named entries in a fixed order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, v) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{name}"), v));
            }
        }
        out.extend([
            ("lnf_g".to_string(), &self.lnf_g),
            ("lnf_b".to_string(), &self.lnf_b),
            ("cls_w".to_string(), &self.cls_w),
            ("cls_b".to_string(), &self.cls_b),
        ]);
        out
    }

    /// Rebuilds the layout from values produced in [`entries`](Self::entries) order.
    pub fn try_from_fn<U>(n_layers: usize, mut f: impl FnMut(&str) -> Result<U>) -> Result<EncoderWeights<U>> {
        let tok_emb = f("tok_emb")?;
        let pos_emb = f("pos_emb")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let mut k = 0;
            layers.push(LayerWeights::from_fields(|| {
                let name = format!("layers.{i}.{}", LAYER_FIELDS[k]);
                k += 1;
                f(&name)
            })?);
        }
        Ok(EncoderWeights {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: f("lnf_g")?,
            lnf_b: f("lnf_b")?,
            cls_w: f("cls_w")?,
            cls_b: f("cls_b")?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<EncoderWeights<U>> {
        let entries = self.entries();
        let mut it = entries.into_iter();
        EncoderWeights::<T>::try_from_fn(self.layers.len(), |name| {
            let (n, v) = it.next().expect("layout mismatch");
            debug_assert_eq!(n, name);
            f(name, v)
        })
    }

    /// Mutable references in [`entries`](Self::entries) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g, &mut l.ln1_b, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk, &mut l.wv, &mut l.bv,
                &mut l.wo, &mut l.bo, &mut l.ln2_g, &mut l.ln2_b, &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.cls_w, &mut self.cls_b]);
        out
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

impl EncoderParams {
    /// Records every tensor as a trainable leaf of `g`.
    pub fn to_params<'g>(&self, g: &'g Graph) -> EncoderWeights<Var<'g>> {
        self.map(|_, t| Ok(g.param(t.clone()))).expect("infallible")
    }

    /// Records every tensor as a constant of `g`.
    pub fn to_constants<'g>(&self, g: &'g Graph) -> EncoderWeights<Var<'g>> {
        self.map(|_, t| Ok(g.constant(t.clone()))).expect("infallible")
    }

    pub fn bit_eq(&self, other: &EncoderParams) -> bool {
        let (a, b) = (self.entries(), other.entries());
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against `config`.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let expected = shapes(config);
        let entries = self.entries();
        if entries.len() != expected.n_layers() * 16 + 6 {
            return Err(FsdError::shape("params", "layer count does not match config"));
        }
        for ((name, t), (_, want)) in entries.iter().zip(expected.entries()) {
            if t.shape() != want.as_slice() {
                return Err(FsdError::shape(
                    "params",
                    format!("{name}: {:?}, config wants {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn shapes(c: &EncoderConfig) -> EncoderWeights<Vec<usize>> {
    let (d, f) = (c.d_model, c.d_ff);
    EncoderWeights::<()>::try_from_fn(c.n_layers, |name| {
        let field = name.rsplit('.').next().unwrap_or(name);
        Ok(match field {
            "tok_emb" => vec![c.vocab_size, d],
            "pos_emb" => vec![c.max_seq_len, d],
            "wq" | "wk" | "wv" | "wo" => vec![d, d],
            "w1" => vec![d, f],
            "b1" => vec![f],
            "w2" => vec![f, d],
            "cls_w" => vec![d, c.n_classes],
            "cls_b" => vec![c.n_classes],
            _ => vec![d],
        })
    })
    .expect("infallible")
}

/// `N(0, 0.02²)` weights and embeddings, zero biases, unit layer-norm gains.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = stream(seed, Stream::Init);
    shapes(config).map(|name, shape| {
        let field = name.rsplit('.').next().unwrap_or(name);
        let n: usize = shape.iter().product();
        let data = if field.ends_with("_g") {
            vec![1.0; n]
        } else if field.starts_with('b') || field.ends_with("_b") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        Tensor::new(shape.clone(), data)
    })
}

/// Copies embeddings, the first `student.n_layers` layers and the head from the teacher.
pub fn init_student_from_teacher(
    teacher: &EncoderParams,
    teacher_config: &EncoderConfig,
    student_config: &EncoderConfig,
) -> Result<EncoderParams> {
    student_config.validate()?;
    teacher.check(teacher_config)?;
    let same = teacher_config.d_model == student_config.d_model
        && teacher_config.n_heads == student_config.n_heads
        && teacher_config.d_ff == student_config.d_ff
        && teacher_config.vocab_size == student_config.vocab_size
        && teacher_config.max_seq_len == student_config.max_seq_len
        && teacher_config.n_classes == student_config.n_classes;
    if !same || student_config.n_layers > teacher_config.n_layers {
        return Err(FsdError::Config(
            "student must share widths with the teacher and have no more layers".into(),
        ));
    }
    Ok(EncoderWeights {
        tok_emb: teacher.tok_emb.clone(),
        pos_emb: teacher.pos_emb.clone(),
        layers: teacher.layers[..student_config.n_layers].to_vec(),
        lnf_g: teacher.lnf_g.clone(),
        lnf_b: teacher.lnf_b.clone(),
        cls_w: teacher.cls_w.clone(),
        cls_b: teacher.cls_b.clone(),
    })
}

/// Token ids, attention mask and labels for `B` sequences of length `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    /// Builds a batch from padded rows; positions holding [`PAD_ID`] are masked.
    pub fn from_rows(rows: &[Vec<usize>], labels: &[usize], seq_len: usize) -> Result<Batch> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(FsdError::shape("batch", "rows and labels disagree"));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut mask = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            if r.len() != seq_len {
                return Err(FsdError::shape("batch", format!("row length {} != {seq_len}", r.len())));
            }
            ids.extend_from_slice(r);
            mask.extend(r.iter().map(|&t| t != PAD_ID));
        }
        let b = Batch {
            ids,
            mask,
            labels: labels.to_vec(),
            seq_len,
        };
        Ok(b)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let n = self.size() * self.seq_len;
        if self.seq_len != config.max_seq_len || self.ids.len() != n || self.mask.len() != n {
            return Err(FsdError::shape("batch", "layout does not match the encoder"));
        }
        if let Some(&t) = self.ids.iter().find(|&&t| t >= config.vocab_size) {
            return Err(FsdError::domain("batch", format!("token id {t} >= vocab {}", config.vocab_size)));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= config.n_classes) {
            return Err(FsdError::domain("batch", format!("label {y} >= {}", config.n_classes)));
        }
        if self.mask.chunks(self.seq_len).any(|m| !m.iter().any(|&k| k)) {
            return Err(FsdError::domain("batch", "sample without real tokens"));
        }
        Ok(())
    }
}

/// Encoder outputs on one graph.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'g> {
    pub logits: Var<'g>,
    /// Final-layer token features `[B, W, D]`, pad rows zeroed.
    pub hidden: Var<'g>,
}

fn dropout<'g, R: Rng>(x: Var<'g>, rate: f64, rng: &mut Option<&mut R>) -> Result<Var<'g>> {
    match rng {
        Some(r) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let n: usize = x.shape().iter().product();
            let factors = (0..n).map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep }).collect();
            x.dropout_with(factors)
        }
        _ => Ok(x),
    }
}

/// Runs the encoder. Dropout is applied only when `rng` is given.
pub fn forward<'g, R: Rng>(
    w: &EncoderWeights<Var<'g>>,
    config: &EncoderConfig,
    batch: &Batch,
    mut rng: Option<&mut R>,
) -> Result<Forward<'g>> {
    batch.validate(config)?;
    if w.n_layers() != config.n_layers {
        return Err(FsdError::shape("forward", "layer count does not match config"));
    }
    let (b, s, d, h) = (batch.size(), batch.seq_len, config.d_model, config.n_heads);
    let dh = config.head_dim();
    let p = config.dropout_rate;
    let positions: Vec<usize> = (0..b * s).map(|i| i % s).collect();
    let mut x = w.tok_emb.gather_rows(&batch.ids)?.add(&w.pos_emb.gather_rows(&positions)?)?;
    x = dropout(x, p, &mut rng)?;
    let split = |v: Var<'g>| -> Result<Var<'g>> {
        v.reshape([b, s, h, dh])?.permute(&[0, 2, 1, 3])?.reshape([b * h, s, dh])
    };
    for layer in &w.layers {
        let hn = x.layer_norm(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
        let q = split(hn.matmul(&layer.wq)?.add_row(&layer.bq)?)?;
        let k = split(hn.matmul(&layer.wk)?.add_row(&layer.bk)?)?;
        let v = split(hn.matmul(&layer.wv)?.add_row(&layer.bv)?)?;
        let scores = q.bmm(&k, false, true)?.scale(1.0 / (dh as f64).sqrt())?;
        let attn = scores.masked_softmax(&batch.mask, h * s)?;
        let attn = dropout(attn, p, &mut rng)?;
        let ctx = attn
            .bmm(&v, false, false)?
            .reshape([b, h, s, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape([b * s, d])?;
        let out = dropout(ctx.matmul(&layer.wo)?.add_row(&layer.bo)?, p, &mut rng)?;
        x = x.add(&out)?;
        let hn = x.layer_norm(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
        let ff = hn.matmul(&layer.w1)?.add_row(&layer.b1)?.gelu()?;
        let ff = dropout(ff.matmul(&layer.w2)?.add_row(&layer.b2)?, p, &mut rng)?;
        x = x.add(&ff)?;
    }
    let hidden = x.layer_norm(&w.lnf_g, &w.lnf_b, LN_EPS)?.mask_rows(&batch.mask)?;
    let pooled = match config.pooling {
        Pooling::Mean => hidden.masked_mean_pool(&batch.mask, s)?,
        Pooling::First => {
            let first: Vec<bool> = (0..b * s).map(|i| i % s == 0).collect();
            hidden.masked_mean_pool(&first, s)?
        }
    };
    let logits = pooled.matmul(&w.cls_w)?.add_row(&w.cls_b)?;
    Ok(Forward {
        logits,
        hidden: hidden.reshape([b, s, d])?,
    })
}

/// Evaluation-mode forward returning plain `(logits, hidden)` tensors.
pub fn forward_eval(params: &EncoderParams, config: &EncoderConfig, batch: &Batch) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let w = params.to_constants(&g);
    let out = forward::<rand_chacha::ChaCha20Rng>(&w, config, batch, None)?;
    Ok((out.logits.value(), out.hidden.value()))
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
