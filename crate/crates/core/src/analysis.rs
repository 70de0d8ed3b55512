//! Diagnostics: relation difference, restoration rate, cross-batch CKA
//! heatmaps and rank tables. Everything here runs on plain tensors without
//! recording a graph.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FsdError, Result};
use crate::losses::{Psi, COSINE_EPS};
use crate::model::{forward_eval, Batch, EncoderConfig, EncoderParams};
use crate::numerics::Tensor;
use crate::rng::{stream, Stream};
use crate::similarity::cka_value;

/// Relation differences at one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdSample {
    pub step: usize,
    pub rd_e_intra: f64,
    pub rd_e_inter: f64,
    pub rd_c_intra: f64,
    pub rd_c_inter: f64,
}

impl RdSample {
    /// The four values in the order E-intra, E-inter, C-intra, C-inter.
    pub fn values(&self) -> [f64; 4] {
        [self.rd_e_intra, self.rd_e_inter, self.rd_c_intra, self.rd_c_inter]
    }
}

fn relation(a: &[f64], b: &[f64], psi: Psi) -> f64 {
    match psi {
        Psi::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Psi::Cosine => {
            let norm = |v: &[f64]| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > COSINE_EPS {
                    n
                } else {
                    COSINE_EPS
                }
            };
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (norm(a) * norm(b))
        }
    }
}

/// `Σ_ij |ψ(rows_t_i, rows_t_j) − ψ(rows_s_i, rows_s_j)|` over `n` rows of width `w`.
fn relation_gap(t: &[f64], s: &[f64], n: usize, w: usize, psi: Psi) -> f64 {
    fn row(d: &[f64], w: usize, i: usize) -> &[f64] {
        &d[i * w..(i + 1) * w]
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let rt = relation(row(t, w, i), row(t, w, j), psi);
            let rs = relation(row(s, w, i), row(s, w, j), psi);
            total += (rt - rs).abs();
        }
    }
    total
}

/// Mean absolute gap between sample-to-sample relations, over `B²` pairs.
pub fn relation_difference_inter(teacher: &Tensor, student: &Tensor, psi: Psi) -> Result<f64> {
    if teacher.shape() != student.shape() || teacher.rank() < 2 || teacher.rows() < 2 {
        return Err(FsdError::shape(
            "relation_difference_inter",
            format!("{:?} vs {:?}", teacher.shape(), student.shape()),
        ));
    }
    let (b, w) = (teacher.rows(), teacher.row_len());
    Ok(relation_gap(teacher.data(), student.data(), b, w, psi) / (b * b) as f64)
}

/// Mean absolute gap between token-to-token relations inside each sample,
/// normalised by `W²·B`.
pub fn relation_difference_intra(teacher: &Tensor, student: &Tensor, psi: Psi) -> Result<f64> {
    if teacher.shape() != student.shape() || teacher.rank() != 3 {
        return Err(FsdError::shape(
            "relation_difference_intra",
            format!("{:?} vs {:?}", teacher.shape(), student.shape()),
        ));
    }
    let (b, w, d) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    let total: f64 = (0..b)
        .map(|i| relation_gap(teacher.select(i).data(), student.select(i).data(), w, d, psi))
        .sum();
    Ok(total / (w * w * b) as f64)
}

/// All four relation differences between two `[B, W, D]` feature tensors.
pub fn rd_sample(step: usize, teacher: &Tensor, student: &Tensor) -> Result<RdSample> {
    Ok(RdSample {
        step,
        rd_e_intra: relation_difference_intra(teacher, student, Psi::Euclidean)?,
        rd_e_inter: relation_difference_inter(teacher, student, Psi::Euclidean)?,
        rd_c_intra: relation_difference_intra(teacher, student, Psi::Cosine)?,
        rd_c_inter: relation_difference_inter(teacher, student, Psi::Cosine)?,
    })
}

/// Relation differences averaged over a fixed set of evaluation batches.
pub fn rd_on_batches(
    step: usize,
    teacher_hidden: &[Tensor],
    student: &EncoderParams,
    student_config: &EncoderConfig,
    batches: &[Batch],
) -> Result<RdSample> {
    if teacher_hidden.len() != batches.len() || batches.is_empty() {
        return Err(FsdError::shape("rd_on_batches", "one teacher feature tensor per batch"));
    }
    let mut acc = [0.0; 4];
    for (ht, batch) in teacher_hidden.iter().zip(batches) {
        let (_, hs) = forward_eval(student, student_config, batch)?;
        for (a, v) in acc.iter_mut().zip(rd_sample(step, ht, &hs)?.values()) {
            *a += v;
        }
    }
    let n = batches.len() as f64;
    Ok(RdSample {
        step,
        rd_e_intra: acc[0] / n,
        rd_e_inter: acc[1] / n,
        rd_c_intra: acc[2] / n,
        rd_c_inter: acc[3] / n,
    })
}

/// Teacher features for each evaluation batch.
pub fn hidden_on_batches(params: &EncoderParams, config: &EncoderConfig, batches: &[Batch]) -> Result<Vec<Tensor>> {
    batches.iter().map(|b| Ok(forward_eval(params, config, b)?.1)).collect()
}

/// RD values of a sequence of `(step, student)` snapshots.
pub fn rd_curve(
    teacher: &EncoderParams,
    teacher_config: &EncoderConfig,
    snapshots: &[(usize, EncoderParams)],
    student_config: &EncoderConfig,
    eval_batches: &[Batch],
) -> Result<Vec<RdSample>> {
    let ht = hidden_on_batches(teacher, teacher_config, eval_batches)?;
    snapshots
        .iter()
        .map(|(step, s)| rd_on_batches(*step, &ht, s, student_config, eval_batches))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Teacher predictions of this class.
    pub support: usize,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub classes: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Precision, recall and F1 of student predictions scored against teacher predictions.
pub fn restoration_rate(teacher_preds: &[usize], student_preds: &[usize], n_classes: usize) -> Result<RestorationReport> {
    if teacher_preds.len() != student_preds.len() {
        return Err(FsdError::shape(
            "restoration_rate",
            format!("{} vs {} predictions", teacher_preds.len(), student_preds.len()),
        ));
    }
    if let Some(&c) = teacher_preds.iter().chain(student_preds).find(|&&c| c >= n_classes) {
        return Err(FsdError::domain("restoration_rate", format!("class {c} >= {n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (&t, &s) in teacher_preds.iter().zip(student_preds) {
        if t == s {
            tp[t] += 1;
        } else {
            fp[s] += 1;
            fnn[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let classes: Vec<ClassScores> = (0..n_classes)
        .map(|c| {
            let p = ratio(tp[c], tp[c] + fp[c]);
            let r = ratio(tp[c], tp[c] + fnn[c]);
            let (pv, rv) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
            let f = if pv + rv > 0.0 { Some(2.0 * pv * rv / (pv + rv)) } else { None };
            ClassScores {
                class: c,
                precision: pv,
                recall: rv,
                f1: f.unwrap_or(0.0),
                support: tp[c] + fnn[c],
                undefined: p.is_none() || r.is_none() || f.is_none(),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| classes.iter().map(f).sum::<f64>() / n_classes as f64;
    Ok(RestorationReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes,
    })
}

/// Cross-batch CKA matrix between a teacher and another model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub size: usize,
    /// Row-major `P×P`; `None` marks a degenerate pixel.
    pub values: Vec<Option<f64>>,
    pub diagonal_average: f64,
    pub missing: usize,
    pub pool: String,
}

impl HeatmapMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }

    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }
}

fn flatten(t: &Tensor) -> Result<Tensor> {
    t.reshape([t.rows(), t.row_len()])
}

/// Heatmap from precomputed per-batch features (`[B, ...]` each).
pub fn heatmap_from_features(teacher: &[Tensor], other: &[Tensor], pool: &str) -> Result<HeatmapMatrix> {
    let p = teacher.len();
    if p < 2 || other.len() != p {
        return Err(FsdError::shape("cka_heatmap", "need P >= 2 batches from each model"));
    }
    let t: Vec<Tensor> = teacher.iter().map(flatten).collect::<Result<_>>()?;
    let o: Vec<Tensor> = other.iter().map(flatten).collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(p * p);
    for ti in &t {
        for oj in &o {
            values.push(match cka_value(ti, oj) {
                Ok(v) => Some(v),
                Err(FsdError::DegenerateFeatures { .. }) => None,
                Err(e) => return Err(e),
            });
        }
    }
    let diag: Vec<f64> = (0..p).filter_map(|i| values[i * p + i]).collect();
    let missing = values.iter().filter(|v| v.is_none()).count();
    let diagonal_average = if diag.is_empty() {
        f64::NAN
    } else {
        diag.iter().sum::<f64>() / diag.len() as f64
    };
    Ok(HeatmapMatrix {
        size: p,
        values,
        diagonal_average,
        missing,
        pool: pool.to_string(),
    })
}

/// Entry `(i, j)` is CKA of the teacher's features on batch `i` against the
/// other model's features on batch `j`.
pub fn cka_heatmap(
    teacher: &EncoderParams,
    teacher_config: &EncoderConfig,
    other: &EncoderParams,
    other_config: &EncoderConfig,
    pool: &[Batch],
) -> Result<HeatmapMatrix> {
    if let Some(b) = pool.first() {
        if b.size() < 2 || pool.iter().any(|x| x.size() != b.size()) {
            return Err(FsdError::shape("cka_heatmap", "pool batches must share a size >= 2"));
        }
    }
    let t = hidden_on_batches(teacher, teacher_config, pool)?;
    let o = hidden_on_batches(other, other_config, pool)?;
    let desc = format!("{} batches of {}", pool.len(), pool.first().map_or(0, |b| b.size()));
    heatmap_from_features(&t, &o, &desc)
}

/// `P` equal batches of consecutive examples after a seeded shuffle.
pub fn batch_pool(data: &Dataset, pool_size: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if pool_size < 2 || batch_size < 2 || pool_size * batch_size > data.len() {
        return Err(FsdError::Config(format!(
            "heatmap pool of {pool_size}×{batch_size} does not fit {} examples",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(seed, Stream::Pool));
    order
        .chunks(batch_size)
        .take(pool_size)
        .map(|c| data.batch(c))
        .collect()
}

/// Ascending ranks of `values`; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks each of the four RD variants across methods and averages them per method.
pub fn rank_table(final_rd: &BTreeMap<String, [f64; 4]>) -> Result<BTreeMap<String, f64>> {
    if final_rd.len() < 2 {
        return Err(FsdError::Config("rank table needs at least two methods".into()));
    }
    if final_rd.values().flatten().any(|v| !v.is_finite()) {
        return Err(FsdError::Config("rank table has a missing or non-finite RD value".into()));
    }
    let names: Vec<&String> = final_rd.keys().collect();
    let mut sums = vec![0.0; names.len()];
    for variant in 0..4 {
        let col: Vec<f64> = names.iter().map(|n| final_rd[*n][variant]).collect();
        for (s, r) in sums.iter_mut().zip(average_ranks(&col)) {
            *s += r;
        }
    }
    Ok(names.into_iter().cloned().zip(sums.into_iter().map(|s| s / 4.0)).collect())
}

/// Mean of per-task average ranks for each method.
pub fn average_over_tasks(per_task: &[BTreeMap<String, f64>]) -> Result<BTreeMap<String, f64>> {
    let Some(first) = per_task.first() else {
        return Err(FsdError::domain("average_over_tasks", "no tasks"));
    };
    first
        .keys()
        .map(|m| {
            let vals: Option<Vec<f64>> = per_task.iter().map(|t| t.get(m).copied()).collect();
            let vals = vals.ok_or_else(|| FsdError::domain("average_over_tasks", format!("{m} missing in a task")))?;
            Ok((m.clone(), vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}
