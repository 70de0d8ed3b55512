//! Distillation objectives.
//!
//! Teacher-side inputs are plain [`Tensor`]s and are recorded as constants, so
//! no gradient can reach teacher parameters or the teacher memory.

use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::numerics::{Tensor, Var};
use crate::similarity::{cka_per_sample, log_cka_loss, CKA_FLOOR};

/// Norm floor for cosine relations.
pub const COSINE_EPS: f64 = 1e-12;

/// Squared-distance floor under the square root of Euclidean relations.
pub const DISTANCE_SQ_FLOOR: f64 = 1e-24;

/// Which structure loss accompanies vanilla distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    /// Cross-entropy only, no teacher.
    #[serde(rename = "noDS")]
    NoDs,
    #[serde(rename = "VKD")]
    Vkd,
    #[serde(rename = "I")]
    Intra,
    #[serde(rename = "L")]
    Local,
    #[serde(rename = "G")]
    Global,
    #[serde(rename = "IL")]
    IntraLocal,
    #[serde(rename = "ILG")]
    IntraLocalGlobal,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::NoDs,
        LossKind::Vkd,
        LossKind::Intra,
        LossKind::Local,
        LossKind::Global,
        LossKind::IntraLocal,
        LossKind::IntraLocalGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::NoDs => "noDS",
            LossKind::Vkd => "VKD",
            LossKind::Intra => "I",
            LossKind::Local => "L",
            LossKind::Global => "G",
            LossKind::IntraLocal => "IL",
            LossKind::IntraLocalGlobal => "ILG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| FsdError::Config(format!("unknown loss kind {s:?}")))
    }

    pub fn uses_intra(self) -> bool {
        matches!(self, LossKind::Intra | LossKind::IntraLocal | LossKind::IntraLocalGlobal)
    }

    pub fn uses_local(self) -> bool {
        matches!(self, LossKind::Local | LossKind::IntraLocal | LossKind::IntraLocalGlobal)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, LossKind::Global | LossKind::IntraLocalGlobal)
    }

    pub fn uses_teacher(self) -> bool {
        self != LossKind::NoDs
    }

    pub fn is_structural(self) -> bool {
        self.uses_intra() || self.uses_local() || self.uses_global()
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Relation function between two feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Psi {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub gamma_m: f64,
    pub gamma_i: f64,
    pub gamma_l: f64,
    pub gamma_g: f64,
    /// Multiply the KL term by tau², as some KD code bases do. Off by default.
    #[serde(default)]
    pub tau_squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            tau: 5.0,
            beta: 1.0,
            gamma_m: 0.5,
            gamma_i: 1.0,
            gamma_l: 1.0,
            gamma_g: 1.0,
            tau_squared: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, kind: LossKind) -> Result<()> {
        let bad = |what: &str| Err(FsdError::Config(format!("loss weights: {what}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.gamma_m) {
            return bad("gamma_m must lie in [0, 1]");
        }
        if !(self.gamma_i >= 0.0 && self.gamma_l >= 0.0 && self.gamma_g >= 0.0) {
            return bad("gamma_i, gamma_l, gamma_g must be >= 0");
        }
        if kind == LossKind::IntraLocal && self.gamma_g != 0.0 {
            return bad("gamma_g must be 0 for IL");
        }
        Ok(())
    }
}

/// Mean cross-entropy of integer labels under `logits`.
pub fn cross_entropy<'g>(logits: &Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    logits.log_softmax_rows(1.0)?.nll(labels)
}

/// `Σ_i KL(softmax(t_i/τ) ‖ softmax(s_i/τ))` summed over the batch.
pub fn kld_loss<'g>(teacher_logits: &Tensor, student_logits: &Var<'g>, tau: f64) -> Result<Var<'g>> {
    if teacher_logits.shape() != student_logits.shape().as_slice() || teacher_logits.rank() != 2 {
        return Err(FsdError::shape(
            "kld_loss",
            format!("{:?} vs {:?}", teacher_logits.shape(), student_logits.shape()),
        ));
    }
    let g = student_logits.graph();
    let p_teacher = g.constant(teacher_logits.clone()).softmax_rows(tau)?.value();
    let neg_entropy: f64 = p_teacher
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let cross = g
        .constant(p_teacher)
        .mul(&student_logits.log_softmax_rows(tau)?)?
        .sum()?;
    g.constant(Tensor::scalar(neg_entropy)?).sub(&cross)
}

/// `α·ce + (1-α)·kld`.
pub fn vkd_loss<'g>(ce: &Var<'g>, kld: &Var<'g>, alpha: f64) -> Result<Var<'g>> {
    ce.scale(alpha)?.add(&kld.scale(1.0 - alpha)?)
}

/// Intra-feature loss: mean over samples of `-log CKA` between each sample's
/// teacher and student token matrices. Degenerate samples are skipped.
pub fn fsd_intra<'g>(teacher: &Tensor, student: &Var<'g>) -> Result<Var<'g>> {
    let ht = student.graph().constant(teacher.clone());
    let per_sample = cka_per_sample(&ht, student)?;
    let mut terms = Vec::new();
    for v in per_sample.into_iter().flatten() {
        terms.push(v.clamp(CKA_FLOOR, 1.0)?.log()?);
    }
    let Some(first) = terms.first().copied() else {
        return Err(FsdError::DegenerateBatch);
    };
    let n = terms.len() as f64;
    let mut acc = first;
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    acc.scale(-1.0 / n)
}

/// Views any `[B, ...]` tensor as `[B, prod(...)]`.
fn flat_rows(shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [b, rest @ ..] if !rest.is_empty() => Ok([*b, rest.iter().product()]),
        _ => Err(FsdError::shape("flatten", format!("{shape:?}"))),
    }
}

fn flatten_var<'g>(v: &Var<'g>) -> Result<Var<'g>> {
    let shape = v.shape();
    if shape.len() == 2 {
        return Ok(*v);
    }
    v.reshape(flat_rows(&shape)?)
}

fn flatten_tensor(t: &Tensor) -> Result<Tensor> {
    if t.rank() == 2 {
        return Ok(t.clone());
    }
    t.reshape(flat_rows(t.shape())?)
}

/// Local inter-feature loss `-log CKA(H_S, H_T)` over the mini-batch.
pub fn fsd_local<'g>(teacher: &Tensor, student: &Var<'g>) -> Result<Var<'g>> {
    let ht = student.graph().constant(flatten_tensor(teacher)?);
    let hs = flatten_var(student)?;
    log_cka_loss(&hs, &ht)
}

/// `-log CKA(M_T, M_S)` between the two centroid memories.
pub fn memory_structure_loss<'g>(teacher_memory: &Tensor, student_memory: &Var<'g>) -> Result<Var<'g>> {
    let mt = student_memory.graph().constant(teacher_memory.clone());
    log_cka_loss(&mt, student_memory)
}

/// Pairwise relation matrix `ψ(a_i, b_j)`.
pub fn relation<'g>(a: &Var<'g>, b: &Var<'g>, psi: Psi) -> Result<Var<'g>> {
    match psi {
        Psi::Euclidean => a.pairwise_sq_dist(b)?.clamp_min(DISTANCE_SQ_FLOOR)?.sqrt(),
        Psi::Cosine => a.pairwise_cosine(b, COSINE_EPS),
    }
}

/// `Σ_ij (ψ(Ht_i, Mt_j) - ψ(Hs_i, Ms_j))² / (B·C)`.
pub fn memory_hidden_loss<'g>(
    teacher: &Tensor,
    student: &Var<'g>,
    teacher_memory: &Tensor,
    student_memory: &Var<'g>,
    psi: Psi,
) -> Result<Var<'g>> {
    let g = student.graph();
    let ht = g.constant(flatten_tensor(teacher)?);
    let hs = flatten_var(student)?;
    let mt = g.constant(teacher_memory.clone());
    let rel_t = relation(&ht, &mt, psi)?;
    let rel_s = relation(&hs, student_memory, psi)?;
    let shape = rel_s.shape();
    if rel_t.shape() != shape {
        return Err(FsdError::shape(
            "memory_hidden_loss",
            format!("{:?} vs {:?}", rel_t.shape(), shape),
        ));
    }
    rel_t
        .sub(&rel_s)?
        .square()?
        .sum()?
        .scale(1.0 / (shape[0] * shape[1]) as f64)
}

/// Constituents of the global structure loss.
#[derive(Debug, Clone, Copy)]
pub struct GlobalTerms<'g> {
    pub total: Var<'g>,
    pub hidden_euclidean: Var<'g>,
    pub hidden_cosine: Var<'g>,
    pub memory: Var<'g>,
}

/// `γ_m F_Mh^E + (1-γ_m) F_Mh^C + F_MM`, with its constituents.
pub fn fsd_global_terms<'g>(
    teacher: &Tensor,
    student: &Var<'g>,
    teacher_memory: &Tensor,
    student_memory: &Var<'g>,
    gamma_m: f64,
) -> Result<GlobalTerms<'g>> {
    let e = memory_hidden_loss(teacher, student, teacher_memory, student_memory, Psi::Euclidean)?;
    let c = memory_hidden_loss(teacher, student, teacher_memory, student_memory, Psi::Cosine)?;
    let mm = memory_structure_loss(teacher_memory, student_memory)?;
    let total = e.scale(gamma_m)?.add(&c.scale(1.0 - gamma_m)?)?.add(&mm)?;
    Ok(GlobalTerms {
        total,
        hidden_euclidean: e,
        hidden_cosine: c,
        memory: mm,
    })
}

pub fn fsd_global<'g>(
    teacher: &Tensor,
    student: &Var<'g>,
    teacher_memory: &Tensor,
    student_memory: &Var<'g>,
    gamma_m: f64,
) -> Result<Var<'g>> {
    Ok(fsd_global_terms(teacher, student, teacher_memory, student_memory, gamma_m)?.total)
}

/// `γ_i L_I + γ_l L_L + γ_g L_G`; an absent global term contributes nothing.
pub fn fsd_integrated<'g>(
    intra: &Var<'g>,
    local: &Var<'g>,
    global: Option<&Var<'g>>,
    gamma_i: f64,
    gamma_l: f64,
    gamma_g: f64,
) -> Result<Var<'g>> {
    let mut acc = intra.scale(gamma_i)?.add(&local.scale(gamma_l)?)?;
    if let Some(g) = global {
        acc = acc.add(&g.scale(gamma_g)?)?;
    }
    Ok(acc)
}

/// `vkd + β·structure`.
pub fn total_loss<'g>(vkd: &Var<'g>, structure: &Var<'g>, beta: f64) -> Result<Var<'g>> {
    vkd.add(&structure.scale(beta)?)
}

/// Per-step scalar values of every loss term that was evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub kld: Option<f64>,
    pub vkd: Option<f64>,
    pub intra: Option<f64>,
    pub local: Option<f64>,
    pub global: Option<f64>,
    pub memory_structure: Option<f64>,
    pub memory_hidden_euclidean: Option<f64>,
    pub memory_hidden_cosine: Option<f64>,
}

/// Inputs for one objective evaluation.
pub struct ObjectiveInputs<'a, 'g> {
    pub labels: &'a [usize],
    pub student_logits: Var<'g>,
    pub student_hidden: Var<'g>,
    pub teacher_logits: Option<&'a Tensor>,
    pub teacher_hidden: Option<&'a Tensor>,
    pub teacher_memory: Option<&'a Tensor>,
    pub student_memory: Option<Var<'g>>,
}

/// Assembles `L = L_VKD + β L_κ` (or plain cross-entropy for noDS).
pub fn objective<'g>(
    kind: LossKind,
    weights: &LossWeights,
    inputs: &ObjectiveInputs<'_, 'g>,
) -> Result<(Var<'g>, LossTerms)> {
    let ce = cross_entropy(&inputs.student_logits, inputs.labels)?;
    let mut terms = LossTerms {
        ce: ce.item(),
        ..LossTerms::default()
    };
    if kind == LossKind::NoDs {
        terms.total = ce.item();
        return Ok((ce, terms));
    }
    let missing = |what: &str| FsdError::MissingDependency(format!("{kind} needs {what}"));
    let t_logits = inputs.teacher_logits.ok_or_else(|| missing("teacher logits"))?;
    let mut kld = kld_loss(t_logits, &inputs.student_logits, weights.tau)?;
    if weights.tau_squared {
        kld = kld.scale(weights.tau * weights.tau)?;
    }
    let vkd = vkd_loss(&ce, &kld, weights.alpha)?;
    terms.kld = Some(kld.item());
    terms.vkd = Some(vkd.item());
    if !kind.is_structural() {
        terms.total = vkd.item();
        return Ok((vkd, terms));
    }

    let ht = inputs.teacher_hidden.ok_or_else(|| missing("teacher features"))?;
    let hs = &inputs.student_hidden;
    let intra = if kind.uses_intra() {
        Some(fsd_intra(ht, hs)?)
    } else {
        None
    };
    let local = if kind.uses_local() {
        Some(fsd_local(ht, hs)?)
    } else {
        None
    };
    let global = if kind.uses_global() {
        let mt = inputs.teacher_memory.ok_or_else(|| missing("a teacher memory"))?;
        let ms = inputs.student_memory.ok_or_else(|| missing("a student memory"))?;
        let g = fsd_global_terms(ht, hs, mt, &ms, weights.gamma_m)?;
        terms.memory_structure = Some(g.memory.item());
        terms.memory_hidden_euclidean = Some(g.hidden_euclidean.item());
        terms.memory_hidden_cosine = Some(g.hidden_cosine.item());
        Some(g.total)
    } else {
        None
    };
    terms.intra = intra.map(|v| v.item());
    terms.local = local.map(|v| v.item());
    terms.global = global.map(|v| v.item());

    let structure = match kind {
        LossKind::Intra => intra.unwrap(),
        LossKind::Local => local.unwrap(),
        LossKind::Global => global.unwrap(),
        LossKind::IntraLocal => fsd_integrated(
            &intra.unwrap(),
            &local.unwrap(),
            None,
            weights.gamma_i,
            weights.gamma_l,
            0.0,
        )?,
        LossKind::IntraLocalGlobal => fsd_integrated(
            &intra.unwrap(),
            &local.unwrap(),
            global.as_ref(),
            weights.gamma_i,
            weights.gamma_l,
            weights.gamma_g,
        )?,
        LossKind::NoDs | LossKind::Vkd => unreachable!(),
    };
    let total = total_loss(&vkd, &structure, weights.beta)?;
    terms.total = total.item();
    Ok((total, terms))
}
