//! Linear-kernel HSIC and centered kernel alignment (CKA).
//!
//! Feature matrices hold one example per row. Grams are the example-by-example
//! products `E Eᵀ`, so two feature matrices may differ in width but must agree
//! on the number of rows.

use crate::error::{FsdError, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Self-HSIC values below this make CKA undefined.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Lower clamp applied to CKA before taking its logarithm.
pub const CKA_FLOOR: f64 = 1e-7;

/// `C = I - J/n`.
pub fn centering_matrix(n: usize) -> Tensor {
    let mut c = Tensor::full([n, n], -1.0 / n as f64);
    for i in 0..n {
        c.data_mut()[i * n + i] += 1.0;
    }
    c
}

/// Example Gram `E Eᵀ` of an `N×F` feature matrix.
pub fn gram<'g>(features: &Var<'g>) -> Result<Var<'g>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(FsdError::shape(
            "gram",
            format!("need an N×F matrix with N >= 2, got {shape:?}"),
        ));
    }
    features.matmul_t(features, false, true)
}

/// `tr(K C L C) / (N-1)²`.
pub fn hsic<'g>(k: &Var<'g>, l: &Var<'g>) -> Result<Var<'g>> {
    let (sk, sl) = (k.shape(), l.shape());
    if sk.len() != 2 || sk[0] != sk[1] || sk != sl {
        return Err(FsdError::shape("hsic", format!("{sk:?} vs {sl:?}")));
    }
    let n = sk[0];
    if n < 2 {
        return Err(FsdError::shape("hsic", "need N >= 2"));
    }
    let c = k.graph().constant(centering_matrix(n));
    let kc = k.matmul(&c)?;
    let lc = l.matmul(&c)?;
    kc.matmul(&lc)?
        .trace()?
        .scale(1.0 / ((n - 1) * (n - 1)) as f64)
}

/// Linear CKA between two feature matrices with the same number of rows.
///
/// The ratio is returned unclamped; see [`log_cka_loss`] for the clamped form.
pub fn cka<'g>(e1: &Var<'g>, e2: &Var<'g>) -> Result<Var<'g>> {
    let (s1, s2) = (e1.shape(), e2.shape());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != s2[0] {
        return Err(FsdError::shape("cka", format!("{s1:?} vs {s2:?}")));
    }
    let k = gram(e1)?;
    let l = gram(e2)?;
    let kk = hsic(&k, &k)?;
    let ll = hsic(&l, &l)?;
    for v in [kk.item(), ll.item()] {
        if v < DENOMINATOR_FLOOR {
            return Err(FsdError::DegenerateFeatures {
                value: v,
                floor: DENOMINATOR_FLOOR,
            });
        }
    }
    let kl = hsic(&k, &l)?;
    kl.div(&kk.mul(&ll)?.sqrt()?)
}

/// `-log(clamp(CKA, CKA_FLOOR, 1))`.
pub fn log_cka_loss<'g>(e1: &Var<'g>, e2: &Var<'g>) -> Result<Var<'g>> {
    cka(e1, e2)?.clamp(CKA_FLOOR, 1.0)?.log()?.neg()
}

/// CKA of each sample's `W×D` token matrix, tokens acting as examples.
///
/// Entry `i` is `None` when either token matrix of sample `i` is degenerate.
pub fn cka_per_sample<'g>(teacher: &Var<'g>, student: &Var<'g>) -> Result<Vec<Option<Var<'g>>>> {
    let (st, ss) = (teacher.shape(), student.shape());
    if st.len() != 3 || st != ss {
        return Err(FsdError::shape("cka_per_sample", format!("{st:?} vs {ss:?}")));
    }
    (0..st[0])
        .map(|i| {
            let t = teacher.select(i)?;
            let s = student.select(i)?;
            match cka(&s, &t) {
                Ok(v) => Ok(Some(v)),
                Err(FsdError::DegenerateFeatures { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// CKA of two plain feature matrices, without recording gradients.
pub fn cka_value(e1: &Tensor, e2: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let a = g.constant(e1.clone());
    let b = g.constant(e2.clone());
    Ok(cka(&a, &b)?.item())
}
