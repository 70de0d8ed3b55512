//! Every distillation objective evaluated on one random teacher/student batch.

use fsd::losses::{objective, LossKind, LossWeights, ObjectiveInputs};
use fsd::numerics::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> fsd::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let (b, w, d, c) = (6, 5, 4, 3);
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let teacher_logits = random(&mut rng, &[b, 2]).scaled(3.0);
    let teacher_hidden = random(&mut rng, &[b, w, d]);
    let teacher_memory = random(&mut rng, &[c, w * d]);
    let student_logits = random(&mut rng, &[b, 2]);
    let student_hidden = random(&mut rng, &[b, w, d]);
    let student_memory = random(&mut rng, &[c, w * d]).scaled(0.02);

    println!("{:<5} {:>9} {:>9} {:>9} {:>9} {:>9}", "kind", "total", "ce", "intra", "local", "global");
    for kind in LossKind::ALL {
        let weights = LossWeights {
            gamma_g: if kind == LossKind::IntraLocal { 0.0 } else { 1.0 },
            ..LossWeights::default()
        };
        let g = Graph::new();
        let inputs = ObjectiveInputs {
            labels: &labels,
            student_logits: g.param(student_logits.clone()),
            student_hidden: g.param(student_hidden.clone()),
            teacher_logits: Some(&teacher_logits),
            teacher_hidden: Some(&teacher_hidden),
            teacher_memory: Some(&teacher_memory),
            student_memory: Some(g.param(student_memory.clone())),
        };
        let (_, t) = objective(kind, &weights, &inputs)?;
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<5} {:>9.4} {:>9.4} {:>9} {:>9} {:>9}",
            kind.name(),
            t.total,
            t.ce,
            show(t.intra),
            show(t.local),
            show(t.global)
        );
    }
    Ok(())
}
