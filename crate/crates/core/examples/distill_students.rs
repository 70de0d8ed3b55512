//! Distils a one-layer student from a two-layer teacher with every objective
//! and tracks relation differences to the teacher while it trains.

use fsd::data::{gen_data, load_task, TaskKind, TaskSpec};
use fsd::losses::{LossKind, LossWeights};
use fsd::model::{init_params, init_student_from_teacher, EncoderConfig, Pooling};
use fsd::optim::AdamSettings;
use fsd::train::{accuracy, distill, fine_tune_teacher, DistillConfig, MemorySettings, RdProbe, Teacher, TrainSettings};

fn main() -> fsd::Result<()> {
    let dir = std::env::temp_dir().join("fsd-example-distill");
    let spec = TaskSpec { task: TaskKind::Parity, size: 400, vocab: 16, seq_len: 8, seed: 2 };
    gen_data(&spec, &dir)?;
    let data = load_task(&dir, spec.seq_len, 2)?;

    let tcfg = EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: spec.vocab,
        max_seq_len: spec.seq_len,
        n_classes: 2,
        dropout_rate: 0.0,
        pooling: Pooling::Mean,
    };
    let scfg = EncoderConfig { n_layers: 1, ..tcfg.clone() };
    let settings = TrainSettings {
        epochs: 4,
        batch_size: 16,
        optim: AdamSettings { lr: 3e-3, ..AdamSettings::default() },
        seed: 1,
    };
    let (tparams, _) = fine_tune_teacher(init_params(&tcfg, 1)?, &tcfg, &settings, &data.train)?;
    println!("teacher dev accuracy {:.3}", accuracy(&tparams, &tcfg, &data.dev, 64)?);

    let memory = MemorySettings { size: 4, student_lr: Some(0.05), ..MemorySettings::default() };
    let mut teacher = Teacher::new(tparams, tcfg.clone(), &data.train)?;
    let clustering = teacher.post_train_memory(&memory, 1)?;
    println!("teacher memory: k-means objective {:?}", clustering.objective);

    let probe = RdProbe { batches: data.dev.batches(16)?.into_iter().take(2).collect(), every: 10, keep_snapshots: false };
    println!("{:<5} {:>8} {:>10} {:>10} {:>10} {:>10}", "kind", "dev acc", "RD E-intra", "RD E-inter", "RD C-intra", "RD C-inter");
    for kind in LossKind::ALL {
        let dc = DistillConfig {
            kind,
            weights: LossWeights {
                gamma_g: if kind == LossKind::IntraLocal { 0.0 } else { 1.0 },
                ..LossWeights::default()
            },
            optim: AdamSettings::default(),
            epochs: 2,
            batch_size: 16,
            seed: 1,
            memory: memory.clone(),
        };
        let init = init_student_from_teacher(&teacher.params, &tcfg, &scfg)?;
        let out = distill(&teacher, init, &scfg, &dc, &data.train, Some(&probe))?;
        let last = out.rd_curve.last().expect("probe logs the final step").values();
        println!(
            "{:<5} {:>8.3} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            kind.name(),
            accuracy(&out.student, &scfg, &data.dev, 64)?,
            last[0],
            last[1],
            last[2],
            last[3]
        );
    }
    Ok(())
}
