//! Compares a distilled student with its teacher: how well it restores the
//! teacher's predictions and how closely its features match across batches.

use fsd::analysis::{batch_pool, cka_heatmap, restoration_rate};
use fsd::data::{gen_data, load_task, TaskKind, TaskSpec};
use fsd::losses::{LossKind, LossWeights};
use fsd::model::{init_params, init_student_from_teacher, EncoderConfig, Pooling};
use fsd::optim::AdamSettings;
use fsd::train::{distill, fine_tune_teacher, predict, DistillConfig, MemorySettings, Teacher, TrainSettings};

fn main() -> fsd::Result<()> {
    let dir = std::env::temp_dir().join("fsd-example-restoration");
    let spec = TaskSpec { task: TaskKind::Pair, size: 800, vocab: 32, seq_len: 16, seed: 3 };
    gen_data(&spec, &dir)?;
    let data = load_task(&dir, spec.seq_len, 2)?;

    let tcfg = EncoderConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        vocab_size: spec.vocab,
        max_seq_len: spec.seq_len,
        n_classes: 2,
        dropout_rate: 0.0,
        pooling: Pooling::Mean,
    };
    let scfg = EncoderConfig { n_layers: 2, ..tcfg.clone() };
    let settings = TrainSettings {
        epochs: 8,
        batch_size: 16,
        optim: AdamSettings { lr: 3e-3, ..AdamSettings::default() },
        seed: 1,
    };
    let (tparams, _) = fine_tune_teacher(init_params(&tcfg, 1)?, &tcfg, &settings, &data.train)?;
    let teacher = Teacher::new(tparams, tcfg.clone(), &data.train)?;
    let teacher_preds = predict(&teacher.params, &tcfg, &data.test, 64)?;
    let pool = batch_pool(&data.test, 4, 16, 0)?;

    for kind in [LossKind::Vkd, LossKind::IntraLocal] {
        let dc = DistillConfig {
            kind,
            weights: LossWeights { gamma_g: 0.0, ..LossWeights::default() },
            optim: AdamSettings::default(),
            epochs: 2,
            batch_size: 16,
            seed: 1,
            memory: MemorySettings::default(),
        };
        let init = init_student_from_teacher(&teacher.params, &tcfg, &scfg)?;
        let student = distill(&teacher, init, &scfg, &dc, &data.train, None)?.student;

        let report = restoration_rate(&teacher_preds, &predict(&student, &scfg, &data.test, 64)?, 2)?;
        println!("{}: restoration macro P {:.3} R {:.3} F1 {:.3}", kind.name(), report.macro_precision, report.macro_recall, report.macro_f1);
        for c in &report.classes {
            println!("  class {} P {:.3} R {:.3} F1 {:.3} support {}", c.class, c.precision, c.recall, c.f1, c.support);
        }

        let map = cka_heatmap(&teacher.params, &tcfg, &student, &scfg, &pool)?;
        println!("  CKA heatmap over {} (diagonal average {:.4})", map.pool, map.diagonal_average);
        for i in 0..map.size {
            let row: Vec<String> = (0..map.size).map(|j| map.get(i, j).map_or("  -   ".into(), |v| format!("{v:.4}"))).collect();
            println!("    {}", row.join(" "));
        }
    }
    Ok(())
}
