//! Generates a parity task, fine-tunes a teacher on it and round-trips the
//! result through a checkpoint file.

use fsd::checkpoint::{Checkpoint, RunMetadata};
use fsd::data::{gen_data, load_task, TaskKind, TaskSpec};
use fsd::model::{init_params, EncoderConfig, Pooling};
use fsd::optim::AdamSettings;
use fsd::train::{accuracy, fine_tune_teacher, TrainSettings};

fn main() -> fsd::Result<()> {
    let dir = std::env::temp_dir().join("fsd-example-teacher");
    let spec = TaskSpec { task: TaskKind::Parity, size: 400, vocab: 16, seq_len: 8, seed: 1 };
    gen_data(&spec, &dir)?;
    let data = load_task(&dir, spec.seq_len, 2)?;
    println!("{} train / {} dev / {} test, vocabulary {}", data.train.len(), data.dev.len(), data.test.len(), data.vocab.len());

    let cfg = EncoderConfig {
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
    let settings = TrainSettings {
        epochs: 4,
        batch_size: 16,
        optim: AdamSettings { lr: 3e-3, ..AdamSettings::default() },
        seed: 1,
    };
    let (params, report) = fine_tune_teacher(init_params(&cfg, 1)?, &cfg, &settings, &data.train)?;
    for (e, loss) in report.epoch_loss.iter().enumerate() {
        println!("epoch {}  mean loss {loss:.4}", e + 1);
    }
    println!("train {:.3}  dev {:.3}  ({} steps)", report.train_accuracy, accuracy(&params, &cfg, &data.dev, 64)?, report.steps);

    let path = dir.join("teacher.ckpt");
    let ckpt = Checkpoint {
        config: cfg.clone(),
        params,
        memory: None,
        metadata: RunMetadata { role: "teacher".into(), seed: 1, step: report.steps, ..RunMetadata::default() },
    };
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("checkpoint {} bytes, reloads bit-exact: {}", std::fs::metadata(&path)?.len(), back.params.bit_eq(&ckpt.params));
    Ok(())
}
