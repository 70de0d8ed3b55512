mod common;

use fsd::analysis::rd_curve;
use fsd::checkpoint::{Checkpoint, RunMetadata};
use fsd::data::{generate, Dataset, TaskKind, TaskSpec, Vocab};
use fsd::losses::{LossKind, LossWeights};
use fsd::model::{init_params, init_student_from_teacher, EncoderConfig, EncoderParams, Pooling};
use fsd::optim::{Adam, AdamSettings};
use fsd::train::*;
use fsd::Tensor;

fn dataset(task: TaskKind, n: usize, vocab: usize, seq_len: usize) -> Dataset {
    let spec = TaskSpec {
        task,
        size: n,
        vocab,
        seq_len,
        seed: 3,
    };
    let raw = generate(&spec, n, 0).unwrap();
    Dataset::encode(&raw, &Vocab::build(&raw), seq_len, 2).unwrap()
}

fn teacher_config(layers: usize, d: usize, vocab: usize, seq_len: usize, dropout: f64) -> EncoderConfig {
    EncoderConfig {
        n_layers: layers,
        n_heads: 2,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_seq_len: seq_len,
        n_classes: 2,
        dropout_rate: dropout,
        pooling: Pooling::Mean,
    }
}

struct Setup {
    teacher: Teacher,
    student: EncoderParams,
    student_config: EncoderConfig,
    data: Dataset,
}

fn setup(dropout: f64) -> Setup {
    let data = dataset(TaskKind::Marker, 48, 16, 6);
    let cfg = teacher_config(2, 8, 16, 6, dropout);
    let settings = TrainSettings {
        epochs: 1,
        batch_size: 8,
        optim: AdamSettings {
            lr: 3e-3,
            ..AdamSettings::default()
        },
        seed: 1,
    };
    let (params, _) = fine_tune_teacher(init_params(&cfg, 1).unwrap(), &cfg, &settings, &data).unwrap();
    let mut teacher = Teacher::new(params, cfg.clone(), &data).unwrap();
    teacher.post_train_memory(&MemorySettings { size: 4, ..MemorySettings::default() }, 1).unwrap();
    let student_config = EncoderConfig { n_layers: 1, ..cfg.clone() };
    let student = init_student_from_teacher(&teacher.params, &cfg, &student_config).unwrap();
    Setup {
        teacher,
        student,
        student_config,
        data,
    }
}

fn distill_config(kind: LossKind, weights: LossWeights) -> DistillConfig {
    DistillConfig {
        kind,
        weights,
        optim: AdamSettings::default(),
        epochs: 2,
        batch_size: 8,
        seed: 9,
        memory: MemorySettings {
            size: 4,
            student_lr: Some(0.05),
            ..MemorySettings::default()
        },
    }
}

fn weights_for(kind: LossKind) -> LossWeights {
    LossWeights {
        gamma_g: if kind == LossKind::IntraLocal { 0.0 } else { 1.0 },
        ..LossWeights::default()
    }
}

#[test]
fn adam_matches_the_hand_formula() {
    let s = AdamSettings {
        lr: 0.01,
        beta1: 0.8,
        beta2: 0.9,
        eps: 1e-6,
        weight_decay: 0.0,
    };
    let mut x = Tensor::new([2], vec![1.0, -2.0]).unwrap();
    let mut adam = Adam::new(s.clone(), [&x]);
    let grads = [[0.5, -1.0], [0.25, 3.0]];
    let (mut m, mut v, mut want) = ([0.0; 2], [0.0; 2], [1.0, -2.0]);
    for (t, g) in grads.iter().enumerate() {
        adam.update(&mut [&mut x], &[Some(Tensor::new([2], g.to_vec()).unwrap())]).unwrap();
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = 0.8 * m[j] + 0.2 * g[j];
            v[j] = 0.9 * v[j] + 0.1 * g[j] * g[j];
            let mhat = m[j] / (1.0 - 0.8f64.powi(t));
            let vhat = v[j] / (1.0 - 0.9f64.powi(t));
            want[j] -= 0.01 * mhat / (vhat.sqrt() + 1e-6);
        }
        for j in 0..2 {
            assert!((x.data()[j] - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut adam = Adam::new(AdamSettings::default(), [&x]);
    adam.update(&mut [&mut x], &[Some(Tensor::zeros([3]))]).unwrap();
    adam.update(&mut [&mut x], &[None]).unwrap();
    assert_eq!(x.data(), &[1.0, 2.0, 3.0]);
}

fn adam_on_square(x0: f64, steps: usize) -> Vec<f64> {
    let mut x = Tensor::new([1], vec![x0]).unwrap();
    let mut adam = Adam::new(
        AdamSettings {
            lr: 0.1,
            ..AdamSettings::default()
        },
        [&x],
    );
    (0..steps)
        .map(|_| {
            let g = Tensor::new([1], vec![2.0 * x.data()[0]]).unwrap();
            adam.update(&mut [&mut x], &[Some(g)]).unwrap();
            x.data()[0]
        })
        .collect()
}

#[test]
fn adam_shrinks_a_quadratic() {
    // each step moves by about lr, so from 10 it never overshoots in 100 steps
    let path = adam_on_square(10.0, 100);
    let mut last = 10.0f64;
    for (step, x) in path.iter().enumerate() {
        assert!(x.abs() < last, "step {step}: {x} vs {last}");
        last = x.abs();
    }
    // closer in, momentum overshoots zero but still settles
    let near = adam_on_square(1.0, 100);
    assert!(near.last().unwrap().abs() < 1e-2);
}

#[test]
fn teacher_learns_a_separable_task() {
    // majority parity is linear in the bag of tokens
    let data = dataset(TaskKind::Parity, 400, 24, 8);
    let cfg = teacher_config(4, 16, 24, 8, 0.0);
    let settings = TrainSettings {
        epochs: 5,
        batch_size: 16,
        optim: AdamSettings {
            lr: 1e-3,
            ..AdamSettings::default()
        },
        seed: 2,
    };
    let (_, report) = fine_tune_teacher(init_params(&cfg, 2).unwrap(), &cfg, &settings, &data).unwrap();
    assert!(report.train_accuracy >= 0.95, "{report:?}");
    assert_eq!(report.epoch_loss.len(), 5);
}

#[test]
fn nods_and_vkd_with_alpha_one_follow_plain_cross_entropy() {
    let s = setup(0.1);
    let plain = TrainSettings {
        epochs: 2,
        batch_size: 8,
        optim: AdamSettings::default(),
        seed: 9,
    };
    let (ce, _) = fine_tune_teacher(s.student.clone(), &s.student_config, &plain, &s.data).unwrap();
    let nods = distill(&s.teacher, s.student.clone(), &s.student_config, &distill_config(LossKind::NoDs, LossWeights::default()), &s.data, None).unwrap();
    let vkd_cfg = distill_config(
        LossKind::Vkd,
        LossWeights {
            alpha: 1.0,
            ..LossWeights::default()
        },
    );
    let vkd = distill(&s.teacher, s.student.clone(), &s.student_config, &vkd_cfg, &s.data, None).unwrap();
    assert!(nods.student.bit_eq(&ce));
    assert!(vkd.student.bit_eq(&ce));
    for (a, b) in nods.metrics.iter().zip(&vkd.metrics) {
        assert_eq!(a.terms.ce.to_bits(), b.terms.ce.to_bits());
    }
}

#[test]
fn beta_zero_reduces_every_kind_to_vkd() {
    let s = setup(0.1);
    let zero = |kind| LossWeights {
        beta: 0.0,
        ..weights_for(kind)
    };
    let vkd = distill(&s.teacher, s.student.clone(), &s.student_config, &distill_config(LossKind::Vkd, zero(LossKind::Vkd)), &s.data, None).unwrap();
    for kind in [LossKind::Intra, LossKind::Local, LossKind::Global, LossKind::IntraLocal, LossKind::IntraLocalGlobal] {
        let out = distill(&s.teacher, s.student.clone(), &s.student_config, &distill_config(kind, zero(kind)), &s.data, None).unwrap();
        assert!(out.student.bit_eq(&vkd.student), "{kind:?}");
        for (a, b) in out.metrics.iter().zip(&vkd.metrics) {
            assert_eq!(a.terms.total.to_bits(), b.terms.total.to_bits(), "{kind:?}");
        }
    }
}

#[test]
fn teacher_is_untouched_and_metrics_carry_active_terms() {
    let s = setup(0.0);
    let before_params = s.teacher.params.clone();
    let before_memory = s.teacher.memory.clone().unwrap();
    for kind in LossKind::ALL {
        let out = distill(&s.teacher, s.student.clone(), &s.student_config, &distill_config(kind, weights_for(kind)), &s.data, None).unwrap();
        assert!(s.teacher.params.bit_eq(&before_params));
        assert!(s.teacher.memory.as_ref().unwrap().centroids.bit_eq(&before_memory.centroids));
        assert_eq!(out.metrics.len(), 2 * 6);
        assert_eq!(out.student_memory.is_some(), kind.uses_global());
        for r in &out.metrics {
            let t = &r.terms;
            assert!(t.total.is_finite() && t.ce.is_finite());
            assert_eq!(t.kld.is_some(), kind.uses_teacher(), "{kind:?}");
            assert_eq!(t.vkd.is_some(), kind.uses_teacher(), "{kind:?}");
            assert_eq!(t.intra.is_some(), kind.uses_intra(), "{kind:?}");
            assert_eq!(t.local.is_some(), kind.uses_local(), "{kind:?}");
            for g in [t.global, t.memory_structure, t.memory_hidden_euclidean, t.memory_hidden_cosine] {
                assert_eq!(g.is_some(), kind.uses_global(), "{kind:?}");
            }
        }
    }
}

#[test]
fn student_memory_learns_only_for_global_kinds() {
    let s = setup(0.0);
    let c = distill_config(LossKind::Global, weights_for(LossKind::Global));
    let out = distill(&s.teacher, s.student.clone(), &s.student_config, &c, &s.data, None).unwrap();
    let init = fsd::memory::init_student_memory(4, 6 * 8, c.memory.student_std, c.seed).unwrap();
    assert!(!out.student_memory.unwrap().centroids.bit_eq(&init.centroids));
}

#[test]
fn live_rd_matches_checkpoint_replay() {
    let s = setup(0.1);
    let probe = RdProbe {
        batches: s.data.batches(16).unwrap()[..2].to_vec(),
        every: 4,
        keep_snapshots: true,
    };
    let c = distill_config(LossKind::IntraLocalGlobal, weights_for(LossKind::IntraLocalGlobal));
    let out = distill(&s.teacher, s.student.clone(), &s.student_config, &c, &s.data, Some(&probe)).unwrap();
    let steps: Vec<usize> = out.rd_curve.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 4, 8, 12]);
    assert_eq!(out.snapshots.len(), steps.len());

    let replayed: Vec<(usize, EncoderParams)> = out
        .snapshots
        .iter()
        .map(|(step, p)| {
            let ckpt = Checkpoint {
                config: s.student_config.clone(),
                params: p.clone(),
                memory: None,
                metadata: RunMetadata {
                    role: "student".into(),
                    seed: c.seed,
                    step: *step,
                    config_hash: String::new(),
                    extra: Default::default(),
                },
            };
            let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
            (back.metadata.step, back.params)
        })
        .collect();
    let curve = rd_curve(&s.teacher.params, &s.teacher.config, &replayed, &s.student_config, &probe.batches).unwrap();
    assert_eq!(curve, out.rd_curve);
    assert!(curve.iter().all(|r| r.values().iter().all(|v| *v >= 0.0)));
}

#[test]
fn student_equal_to_teacher_has_a_flat_zero_curve() {
    let s = setup(0.0);
    let cfg = &s.teacher.config;
    let batches = s.data.batches(16).unwrap();
    let snaps = vec![(0, s.teacher.params.clone()), (5, s.teacher.params.clone())];
    let curve = rd_curve(&s.teacher.params, cfg, &snaps, cfg, &batches).unwrap();
    assert_eq!(curve.len(), 2);
    assert!(curve.iter().all(|r| r.values() == [0.0; 4]));
}

#[test]
fn distillation_is_deterministic_and_seed_sensitive() {
    let s = setup(0.1);
    let c = distill_config(LossKind::IntraLocalGlobal, weights_for(LossKind::IntraLocalGlobal));
    let a = distill(&s.teacher, s.student.clone(), &s.student_config, &c, &s.data, None).unwrap();
    let b = distill(&s.teacher, s.student.clone(), &s.student_config, &c, &s.data, None).unwrap();
    assert!(a.student.bit_eq(&b.student));
    assert_eq!(a.metrics, b.metrics);
    let other = DistillConfig { seed: 10, ..c };
    let d = distill(&s.teacher, s.student.clone(), &s.student_config, &other, &s.data, None).unwrap();
    assert!(!a.student.bit_eq(&d.student));
}

#[test]
fn huge_learning_rate_reports_divergence_or_stays_finite() {
    let s = setup(0.0);
    let c = DistillConfig {
        optim: AdamSettings {
            lr: 1e300,
            ..AdamSettings::default()
        },
        ..distill_config(LossKind::Vkd, LossWeights::default())
    };
    match distill(&s.teacher, s.student.clone(), &s.student_config, &c, &s.data, None) {
        Err(e) => assert!(e.is_numerical(), "{e}"),
        Ok(out) => panic!("expected divergence, got final loss {}", out.metrics.last().unwrap().terms.total),
    }
}
