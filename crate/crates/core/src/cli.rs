//! Command-line pipeline.
//!
//! Every command reads an [`ExperimentConfig`] and works inside one run
//! directory:
//!
//! ```text
//! <out>/config.toml
//! <out>/data/{train,dev,test}.tsv                     gen-data
//! <out>/teacher/teacher.ckpt                           train-teacher
//! <out>/memory/teacher_memory.ckpt                     post-train-memory
//! <out>/students/<kind>/bs<B>/seed<S>/student.ckpt     distill
//!                                     snapshots/       distill
//!                                     rd_curve.csv     analyze-rd
//!                                     restoration.csv  analyze-restoration
//!                                     heatmap.csv      heatmap
//! <out>/analysis/ranks.csv                             rank
//! <out>/analysis/report.csv                            report
//! ```
//!
//! Each command leaves a `<command>.manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{average_ranks, batch_pool, cka_heatmap, rank_table, rd_curve, restoration_rate, HeatmapMatrix};
use crate::checkpoint::{Checkpoint, RunMetadata, VERSION};
use crate::config::ExperimentConfig;
use crate::data::{gen_data, load_task, split_paths, Dataset, TaskData};
use crate::error::{FsdError, Result};
use crate::losses::{LossKind, LossTerms};
use crate::model::{init_params, init_student_from_teacher, Batch, EncoderParams};
use crate::train::{accuracy, distill, fine_tune_teacher, predict, MetricsRecord, RdProbe, Teacher};

#[derive(Debug, Parser)]
#[command(name = "fsd", version, about = "Feature-structure distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train/dev/test TSV files.
    GenData(Common),
    /// Fine-tune the teacher with cross-entropy.
    TrainTeacher(TeacherArgs),
    /// Cluster teacher features into the frozen memory.
    PostTrainMemory(TeacherArgs),
    /// Train students against the teacher.
    Distill(RunArgs),
    /// Replay student snapshots into rd_curve.csv.
    AnalyzeRd(RunArgs),
    /// Score student predictions against teacher predictions on the test split.
    AnalyzeRestoration(RunArgs),
    /// Cross-batch CKA heatmap between the teacher and each student.
    Heatmap(HeatmapArgs),
    /// Average ranks of the final relation differences across methods.
    Rank(RunArgs),
    /// Mean and standard deviation over seeds of every per-run metric.
    Report(RunArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TeacherArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides `teacher_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Student seeds; defaults to the config's seed list.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Loss kinds (noDS, VKD, I, L, G, IL, ILG); defaults to `distill.kind`.
    #[arg(long, value_delimiter = ',')]
    pub kind: Vec<String>,
    /// Student batch sizes; defaults to `distill.batch_size`.
    #[arg(long, value_delimiter = ',')]
    pub batch_size: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of pool batches; overrides `analysis.pool_size`.
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Pool batch size; overrides `analysis.pool_batch_size`.
    #[arg(long)]
    pub pool_batch_size: Option<usize>,
    /// Also write the teacher-teacher heatmap.
    #[arg(long)]
    pub with_teacher: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&Ctx::new(a)?),
        Command::TrainTeacher(a) => cmd_train_teacher(&Ctx::new(&a.common)?, a.seed),
        Command::PostTrainMemory(a) => cmd_post_train_memory(&Ctx::new(&a.common)?, a.seed),
        Command::Distill(a) => cmd_distill(&Ctx::new(&a.common)?, a),
        Command::AnalyzeRd(a) => cmd_analyze_rd(&Ctx::new(&a.common)?, a),
        Command::AnalyzeRestoration(a) => cmd_analyze_restoration(&Ctx::new(&a.common)?, a),
        Command::Heatmap(a) => cmd_heatmap(&Ctx::new(&a.run.common)?, a),
        Command::Rank(a) => cmd_rank(&Ctx::new(&a.common)?, a),
        Command::Report(a) => cmd_report(&Ctx::new(&a.common)?, a),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    root: PathBuf,
    hash: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    checkpoint_version: u32,
    config_hash: &'a str,
    seed: Option<u64>,
    settings: BTreeMap<String, String>,
    /// SHA-256 of every file read, keyed by path relative to the run directory.
    inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written.
    outputs: BTreeMap<String, String>,
}

/// Files read and written by one unit of work, for its manifest.
#[derive(Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    settings: BTreeMap<String, String>,
}

impl Io {
    fn read(&mut self, p: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(p.into());
        self
    }

    fn wrote(&mut self, p: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(p.into());
        self
    }

    fn set(&mut self, k: &str, v: impl ToString) -> &mut Self {
        self.settings.insert(k.to_string(), v.to_string());
        self
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn missing(path: &Path, hint: &str) -> FsdError {
    FsdError::MissingDependency(format!("{} not found; run {hint} first", path.display()))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path, hint))
    }
}

impl Ctx {
    fn new(c: &Common) -> Result<Ctx> {
        let cfg = ExperimentConfig::load(&c.config)?;
        let root = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        fs::create_dir_all(&root)?;
        let hash = cfg.hash();
        fs::write(root.join("config.toml"), cfg.to_toml()?)?;
        Ok(Ctx { cfg, root, hash })
    }

    fn data_dir(&self) -> PathBuf {
        self.cfg.task.dir.clone().unwrap_or_else(|| self.root.join("data"))
    }

    fn teacher_path(&self) -> PathBuf {
        self.root.join("teacher").join("teacher.ckpt")
    }

    fn memory_path(&self) -> PathBuf {
        self.root.join("memory").join("teacher_memory.ckpt")
    }

    fn student_dir(&self, kind: LossKind, bs: usize, seed: u64) -> PathBuf {
        self.root
            .join("students")
            .join(kind.name())
            .join(format!("bs{bs}"))
            .join(format!("seed{seed}"))
    }

    fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn task_data(&self, io: &mut Io) -> Result<TaskData> {
        for p in split_paths(&self.data_dir()) {
            require(&p, "gen-data")?;
            io.read(p);
        }
        let t = &self.cfg.teacher;
        load_task(&self.data_dir(), t.max_seq_len, t.n_classes)
    }

    fn load_teacher(&self, with_memory: bool, io: &mut Io) -> Result<Checkpoint> {
        let (path, hint) = if with_memory {
            (self.memory_path(), "post-train-memory")
        } else {
            (self.teacher_path(), "train-teacher")
        };
        require(&path, hint)?;
        let ck = Checkpoint::load(&path)?;
        if ck.config != self.cfg.teacher {
            return Err(FsdError::MissingDependency(format!(
                "{} was built for a different teacher config; rerun {hint}",
                path.display()
            )));
        }
        io.read(path);
        Ok(ck)
    }

    fn load_student(&self, kind: LossKind, bs: usize, seed: u64, io: &mut Io) -> Result<Checkpoint> {
        let path = self.student_dir(kind, bs, seed).join("student.ckpt");
        require(&path, &format!("distill --kind {kind} --batch-size {bs} --seed {seed}"))?;
        io.read(path.clone());
        Checkpoint::load(&path)
    }

    fn metadata(&self, role: &str, seed: u64, step: usize) -> RunMetadata {
        RunMetadata {
            role: role.into(),
            seed,
            step,
            config_hash: self.hash.clone(),
            extra: BTreeMap::new(),
        }
    }

    fn seeds(&self, a: &RunArgs) -> Vec<u64> {
        if a.seed.is_empty() {
            self.cfg.seeds.clone()
        } else {
            a.seed.clone()
        }
    }

    fn kinds(&self, a: &RunArgs) -> Result<Vec<LossKind>> {
        if a.kind.is_empty() {
            return Ok(vec![self.cfg.distill.kind]);
        }
        a.kind
            .iter()
            .map(|k| LossKind::parse(k).map_err(|_| FsdError::Usage(format!("unknown loss kind {k:?}"))))
            .collect()
    }

    fn batch_sizes(&self, a: &RunArgs) -> Vec<usize> {
        if a.batch_size.is_empty() {
            vec![self.cfg.distill.batch_size]
        } else {
            a.batch_size.clone()
        }
    }

    fn manifest(&self, dir: &Path, command: &str, seed: Option<u64>, io: &Io) -> Result<()> {
        let hashes = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            ps.iter().map(|p| Ok((self.rel(p), sha256_file(p)?))).collect()
        };
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_version: VERSION,
            config_hash: &self.hash,
            seed,
            settings: io.settings.clone(),
            inputs: hashes(&io.inputs)?,
            outputs: hashes(&io.outputs)?,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(dir.join(format!("{command}.manifest.json")), text)?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(String::from).collect()))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn parse_num(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| FsdError::Checkpoint(format!("{}: bad number {s:?}", path.display())))
}

/// `(metric, value)` rows of a two-column summary file.
fn write_summary(path: &Path, values: &[(&str, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = values.iter().map(|(k, v)| vec![k.to_string(), num(*v)]).collect();
    write_csv(path, &["metric", "value"], &rows)
}

fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let spec = ctx
        .cfg
        .task
        .synthetic
        .as_ref()
        .ok_or_else(|| FsdError::Config("gen-data needs a [task.synthetic] section".into()))?;
    let dir = ctx.data_dir();
    let paths = gen_data(spec, &dir)?;
    let mut io = Io::default();
    io.set("task", spec.task.name()).set("size", spec.size).set("seed", spec.seed);
    for p in paths {
        io.wrote(p);
    }
    ctx.manifest(&dir, "gen-data", Some(spec.seed), &io)?;
    println!("gen-data: wrote {}", dir.display());
    Ok(())
}

fn cmd_train_teacher(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let mut io = Io::default();
    let data = ctx.task_data(&mut io)?;
    let mut settings = ctx.cfg.teacher_settings();
    if let Some(s) = seed {
        settings.seed = s;
    }
    let cfg = &ctx.cfg.teacher;
    let init = init_params(cfg, settings.seed)?;
    let (params, report) = fine_tune_teacher(init, cfg, &settings, &data.train)?;
    let dev = accuracy(&params, cfg, &data.dev, 64)?;
    let test = accuracy(&params, cfg, &data.test, 64)?;

    let dir = ctx.root.join("teacher");
    let ck = Checkpoint {
        config: cfg.clone(),
        params,
        memory: None,
        metadata: ctx.metadata("teacher", settings.seed, report.steps),
    };
    ck.save(&ctx.teacher_path())?;
    let rows: Vec<Vec<String>> = report
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(e, l)| vec![(e + 1).to_string(), num(*l)])
        .collect();
    write_csv(&dir.join("metrics.csv"), &["epoch", "mean_loss"], &rows)?;
    write_summary(
        &dir.join("summary.csv"),
        &[
            ("train_accuracy", report.train_accuracy),
            ("dev_accuracy", dev),
            ("test_accuracy", test),
            ("steps", report.steps as f64),
        ],
    )?;
    io.set("epochs", settings.epochs).set("batch_size", settings.batch_size);
    io.wrote(ctx.teacher_path()).wrote(dir.join("metrics.csv")).wrote(dir.join("summary.csv"));
    ctx.manifest(&dir, "train-teacher", Some(settings.seed), &io)?;
    println!(
        "train-teacher: train {:.4} dev {dev:.4} test {test:.4}",
        report.train_accuracy
    );
    Ok(())
}

fn cmd_post_train_memory(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let mut io = Io::default();
    let data = ctx.task_data(&mut io)?;
    let ck = ctx.load_teacher(false, &mut io)?;
    let seed = seed.unwrap_or(ctx.cfg.teacher_seed);
    let mut teacher = Teacher::new(ck.params, ck.config, &data.train)?;
    let settings = &ctx.cfg.distill.memory;
    let report = teacher.post_train_memory(settings, seed)?;

    let dir = ctx.root.join("memory");
    let out = Checkpoint {
        config: teacher.config,
        params: teacher.params,
        memory: teacher.memory,
        metadata: ctx.metadata("teacher", seed, ck.metadata.step),
    };
    out.save(&ctx.memory_path())?;
    let rows: Vec<Vec<String>> = report
        .objective
        .iter()
        .enumerate()
        .map(|(e, o)| vec![(e + 1).to_string(), num(*o)])
        .collect();
    write_csv(&dir.join("clustering.csv"), &["epoch", "objective"], &rows)?;
    let rows: Vec<Vec<String>> = report
        .counts
        .iter()
        .enumerate()
        .map(|(c, n)| vec![c.to_string(), n.to_string()])
        .collect();
    write_csv(&dir.join("centroids.csv"), &["centroid", "members"], &rows)?;
    io.set("size", settings.size)
        .set("kmeans_epochs", settings.kmeans_epochs)
        .set("relocations", report.relocations);
    io.wrote(ctx.memory_path()).wrote(dir.join("clustering.csv")).wrote(dir.join("centroids.csv"));
    ctx.manifest(&dir, "post-train-memory", Some(seed), &io)?;
    println!(
        "post-train-memory: {} centroids, objective {}",
        settings.size,
        report.objective.last().copied().map(num).unwrap_or_default()
    );
    Ok(())
}

const METRIC_HEADER: [&str; 13] = [
    "step",
    "epoch",
    "total",
    "ce",
    "kld",
    "vkd",
    "intra",
    "local",
    "global",
    "memory_structure",
    "memory_hidden_euclidean",
    "memory_hidden_cosine",
    "batch_accuracy",
];

fn metric_row(m: &MetricsRecord) -> Vec<String> {
    let t: &LossTerms = &m.terms;
    vec![
        m.step.to_string(),
        m.epoch.to_string(),
        num(t.total),
        num(t.ce),
        opt(t.kld),
        opt(t.vkd),
        opt(t.intra),
        opt(t.local),
        opt(t.global),
        opt(t.memory_structure),
        opt(t.memory_hidden_euclidean),
        opt(t.memory_hidden_cosine),
        num(m.batch_accuracy),
    ]
}

/// The fixed RD evaluation batches: leading dev examples in file order.
fn rd_batches(ctx: &Ctx, dev: &Dataset) -> Result<Vec<Batch>> {
    let a = &ctx.cfg.analysis;
    let need = a.rd_batches * a.rd_batch_size;
    if need > dev.len() {
        return Err(FsdError::Config(format!(
            "RD evaluation needs {need} dev examples, have {}",
            dev.len()
        )));
    }
    let idx: Vec<usize> = (0..need).collect();
    idx.chunks(a.rd_batch_size).map(|c| dev.batch(c)).collect()
}

fn snapshot_name(step: usize) -> String {
    format!("step{step:07}.ckpt")
}

fn cmd_distill(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let kinds = ctx.kinds(a)?;
    let seeds = ctx.seeds(a);
    let sizes = ctx.batch_sizes(a);
    let mut io_base = Io::default();
    let data = ctx.task_data(&mut io_base)?;
    let needs_memory = kinds.iter().any(|k| k.uses_global());
    let ck = ctx.load_teacher(needs_memory, &mut io_base)?;
    let mut teacher = Teacher::new(ck.params, ck.config, &data.train)?;
    teacher.memory = ck.memory;
    let scfg = &ctx.cfg.student;
    let student_init = init_student_from_teacher(&teacher.params, &teacher.config, scfg)?;
    let probe = RdProbe {
        batches: rd_batches(ctx, &data.dev)?,
        every: ctx.cfg.analysis.rd_every,
        keep_snapshots: true,
    };

    for &kind in &kinds {
        for &bs in &sizes {
            for &seed in &seeds {
                let mut dc = ctx.cfg.distill_config(seed);
                dc.kind = kind;
                dc.batch_size = bs;
                if kind == LossKind::IntraLocal {
                    dc.weights.gamma_g = 0.0;
                }
                let out = distill(&teacher, student_init.clone(), scfg, &dc, &data.train, Some(&probe))?;
                let dir = ctx.student_dir(kind, bs, seed);
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                let snap_dir = dir.join("snapshots");
                fs::create_dir_all(&snap_dir)?;
                let mut io = Io {
                    inputs: io_base.inputs.clone(),
                    ..Io::default()
                };
                let steps = out.metrics.last().map_or(0, |m| m.step);
                let mut meta = ctx.metadata("student", seed, steps);
                meta.extra.insert("kind".into(), kind.name().into());
                meta.extra.insert("batch_size".into(), bs.to_string());
                for (step, params) in &out.snapshots {
                    let p = snap_dir.join(snapshot_name(*step));
                    Checkpoint {
                        config: scfg.clone(),
                        params: params.clone(),
                        memory: None,
                        metadata: RunMetadata {
                            step: *step,
                            ..meta.clone()
                        },
                    }
                    .save(&p)?;
                    io.wrote(p);
                }
                let dev = accuracy(&out.student, scfg, &data.dev, 64)?;
                let test = accuracy(&out.student, scfg, &data.test, 64)?;
                Checkpoint {
                    config: scfg.clone(),
                    params: out.student,
                    memory: out.student_memory,
                    metadata: meta,
                }
                .save(&dir.join("student.ckpt"))?;
                let rows: Vec<Vec<String>> = out.metrics.iter().map(metric_row).collect();
                write_csv(&dir.join("metrics.csv"), &METRIC_HEADER, &rows)?;
                write_summary(
                    &dir.join("summary.csv"),
                    &[("dev_accuracy", dev), ("test_accuracy", test), ("steps", steps as f64)],
                )?;
                io.wrote(dir.join("student.ckpt")).wrote(dir.join("metrics.csv")).wrote(dir.join("summary.csv"));
                io.set("kind", kind).set("batch_size", bs).set("epochs", dc.epochs);
                ctx.manifest(&dir, "distill", Some(seed), &io)?;
                println!("distill {kind} bs{bs} seed{seed}: dev {dev:.4} test {test:.4}");
            }
        }
    }
    Ok(())
}

fn load_snapshots(dir: &Path, io: &mut Io) -> Result<Vec<(usize, EncoderParams)>> {
    let snap_dir = dir.join("snapshots");
    require(&snap_dir, "distill")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&snap_dir)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let ck = Checkpoint::load(&p)?;
        out.push((ck.metadata.step, ck.params));
        io.read(p);
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

fn for_each_run(ctx: &Ctx, a: &RunArgs, mut f: impl FnMut(LossKind, usize, u64) -> Result<()>) -> Result<()> {
    for kind in ctx.kinds(a)? {
        for bs in ctx.batch_sizes(a) {
            for seed in ctx.seeds(a) {
                f(kind, bs, seed)?;
            }
        }
    }
    Ok(())
}

const RD_HEADER: [&str; 5] = ["step", "rd_e_intra", "rd_e_inter", "rd_c_intra", "rd_c_inter"];

fn cmd_analyze_rd(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let mut base = Io::default();
    let data = ctx.task_data(&mut base)?;
    let teacher = ctx.load_teacher(false, &mut base)?;
    let batches = rd_batches(ctx, &data.dev)?;
    for_each_run(ctx, a, |kind, bs, seed| {
        let dir = ctx.student_dir(kind, bs, seed);
        let mut io = Io {
            inputs: base.inputs.clone(),
            ..Io::default()
        };
        let snaps = load_snapshots(&dir, &mut io)?;
        let curve = rd_curve(&teacher.params, &teacher.config, &snaps, &ctx.cfg.student, &batches)?;
        let rows: Vec<Vec<String>> = curve
            .iter()
            .map(|s| {
                let mut r = vec![s.step.to_string()];
                r.extend(s.values().map(num));
                r
            })
            .collect();
        let out = dir.join("rd_curve.csv");
        write_csv(&out, &RD_HEADER, &rows)?;
        io.wrote(out).set("rd_batches", batches.len());
        ctx.manifest(&dir, "analyze-rd", Some(seed), &io)?;
        if let Some(last) = curve.last() {
            println!(
                "analyze-rd {kind} bs{bs} seed{seed}: {} points, final RD^E_intra {}",
                curve.len(),
                num(last.rd_e_intra)
            );
        }
        Ok(())
    })
}

fn cmd_analyze_restoration(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let mut base = Io::default();
    let data = ctx.task_data(&mut base)?;
    let teacher = ctx.load_teacher(false, &mut base)?;
    let tpred = predict(&teacher.params, &teacher.config, &data.test, 64)?;
    let n_classes = ctx.cfg.task.n_classes;
    for_each_run(ctx, a, |kind, bs, seed| {
        let mut io = Io {
            inputs: base.inputs.clone(),
            ..Io::default()
        };
        let student = ctx.load_student(kind, bs, seed, &mut io)?;
        let spred = predict(&student.params, &student.config, &data.test, 64)?;
        let rep = restoration_rate(&tpred, &spred, n_classes)?;
        let mut rows: Vec<Vec<String>> = rep
            .classes
            .iter()
            .map(|c| {
                vec![
                    c.class.to_string(),
                    num(c.precision),
                    num(c.recall),
                    num(c.f1),
                    c.support.to_string(),
                    c.undefined.to_string(),
                ]
            })
            .collect();
        rows.push(vec![
            "macro".into(),
            num(rep.macro_precision),
            num(rep.macro_recall),
            num(rep.macro_f1),
            tpred.len().to_string(),
            rep.classes.iter().any(|c| c.undefined).to_string(),
        ]);
        let dir = ctx.student_dir(kind, bs, seed);
        let out = dir.join("restoration.csv");
        write_csv(&out, &["class", "precision", "recall", "f1", "support", "undefined"], &rows)?;
        io.wrote(out);
        ctx.manifest(&dir, "analyze-restoration", Some(seed), &io)?;
        println!("analyze-restoration {kind} bs{bs} seed{seed}: macro F1 {:.4}", rep.macro_f1);
        Ok(())
    })
}

fn write_heatmap(path: &Path, h: &HeatmapMatrix) -> Result<()> {
    let mut header = vec!["batch".to_string()];
    header.extend((0..h.size).map(|j| format!("b{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..h.size)
        .map(|i| {
            let mut r = vec![format!("b{i}")];
            r.extend((0..h.size).map(|j| opt(h.get(i, j))));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Mean of the non-missing diagonal of a heatmap CSV.
pub fn heatmap_diagonal(path: &Path) -> Result<Option<f64>> {
    let (_, rows) = read_csv(path)?;
    let mut vals = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let cell = r.get(i + 1).map(String::as_str).unwrap_or("");
        if !cell.is_empty() {
            vals.push(parse_num(path, cell)?);
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

fn cmd_heatmap(ctx: &Ctx, a: &HeatmapArgs) -> Result<()> {
    let mut base = Io::default();
    let data = ctx.task_data(&mut base)?;
    let teacher = ctx.load_teacher(false, &mut base)?;
    let an = &ctx.cfg.analysis;
    let p = a.pool_size.unwrap_or(an.pool_size);
    let b = a.pool_batch_size.unwrap_or(an.pool_batch_size);
    let pool = batch_pool(&data.test, p, b, an.pool_seed)?;
    let emit = |dir: &Path, other: &Checkpoint, seed: Option<u64>, mut io: Io, label: &str| -> Result<()> {
        let h = cka_heatmap(&teacher.params, &teacher.config, &other.params, &other.config, &pool)?;
        let out = dir.join("heatmap.csv");
        write_heatmap(&out, &h)?;
        io.wrote(out).set("pool_size", p).set("pool_batch_size", b).set("pool_seed", an.pool_seed);
        io.set("missing_pixels", h.missing);
        ctx.manifest(dir, "heatmap", seed, &io)?;
        println!("heatmap {label}: diagonal average {:.4}, {} missing", h.diagonal_average, h.missing);
        Ok(())
    };
    if a.with_teacher {
        let io = Io {
            inputs: base.inputs.clone(),
            ..Io::default()
        };
        emit(&ctx.root.join("teacher"), &teacher, None, io, "teacher")?;
    }
    for_each_run(ctx, &a.run, |kind, bs, seed| {
        let mut io = Io {
            inputs: base.inputs.clone(),
            ..Io::default()
        };
        let student = ctx.load_student(kind, bs, seed, &mut io)?;
        emit(&ctx.student_dir(kind, bs, seed), &student, Some(seed), io, &format!("{kind} bs{bs} seed{seed}"))
    })
}

fn final_rd(path: &Path) -> Result<[f64; 4]> {
    require(path, "analyze-rd")?;
    let (_, rows) = read_csv(path)?;
    let last = rows
        .last()
        .ok_or_else(|| FsdError::MissingDependency(format!("{} is empty", path.display())))?;
    let mut out = [0.0; 4];
    for (o, s) in out.iter_mut().zip(&last[1..]) {
        *o = parse_num(path, s)?;
    }
    Ok(out)
}

/// Kinds that have a run directory, in canonical order.
fn present_kinds(ctx: &Ctx) -> Vec<LossKind> {
    LossKind::ALL
        .into_iter()
        .filter(|k| ctx.root.join("students").join(k.name()).is_dir())
        .collect()
}

/// Batch sizes with a run directory for `kind`, ascending.
fn present_sizes(ctx: &Ctx, kind: LossKind) -> Result<Vec<usize>> {
    let dir = ctx.root.join("students").join(kind.name());
    let mut out = Vec::new();
    for e in fs::read_dir(&dir)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(bs) = name.strip_prefix("bs").and_then(|s| s.parse().ok()) {
            out.push(bs);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn cmd_rank(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let kinds = if a.kind.is_empty() { present_kinds(ctx) } else { ctx.kinds(a)? };
    if kinds.len() < 2 {
        return Err(FsdError::MissingDependency(
            "rank needs distilled students of at least two kinds".into(),
        ));
    }
    let mut io = Io::default();
    let mut rows = Vec::new();
    for bs in ctx.batch_sizes(a) {
        for seed in ctx.seeds(a) {
            let mut table = BTreeMap::new();
            for &kind in &kinds {
                let p = ctx.student_dir(kind, bs, seed).join("rd_curve.csv");
                table.insert(kind.name().to_string(), final_rd(&p)?);
                io.read(p);
            }
            let avg = rank_table(&table)?;
            let names: Vec<&String> = table.keys().collect();
            let per_variant: Vec<Vec<f64>> = (0..4)
                .map(|v| average_ranks(&names.iter().map(|n| table[*n][v]).collect::<Vec<_>>()))
                .collect();
            for (i, n) in names.iter().enumerate() {
                let mut r = vec![bs.to_string(), seed.to_string(), n.to_string()];
                r.extend(per_variant.iter().map(|col| num(col[i])));
                r.push(num(avg[*n]));
                rows.push(r);
            }
        }
    }
    let dir = ctx.analysis_dir();
    let out = dir.join("ranks.csv");
    write_csv(
        &out,
        &[
            "batch_size",
            "seed",
            "method",
            "rank_e_intra",
            "rank_e_inter",
            "rank_c_intra",
            "rank_c_inter",
            "average_rank",
        ],
        &rows,
    )?;
    io.wrote(out);
    ctx.manifest(&dir, "rank", None, &io)?;
    println!("rank: {} rows", rows.len());
    Ok(())
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every metric a finished run directory offers.
fn run_metrics(dir: &Path, io: &mut Io) -> Result<Vec<(String, f64)>> {
    let summary = dir.join("summary.csv");
    require(&summary, "distill")?;
    let mut out = Vec::new();
    for r in read_csv(&summary)?.1 {
        out.push((r[0].clone(), parse_num(&summary, &r[1])?));
    }
    io.read(summary);
    let restoration = dir.join("restoration.csv");
    if restoration.exists() {
        let (_, rows) = read_csv(&restoration)?;
        if let Some(r) = rows.iter().find(|r| r[0] == "macro") {
            out.push(("restoration_macro_precision".into(), parse_num(&restoration, &r[1])?));
            out.push(("restoration_macro_recall".into(), parse_num(&restoration, &r[2])?));
            out.push(("restoration_macro_f1".into(), parse_num(&restoration, &r[3])?));
        }
        io.read(restoration);
    }
    let heatmap = dir.join("heatmap.csv");
    if heatmap.exists() {
        if let Some(d) = heatmap_diagonal(&heatmap)? {
            out.push(("heatmap_diagonal".into(), d));
        }
        io.read(heatmap);
    }
    let rd = dir.join("rd_curve.csv");
    if rd.exists() {
        for (name, v) in RD_HEADER[1..].iter().zip(final_rd(&rd)?) {
            out.push((format!("final_{name}"), v));
        }
        io.read(rd);
    }
    Ok(out)
}

fn cmd_report(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let kinds = if a.kind.is_empty() { present_kinds(ctx) } else { ctx.kinds(a)? };
    if kinds.is_empty() {
        return Err(FsdError::MissingDependency("no distilled students to report; run distill first".into()));
    }
    let seeds = ctx.seeds(a);
    let mut io = Io::default();
    let mut ranks: BTreeMap<(usize, u64, String), f64> = BTreeMap::new();
    let ranks_path = ctx.analysis_dir().join("ranks.csv");
    if ranks_path.exists() {
        for r in read_csv(&ranks_path)?.1 {
            let bs = r[0].parse().unwrap_or(0);
            let seed = r[1].parse().unwrap_or(0);
            ranks.insert((bs, seed, r[2].clone()), parse_num(&ranks_path, &r[7])?);
        }
        io.read(ranks_path);
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let sizes = if a.batch_size.is_empty() { present_sizes(ctx, kind)? } else { a.batch_size.clone() };
        // dev accuracy per seed per batch size, for the spread across batch sizes
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for &bs in &sizes {
            let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &seed in &seeds {
                let found = run_metrics(&ctx.student_dir(kind, bs, seed), &mut io)?;
                for (k, v) in found {
                    if k == "dev_accuracy" {
                        by_seed.entry(seed).or_default().push(v);
                    }
                    metrics.entry(k).or_default().push(v);
                }
                if let Some(r) = ranks.get(&(bs, seed, kind.name().to_string())) {
                    metrics.entry("average_rank".into()).or_default().push(*r);
                }
            }
            for (k, vals) in metrics {
                let (m, s) = mean_std(&vals);
                rows.push(vec![kind.name().into(), bs.to_string(), k, vals.len().to_string(), num(m), num(s)]);
            }
        }
        if sizes.len() > 1 {
            let spreads: Vec<f64> = by_seed.values().map(|v| mean_std(v).1).collect();
            let (m, s) = mean_std(&spreads);
            rows.push(vec![
                kind.name().into(),
                "all".into(),
                "dev_accuracy_std_over_batch_sizes".into(),
                spreads.len().to_string(),
                num(m),
                num(s),
            ]);
        }
    }
    let dir = ctx.analysis_dir();
    let out = dir.join("report.csv");
    write_csv(&out, &["method", "batch_size", "metric", "n", "mean", "std"], &rows)?;
    io.wrote(out.clone());
    ctx.manifest(&dir, "report", None, &io)?;
    println!("report: wrote {}", out.display());
    Ok(())
}
