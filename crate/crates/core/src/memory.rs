//! Centroid memory: k-means post-training of teacher features and random
//! initialization of the student memory.

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, Stream};

/// Default number of k-means epochs for the teacher memory.
pub const DEFAULT_KMEANS_EPOCHS: usize = 3;

/// Default standard deviation of student memory entries.
pub const STUDENT_MEMORY_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemorySource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// `C × width` centroid rows.
    pub centroids: Tensor,
    pub trainable: bool,
    pub source: MemorySource,
}

impl MemoryBank {
    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn width(&self) -> usize {
        self.centroids.row_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    /// Sum of squared distances after each epoch.
    pub objective: Vec<f64>,
    /// Members per centroid after the final epoch.
    pub counts: Vec<usize>,
    pub epochs: usize,
    /// Number of empty clusters relocated over the run.
    pub relocations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_widths(features: &Tensor, centroids: &Tensor) -> Result<()> {
    if features.rank() != 2 || centroids.rank() != 2 || features.shape()[1] != centroids.shape()[1] {
        return Err(FsdError::shape(
            "kmeans",
            format!("features {:?} vs centroids {:?}", features.shape(), centroids.shape()),
        ));
    }
    Ok(())
}

/// Index of the nearest centroid for every feature row; ties go to the lowest index.
pub fn assign(features: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
    check_widths(features, centroids)?;
    Ok((0..features.rows())
        .map(|i| {
            let f = features.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..centroids.rows() {
                let d = sq_dist(f, centroids.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect())
}

/// `Σ_i ‖f_i − c_{a(i)}‖²`.
pub fn objective(features: &Tensor, centroids: &Tensor, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(features.row(i), centroids.row(a)))
        .sum()
}

/// Mean of each cluster's members. An empty cluster is moved onto the point
/// farthest from its own assigned centroid; several empty clusters take the
/// farthest points in decreasing order. Returns the new centroids and the
/// number of relocations.
pub fn update(features: &Tensor, assignment: &[usize], centroids: &Tensor) -> Result<(Tensor, usize)> {
    check_widths(features, centroids)?;
    if assignment.len() != features.rows() {
        return Err(FsdError::shape("kmeans update", "assignment length"));
    }
    let (c, w) = (centroids.rows(), centroids.shape()[1]);
    let mut sums = vec![0.0; c * w];
    let mut counts = vec![0usize; c];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a * w..(a + 1) * w].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let empty: Vec<usize> = (0..c).filter(|&j| counts[j] == 0).collect();
    let mut far: Vec<(f64, usize)> = Vec::new();
    if !empty.is_empty() {
        far = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| (sq_dist(features.row(i), centroids.row(a)), i))
            .collect();
        // farthest first, lower index on ties
        far.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    }
    let mut out = vec![0.0; c * w];
    for j in 0..c {
        let dst = &mut out[j * w..(j + 1) * w];
        if counts[j] > 0 {
            for (d, s) in dst.iter_mut().zip(&sums[j * w..(j + 1) * w]) {
                *d = s / counts[j] as f64;
            }
        }
    }
    for (k, &j) in empty.iter().enumerate() {
        let src = far[k % far.len()].1;
        out[j * w..(j + 1) * w].copy_from_slice(features.row(src));
    }
    Ok((Tensor::new([c, w], out)?, empty.len()))
}

/// Lloyd's k-means over full-set teacher features, yielding a frozen bank.
pub fn post_train_teacher_memory(
    features: &Tensor,
    c: usize,
    epochs: usize,
    seed: u64,
) -> Result<(MemoryBank, ClusteringReport)> {
    if features.rank() != 2 {
        return Err(FsdError::shape("post_train_teacher_memory", "features must be N×F"));
    }
    let n = features.rows();
    if c < 2 || n < c {
        return Err(FsdError::Config(format!(
            "memory needs 2 <= C <= N, got C={c}, N={n}"
        )));
    }
    if !features.all_finite() {
        return Err(FsdError::NonFinite { op: "post_train_teacher_memory" });
    }
    let mut rng = stream(seed, Stream::Memory);
    let w = features.shape()[1];
    let picks = sample(&mut rng, n, c).into_vec();
    let mut init = Vec::with_capacity(c * w);
    for &i in &picks {
        init.extend_from_slice(features.row(i));
    }
    let mut centroids = Tensor::new([c, w], init)?;
    let mut report = ClusteringReport {
        objective: Vec::with_capacity(epochs),
        counts: vec![0; c],
        epochs,
        relocations: 0,
    };
    let mut assignment = assign(features, &centroids)?;
    for _ in 0..epochs {
        assignment = assign(features, &centroids)?;
        let (next, moved) = update(features, &assignment, &centroids)?;
        centroids = next;
        report.relocations += moved;
        report.objective.push(objective(features, &centroids, &assignment));
    }
    for &a in &assignment {
        report.counts[a] += 1;
    }
    Ok((
        MemoryBank {
            centroids,
            trainable: false,
            source: MemorySource::Teacher,
        },
        report,
    ))
}

/// Trainable `C × width` bank with i.i.d. `N(0, std²)` entries.
pub fn init_student_memory(c: usize, width: usize, std: f64, seed: u64) -> Result<MemoryBank> {
    if c < 2 || width == 0 {
        return Err(FsdError::Config(format!("student memory needs C >= 2, got C={c}, width={width}")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| FsdError::domain("init_student_memory", e.to_string()))?;
    let mut rng = stream(seed, Stream::StudentMemory);
    let data = (0..c * width).map(|_| normal.sample(&mut rng)).collect();
    Ok(MemoryBank {
        centroids: Tensor::new([c, width], data)?,
        trainable: true,
        source: MemorySource::Student,
    })
}
