//! Clusters three Gaussian blobs into a frozen centroid memory and initialises
//! a matching trainable student memory.

use fsd::memory::{init_student_memory, post_train_teacher_memory, DEFAULT_KMEANS_EPOCHS, STUDENT_MEMORY_STD};
use fsd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

fn main() -> fsd::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let centers = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
    let mut data = Vec::new();
    for i in 0..90 {
        let c = centers[i % 3];
        data.push(c[0] + noise.sample(&mut rng));
        data.push(c[1] + noise.sample(&mut rng));
    }
    let features = Tensor::new([90, 2], data)?;

    let (bank, report) = post_train_teacher_memory(&features, 3, DEFAULT_KMEANS_EPOCHS, 5)?;
    for (epoch, obj) in report.objective.iter().enumerate() {
        println!("epoch {}  objective {obj:.4}", epoch + 1);
    }
    for j in 0..bank.size() {
        println!("centroid {j}: {:?} ({} members)", bank.centroids.row(j), report.counts[j]);
    }

    let student = init_student_memory(bank.size(), bank.width(), STUDENT_MEMORY_STD, 5)?;
    println!("student memory {}x{}, trainable: {}", student.size(), student.width(), student.trainable);
    Ok(())
}
