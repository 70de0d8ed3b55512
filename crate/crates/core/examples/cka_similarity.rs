//! Linear CKA and HSIC on random features, including the invariances that make
//! CKA useful for comparing representations of different width.

use fsd::numerics::{Graph, Tensor};
use fsd::similarity::{cka, gram, hsic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> fsd::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let x = random(&mut rng, 16, 8);
    let noise = random(&mut rng, 16, 8).scaled(0.3);

    let g = Graph::new();
    let vx = g.constant(x.clone());
    let near = g.constant(x.clone()).add(&g.constant(noise))?;
    let other = g.constant(random(&mut rng, 16, 5));
    // a permutation of columns plus a scale is orthogonal-times-isotropic
    let perm = Tensor::new([8, 8], (0..64).map(|i| if (i / 8 + 3) % 8 == i % 8 { 1.0 } else { 0.0 }).collect())?;
    let moved = vx.matmul(&g.constant(perm))?.scale(4.0)?;

    println!("HSIC(X, X)        {:.6}", hsic(&gram(&vx)?, &gram(&vx)?)?.item());
    println!("CKA(X, X)         {:.12}", cka(&vx, &vx)?.item());
    println!("CKA(X, 4·X·P)     {:.12}", cka(&vx, &moved)?.item());
    println!("CKA(X, X + noise) {:.4}", cka(&vx, &near)?.item());
    println!("CKA(X, unrelated) {:.4}", cka(&vx, &other)?.item());
    Ok(())
}
