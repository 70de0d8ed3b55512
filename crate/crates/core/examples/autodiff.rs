//! Reverse-mode gradients on the tape, checked against central differences.

use fsd::numerics::{finite_diff_grad, relative_error, Graph, Tensor};

fn main() -> fsd::Result<()> {
    let x0 = Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])?;
    let w0 = Tensor::from_rows(&[[0.2, -0.4], [1.0, 0.3], [-0.6, 0.8]])?;

    // f(x) = sum(softmax(x W) ⊙ log_softmax(x W))
    let f = |x: &Tensor| -> fsd::Result<f64> {
        let g = Graph::new();
        let z = g.constant(x.clone()).matmul(&g.constant(w0.clone()))?;
        Ok(z.softmax_rows(1.0)?.mul(&z.log_softmax_rows(1.0)?)?.sum()?.item())
    };

    let g = Graph::new();
    let x = g.param(x0.clone());
    let z = x.matmul(&g.constant(w0.clone()))?;
    let loss = z.softmax_rows(1.0)?.mul(&z.log_softmax_rows(1.0)?)?.sum()?;
    g.backward(loss)?;
    let analytic = x.grad().expect("x is a parameter");
    let numeric = finite_diff_grad(f, &x0, 1e-5)?;

    println!("loss        {:.6}", loss.item());
    println!("analytic    {:?}", analytic.data());
    println!("numeric     {:?}", numeric.data());
    println!("rel. error  {:.2e}", relative_error(&analytic, &numeric, 1e-8));
    println!("tape nodes  {}", g.len());
    Ok(())
}
