//! Forward pass of a small encoder on a padded batch: logits, penultimate
//! features, and the effect of first-token pooling.

use fsd::model::{forward_eval, init_params, Batch, EncoderConfig, Pooling};

fn main() -> fsd::Result<()> {
    let mut cfg = EncoderConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_ff: 32,
        vocab_size: 30,
        max_seq_len: 6,
        n_classes: 3,
        dropout_rate: 0.1,
        pooling: Pooling::Mean,
    };
    let params = init_params(&cfg, 0)?;
    println!("{} parameters", params.num_values());

    let batch = Batch::from_rows(&[vec![5, 9, 12, 0, 0, 0], vec![3, 4, 5, 6, 7, 8]], &[0, 2], 6)?;
    let (logits, hidden) = forward_eval(&params, &cfg, &batch)?;
    println!("logits {:?}, hidden {:?}", logits.shape(), hidden.shape());
    for i in 0..batch.size() {
        println!("  sample {i}: {:?}", logits.row(i));
    }
    // padded positions come out as zero rows
    println!("pad row of sample 0 is zero: {}", hidden.select(0).row(4).iter().all(|v| *v == 0.0));

    cfg.pooling = Pooling::First;
    let (first, _) = forward_eval(&params, &cfg, &batch)?;
    println!("first-token pooling, sample 0: {:?}", first.row(0));
    Ok(())
}
