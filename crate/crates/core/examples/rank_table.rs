//! Ranks methods by their final relation differences on two tasks and
//! averages the ranks, with ties sharing the mean position.

use std::collections::BTreeMap;

use fsd::analysis::{average_over_tasks, average_ranks, rank_table};

fn main() -> fsd::Result<()> {
    println!("ranks of [0.3, 0.1, 0.3, 0.2]: {:?}", average_ranks(&[0.3, 0.1, 0.3, 0.2]));

    // final RD values in the order E-intra, E-inter, C-intra, C-inter
    let task_a: BTreeMap<String, [f64; 4]> = [
        ("VKD", [0.41, 0.12, 0.30, 0.08]),
        ("I", [0.22, 0.10, 0.18, 0.07]),
        ("L", [0.25, 0.07, 0.21, 0.05]),
        ("ILG", [0.20, 0.07, 0.16, 0.04]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let task_b: BTreeMap<String, [f64; 4]> = [
        ("VKD", [0.38, 0.15, 0.29, 0.11]),
        ("I", [0.31, 0.14, 0.20, 0.09]),
        ("L", [0.28, 0.09, 0.24, 0.06]),
        ("ILG", [0.24, 0.10, 0.19, 0.06]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let per_task = vec![rank_table(&task_a)?, rank_table(&task_b)?];
    let overall = average_over_tasks(&per_task)?;
    println!("{:<5} {:>7} {:>7} {:>7}", "", "task A", "task B", "avg");
    for (name, avg) in &overall {
        println!("{name:<5} {:>7.2} {:>7.2} {avg:>7.2}", per_task[0][name], per_task[1][name]);
    }
    Ok(())
}
