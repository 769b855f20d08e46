//! Joint vs detection-only training on synthetic worlds; prints unseen mAP.
//!
//! Usage: cargo run --release --example zero_shot_gain -- [n_seeds] [first_seed]

use zsd_align_core::experiment::{run_gain, GainProtocol};

fn main() -> zsd_align_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let first: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let protocol = GainProtocol::default();
    let mut gains = Vec::new();
    for seed in first..first + n {
        let o = run_gain(&protocol, seed)?;
        println!(
            "seed {seed}: pretrain {:.3} | joint {:.3} (seen {:.3}) | detection-only {:.3} (seen {:.3}) | steps {}/{}",
            o.pretrain_map_unseen,
            o.joint_map_unseen,
            o.joint_map_seen,
            o.control_map_unseen,
            o.control_map_seen,
            o.joint_steps,
            o.control_steps
        );
        gains.push(o.gain());
    }
    println!(
        "mean gain {:.4}",
        gains.iter().sum::<f64>() / gains.len() as f64
    );
    Ok(())
}
