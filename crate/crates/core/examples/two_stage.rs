//! Runs the desk-scale two-stage experiment and prints held-out EERs.

use kws_core::experiment::{run_two_stage, TwoStageConfig};

fn main() -> kws_core::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2, 3, 4] } else { seeds };
    let cfg = TwoStageConfig::default();
    for seed in seeds {
        let t = std::time::Instant::now();
        let r = run_two_stage(&cfg, seed)?;
        println!(
            "seed {seed}: untrained {:.4}  finetune-only {:.4}  pretrain+finetune {:.4}  ({:.1}s)",
            r.untrained.eer,
            r.finetune_only.eer,
            r.pretrain_finetune.eer,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
