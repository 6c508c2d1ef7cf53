//! Runs the pre-train then fine-tune comparison on one seed and prints each
//! epoch record. An optional second argument is a JSON config file; without
//! it the built-in demo config is printed and used.

use std::time::Instant;

use stslab::harness::{pipeline_pretrain_finetune, PipelineConfig};

fn main() -> stslab::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let mut cfg = PipelineConfig::demo();
    if let Some(path) = args.next() {
        let text = std::fs::read_to_string(path)?;
        cfg = serde_json::from_str(&text)?;
    } else {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
    }
    let start = Instant::now();
    let report = pipeline_pretrain_finetune::<f32>(&cfg, seed, |stage, r| {
        eprintln!("{:>7.1}s {stage:?} {} {} loss {:.4} acc {:.3}", start.elapsed().as_secs_f64(), r.epoch, r.split, r.loss, r.accuracy);
    })?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    println!("ratio {:?} in {:.1}s", report.epoch_ratio(), start.elapsed().as_secs_f64());
    Ok(())
}
