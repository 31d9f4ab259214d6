//! Runs the synthetic benchmark and prints the headline numbers.
//!
//! `cargo run --release --example synthetic_benchmark [config.json]`

use lowshot_core::benchmark::{run_benchmark, BenchmarkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let cfg: BenchmarkConfig = match std::env::args().nth(1) {
        Some(p) if p == "--print-default" => {
            println!("{}", serde_json::to_string_pretty(&BenchmarkConfig::default())?);
            return Ok(());
        }
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => BenchmarkConfig::default(),
    };
    let r = run_benchmark(&cfg)?;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
    println!("baseline  base {} novel {}", pct(r.baseline.base_ap(0.5)), pct(r.baseline.novel_ap(0.5)));
    for s in &r.shots {
        println!(
            "k={} imprint base {} novel {} | refined base {} novel {}",
            s.k,
            pct(s.imprint_only.base_ap(0.5)),
            pct(s.imprint_only.novel_ap(0.5)),
            pct(s.refined.base_ap(0.5)),
            pct(s.refined.novel_ap(0.5))
        );
    }
    let curve: Vec<String> = r.baseline.oracle_curve.iter().map(|p| pct(p.ap_novel)).collect();
    println!("oracle novel curve {}", curve.join(" "));
    println!("wall {:.1}s", r.wall_time_secs);
    Ok(())
}
