//! Runs the real-vs-synthetic study over a few seeds and prints one table
//! row per model.
//!
//! ```text
//! cargo run --release -p fairkd --example gap_study -- 5
//! ```

use fairkd::evaluation::{render_table, TableFormat};
use fairkd::experiment::{run_gap_study, GapStudyConfig};
use fairkd::parallel::Execution;

fn main() -> anyhow::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(3);
    let cfg = GapStudyConfig::default();
    let seeds: Vec<u64> = (0..n).collect();
    let start = std::time::Instant::now();
    let outcomes = run_gap_study(&cfg, &seeds, Execution::Parallel)?;
    for o in &outcomes {
        println!("seed {}", o.seed);
        let reports = [
            &o.teacher,
            &o.scratch_real,
            &o.scratch_synthetic,
            &o.kd_synthetic,
        ]
        .map(|r| r.clone());
        print!("{}", render_table(&reports, TableFormat::Markdown)?);
    }
    let kd = outcomes.iter().filter(|o| o.kd_beats_scratch()).count();
    let gap = outcomes.iter().filter(|o| o.synthetic_gap()).count();
    println!(
        "kd beats scratch: {kd}/{n}; synthetic gap: {gap}/{n}; {:.1?}",
        start.elapsed()
    );
    Ok(())
}
