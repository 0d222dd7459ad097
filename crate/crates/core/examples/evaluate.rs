//! Scoring predictions: per-run metrics and group summaries as CSV.

use pmseg::metrics::{aggregate, write_runs_csv, write_summary_csv, RunMetrics};
use pmseg::volgrid::{BinaryMask, Dims3, Spacing};

fn square(d: Dims3, x0: usize, y0: usize, side: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(d);
    for z in 0..d.depth {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, z, true);
            }
        }
    }
    m
}

fn main() -> pmseg::Result<()> {
    let d = Dims3::new(32, 32, 4);
    let sp = Spacing::new(1.0, 1.0, 5.0);
    let gt = square(d, 8, 8, 10);
    let cases = [
        ("exact", "lvo", square(d, 8, 8, 10)),
        ("shifted", "lvo", square(d, 11, 9, 10)),
        ("too_big", "nlvo", square(d, 6, 6, 14)),
        ("missed", "nlvo", BinaryMask::empty(d)),
    ];
    let runs: Vec<RunMetrics> = cases
        .iter()
        .map(|(id, group, pred)| RunMetrics::evaluate(*id, *group, pred, &gt, sp))
        .collect::<pmseg::Result<_>>()?;
    write_runs_csv(&runs, std::io::stdout())?;
    println!();
    write_summary_csv(&aggregate(&runs)?, std::io::stdout())
}
