//! Rho sensitivity sweep; prints the sweep CSV.
//!
//! cargo run --release --example rho_sweep -- [phantoms]

use pmseg::metrics::write_sweep_csv;
use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::{phantom_cohort, pick_support, rho_sweep, PipelineConfig};
use pmseg::proto::TrainConfig;

fn main() -> pmseg::Result<()> {
    let n = std::env::args().nth(1).map_or(8, |s| s.parse().expect("phantom count must be an integer"));
    let studies = phantom_cohort(&PhantomSpec::default(), n)?;
    let support = pick_support(&studies).expect("some phantom has a lesion on its middle slice");
    let base = PipelineConfig::default();
    let cfg = PipelineConfig {
        episodes_per_volume: 4,
        train: TrainConfig { steps: 60, ..base.train },
        ..base
    };
    let rows = rho_sweep(&studies, support, &[3.0, 10.0, 30.0, 100.0, 300.0], &cfg)?;
    write_sweep_csv(&rows, std::io::stdout())
}
