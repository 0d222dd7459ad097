//! Samples self-supervised episodes from one phantom and optionally exports them.
//!
//! cargo run --example episodes -- [count] [out_dir]

use pmseg::episodes::export_episode;
use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::{model_input, phantom_study, prepare_study, sample_episodes, supervoxels, PipelineConfig};

fn main() -> pmseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(8, |s| s.parse().expect("count must be an integer"));
    let cfg = PipelineConfig::default();
    let study = phantom_study(&PhantomSpec { seed: 2, ..Default::default() })?;
    let prep = prepare_study(&study, &cfg)?;
    let labels = supervoxels(&prep, &cfg)?;
    let input = model_input(&prep, &cfg)?;
    let episodes = sample_episodes(&input, &labels, &cfg, &study.id, 0, count)?;

    println!("index  supervoxel  support_z  query_z  transformed  support_px  query_px");
    for ep in &episodes {
        println!(
            "{:5}  {:10}  {:9}  {:7}  {:>11}  {:10}  {:8}",
            ep.index,
            ep.supervoxel_id,
            ep.support_z,
            ep.query_z,
            format!("{:?}", ep.transformed_side).to_lowercase(),
            ep.support_label.count(),
            ep.query_label.count()
        );
    }
    if let Some(dir) = args.next() {
        for ep in &episodes {
            export_episode(ep, &input, &std::path::Path::new(&dir).join(format!("episode_{:05}", ep.index)))?;
        }
        println!("exported {} episodes to {dir}", episodes.len());
    }
    Ok(())
}
