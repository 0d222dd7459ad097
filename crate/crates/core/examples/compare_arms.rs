//! Pseudolabel quality of the three configurations on the same phantoms:
//! where the supervoxels come from decides how well a union of them can
//! cover the lesion.

use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::{phantom_cohort, prepare_study, supervoxels, Arm, PipelineConfig};
use pmseg::supervox::achievable_dice;

fn main() -> pmseg::Result<()> {
    let studies = phantom_cohort(&PhantomSpec { seed: 40, ..Default::default() }, 8)?;
    println!("{:<14} {:>8} {:>8} {:>8}", "study", Arm::ALL[0], Arm::ALL[1], Arm::ALL[2]);
    for s in &studies {
        let mut row = format!("{:<14}", s.id);
        for arm in Arm::ALL {
            let cfg = PipelineConfig::for_arm(arm).effective()?;
            let prep = prepare_study(s, &cfg)?;
            let labels = supervoxels(&prep, &cfg)?;
            let ad = achievable_dice(&labels, prep.lesion_mask.as_ref().unwrap())?;
            row.push_str(&format!(" {:>5.3}/{:<3}", ad.dice, labels.num_labels()));
        }
        println!("{row}");
    }
    println!("cells: achievable dice / supervoxel count at the default rho");
    Ok(())
}
