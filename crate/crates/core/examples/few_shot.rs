//! End-to-end few-shot segmentation: self-supervised training on a phantom
//! cohort, then segmentation of every other phantom from the middle slice
//! of one annotated study.
//!
//! cargo run --release --example few_shot -- [arm] [first_seed]

use pmseg::metrics::{aggregate, dice};
use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::{phantom_cohort, pick_support, run_cohort, Arm, PipelineConfig};

fn main() -> pmseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let arm: Arm = args.next().map_or(Ok(Arm::Proposed), |s| s.parse())?;
    let seed = args.next().map_or(100, |s| s.parse().expect("seed must be an integer"));
    let studies = phantom_cohort(&PhantomSpec { seed, ..Default::default() }, 11)?;
    let support = pick_support(&studies).expect("some phantom has a lesion on its middle slice");
    let cfg = PipelineConfig::for_arm(arm);

    let r = run_cohort(&studies, support, &cfg)?;
    println!("arm {arm}, support {}, learned T {:.3}", studies[support].id, r.head.threshold.t);
    println!("loss {:.4} -> {:.4} over {} steps", r.losses[0], r.losses.last().unwrap(), r.losses.len());
    println!("query          dice   mcc    dV_ml  all_brain_dice");
    for m in &r.runs {
        let s = studies.iter().find(|s| s.id == m.run_id).unwrap();
        let constant = dice(&s.brain_mask, s.lesion_mask.as_ref().unwrap())?;
        println!("{}  {:.3}  {:.3}  {:6.2}  {:.3}", m.run_id, m.dice, m.mcc, m.delta_v_ml, constant);
    }
    for g in aggregate(&r.runs)? {
        println!("{}: dice {:.3} +- {:.3} over {}", g.group, g.mean_dice, g.std_dice, g.n);
    }
    Ok(())
}
