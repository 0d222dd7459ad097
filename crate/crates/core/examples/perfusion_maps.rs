//! Perfusion maps of a phantom, compared between lesion and healthy tissue.

use pmseg::perfusion::{compute_pms, PhantomSpec, PM_NAMES};
use pmseg::pipeline::phantom_study;
use pmseg::preproc::gaussian_smooth;

fn main() -> pmseg::Result<()> {
    let study = phantom_study(&PhantomSpec { seed: 7, ..Default::default() })?;
    let ctp = gaussian_smooth(&study.ctp, 1.0, 0.0)?;
    let pms = compute_pms(&ctp, &study.brain_mask)?;
    let lesion = study.lesion_mask.as_ref().unwrap();

    println!("{:>5}  {:>9}  {:>9}", "map", "healthy", "lesion");
    for (m, name) in PM_NAMES.iter().enumerate() {
        let (mut h, mut hn, mut l, mut ln) = (0.0, 0.0, 0.0, 0.0);
        for (i, &x) in pms.channel(m).iter().enumerate() {
            if lesion.bits()[i] {
                l += x as f64;
                ln += 1.0;
            } else if study.brain_mask.bits()[i] {
                h += x as f64;
                hn += 1.0;
            }
        }
        println!("{name:>5}  {:9.3}  {:9.3}", h / hn, l / ln);
    }
    Ok(())
}
