//! Generates one synthetic CTP study and prints what it contains.
//!
//! cargo run --example synth_phantom -- [seed] [out_dir]

use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::{phantom_study, save_study};
use pmseg::volgrid::mask_volume_ml;

fn main() -> pmseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let spec = PhantomSpec { seed, ..Default::default() };
    let study = phantom_study(&spec)?;
    let d = study.ctp.dims();
    let lesion = study.lesion_mask.as_ref().expect("phantoms have lesions");

    println!("{}: {}x{}x{} voxels, {} frames every {} s", study.id, d.width, d.height, d.depth, study.ctp.channels(), study.ctp.frame_interval_s());
    println!("brain {:.1} ml, lesion {:.1} ml", mask_volume_ml(&study.brain_mask, spec.spacing()), mask_volume_ml(lesion, spec.spacing()));

    // mean attenuation curve inside and outside the lesion
    println!("frame  healthy  lesion");
    for t in 0..study.ctp.channels() {
        let ch = study.ctp.channel(t);
        let (mut h, mut hn, mut l, mut ln) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..d.len() {
            if lesion.bits()[i] {
                l += ch[i] as f64;
                ln += 1.0;
            } else if study.brain_mask.bits()[i] {
                h += ch[i] as f64;
                hn += 1.0;
            }
        }
        println!("{t:5}  {:7.1}  {:6.1}", h / hn, l / ln);
    }

    if let Some(dir) = args.next() {
        save_study(&study, dir.as_ref())?;
        println!("saved to {dir}");
    }
    Ok(())
}
