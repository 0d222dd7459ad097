//! Runs the intensity preprocessing steps on a phantom and reports channel ranges.

use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::phantom_study;
use pmseg::preproc::{gamma_correct, gaussian_smooth, hist_equalize, hu_rescale, zscore_channels, DEFAULT_BINS, DEFAULT_GAMMA};
use pmseg::volgrid::{BinaryMask, Volume4D};

fn range(v: &Volume4D, mask: &BinaryMask) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for m in 0..v.channels() {
        for (x, _) in v.channel(m).iter().zip(mask.bits()).filter(|(_, &b)| b) {
            lo = lo.min(*x);
            hi = hi.max(*x);
        }
    }
    (lo, hi)
}

fn main() -> pmseg::Result<()> {
    let study = phantom_study(&PhantomSpec::default())?;
    let mask = &study.brain_mask;
    let report = |name: &str, v: &Volume4D| {
        let (lo, hi) = range(v, mask);
        println!("{name:>10}: [{lo:9.3}, {hi:9.3}]");
    };

    report("input", &study.ctp);
    let v = hu_rescale(&study.ctp, 1.0, -1024.0)?;
    report("hu", &v);
    let v = gaussian_smooth(&v, 1.0, 0.0)?;
    report("smoothed", &v);
    let v = hist_equalize(&v, mask, DEFAULT_BINS)?;
    report("equalized", &v);
    let v = gamma_correct(&v, DEFAULT_GAMMA, 0.0, 1.0)?;
    report("gamma", &v);
    let v = zscore_channels(&v, mask)?;
    report("z-scored", &v);
    Ok(())
}
