//! The prototype head on a single episode: prototype, anomaly scores,
//! soft mask and loss, then a short threshold-only training run.

use pmseg::perfusion::PhantomSpec;
use pmseg::pipeline::{model_input, phantom_study, prepare_study, sample_episodes, supervoxels, PipelineConfig};
use pmseg::proto::{
    anomaly_scores, encode, episode_loss, hard_mask, loss_gradients, map_prototype, soft_mask, train, EncoderConfig,
    PreparedEpisode, ThresholdParams, TrainConfig,
};

fn main() -> pmseg::Result<()> {
    let cfg = PipelineConfig::default();
    let study = phantom_study(&PhantomSpec { seed: 3, ..Default::default() })?;
    let prep = prepare_study(&study, &cfg)?;
    let input = model_input(&prep, &cfg)?;
    let labels = supervoxels(&prep, &cfg)?;
    let episodes = sample_episodes(&input, &labels, &cfg, &study.id, 0, 16)?;

    let enc = EncoderConfig::default();
    let tp = ThresholdParams { t: -0.4, kappa: 10.0 };
    let ep = &episodes[0];
    let proto = map_prototype(&encode(&ep.support, &enc)?, &ep.support_label)?;
    let scores = anomaly_scores(&encode(&ep.query, &enc)?, &proto)?;
    let soft = soft_mask(&scores, &tp)?;
    let hard = hard_mask(&scores, &tp);
    println!("feature dim {}, prototype norm {:.3}", proto.0.len(), proto.norm());
    println!(
        "query: {} labelled px, {} predicted px, loss {:.4}",
        ep.query_label.count(),
        hard.count(),
        episode_loss(&soft, &ep.query_label)?
    );

    let prepared: Vec<PreparedEpisode> = episodes.iter().map(|e| PreparedEpisode::new(e, &enc)).collect::<pmseg::Result<_>>()?;
    // a sharp sigmoid needs a small step
    let tc = TrainConfig {
        steps: 50,
        step_size: 0.02,
        batch_size: 4,
        train_projection: false,
        ..Default::default()
    };
    let r = train(&prepared, &enc, &tp, &tc)?;
    let mean_loss = |enc: &EncoderConfig, tp: &ThresholdParams| -> pmseg::Result<f64> {
        let mut sum = 0.0;
        for p in &prepared {
            sum += loss_gradients(p, enc, tp)?.0;
        }
        Ok(sum / prepared.len() as f64)
    };
    println!(
        "threshold {:.3} -> {:.3}, mean episode loss {:.4} -> {:.4}",
        tp.t,
        r.threshold.t,
        mean_loss(&enc, &tp)?,
        mean_loss(&r.encoder, &r.threshold)?
    );
    Ok(())
}
