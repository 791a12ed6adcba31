//! Trains a per-node guidance table with the adjoint gradient and compares
//! the result with the constant baseline `w = 1/alpha` on fresh noise.

use adaptive_guidance::adjoint::reward_estimate;
use adaptive_guidance::sde::{simulate_batch, BatchSpec};
use adaptive_guidance::train::{train, TrainOptions};
use adaptive_guidance::{GuidanceSchedule, MixtureModel, TimeGrid};

fn main() -> adaptive_guidance::Result<()> {
    let model = MixtureModel::reference_mixture();
    let grid = TimeGrid::uniform(model.horizon(), 64, 0.01)?;
    let alpha = 5.0;
    let classes = model.classes();
    let init = GuidanceSchedule::table(grid.nodes(), 1.0 / alpha)?;
    let opts = TrainOptions {
        iterations: 15,
        ..TrainOptions::default()
    };
    let outcome = train(&model, &init, &classes, &grid, alpha, &opts)?;
    for r in &outcome.history {
        let w_bar = r.mean_w.iter().sum::<f64>() / r.mean_w.len() as f64;
        println!("iter {:>3}: reward {:.5} ± {:.5}, mean w {w_bar:.4}", r.iteration, r.mean_reward, r.stderr);
    }

    let spec = BatchSpec::new(2000, 1_000_003).antithetic(true);
    let baseline = GuidanceSchedule::constant(1.0 / alpha)?;
    for &class in &classes {
        let a = reward_estimate(&simulate_batch(&model, &outcome.schedule, class, &grid, &spec)?, alpha, true);
        let b = reward_estimate(&simulate_batch(&model, &baseline, class, &grid, &spec)?, alpha, true);
        println!("class {class}: trained {:.5} ± {:.5}, baseline {:.5} ± {:.5}", a.mean, a.stderr, b.mean, b.stderr);
    }
    Ok(())
}
