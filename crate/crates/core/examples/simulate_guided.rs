//! Samples the reference mixture with and without guidance and reports how
//! often the terminal state is classified as the requested class.

use adaptive_guidance::schedule::NoGuidance;
use adaptive_guidance::sde::{simulate_batch, BatchSpec};
use adaptive_guidance::{GuidancePolicy, GuidanceSchedule, Method, MixtureModel, TimeGrid, Trajectory};

fn hit_rate(model: &MixtureModel, batch: &[Trajectory], class: u32) -> f64 {
    let tau = model.forward_time(batch[0].grid.nodes()[batch[0].grid.len() - 1]);
    let hits = batch
        .iter()
        .filter(|t| model.log_posterior(tau, t.terminal(), class).unwrap() > (0.5f64).ln())
        .count();
    hits as f64 / batch.len() as f64
}

fn main() -> adaptive_guidance::Result<()> {
    let model = MixtureModel::reference_mixture();
    let grid = TimeGrid::uniform(model.horizon(), 129, 0.01)?;
    let spec = BatchSpec::new(2000, 7).method(Method::Heun);
    let class = 1;
    let policies: Vec<(&str, Box<dyn GuidancePolicy>)> = vec![
        ("w = 0", Box::new(NoGuidance)),
        ("w = 1", Box::new(GuidanceSchedule::constant(1.0)?)),
        ("w = 4", Box::new(GuidanceSchedule::constant(4.0)?)),
    ];
    for (name, policy) in &policies {
        let batch = simulate_batch(&model, policy.as_ref(), class, &grid, &spec)?;
        println!("{name}: p(c | Y_N) > 1/2 for {:.3} of paths", hit_rate(&model, &batch, class));
    }
    Ok(())
}
