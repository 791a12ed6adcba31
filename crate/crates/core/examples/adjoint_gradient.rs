//! Compares the adjoint gradient of the path reward with central finite
//! differences on frozen noise, node by node.

use adaptive_guidance::adjoint::{adjoint_backward, param_gradient, path_reward, AdjointOptions};
use adaptive_guidance::sde::simulate;
use adaptive_guidance::{GuidanceSchedule, Method, MixtureModel, PathNoise, TimeGrid};

fn main() -> adaptive_guidance::Result<()> {
    let model = MixtureModel::reference_mixture();
    let grid = TimeGrid::uniform(model.horizon(), 16, 0.01)?;
    let alpha = 5.0;
    let class = 2;
    let noise = PathNoise::for_path(11, 0, false, &grid, model.dim());
    let schedule = GuidanceSchedule::table(grid.nodes(), 0.3)?;

    for method in [Method::Euler, Method::Heun] {
        let traj = simulate(&model, &schedule, class, &grid, &noise, method)?;
        let rec = adjoint_backward(&model, &traj, alpha, &AdjointOptions::default())?;
        let grad = param_gradient(&schedule, &traj, &rec)?;
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (j, g) in grad.iter().enumerate() {
            let reward_at = |delta: f64| -> adaptive_guidance::Result<f64> {
                let mut s = schedule.clone();
                s.raw_params[j] += delta;
                Ok(path_reward(&simulate(&model, &s, class, &grid, &noise, method)?, alpha))
            };
            let fd = (reward_at(eps)? - reward_at(-eps)?) / (2.0 * eps);
            worst = worst.max((fd - g).abs() / fd.abs().max(1e-8));
        }
        println!("{method:?}: {} parameters, max relative error {worst:.2e}", grad.len());
    }
    Ok(())
}
