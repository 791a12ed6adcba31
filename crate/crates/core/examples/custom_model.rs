//! Loads a mixture from JSON, prints class priors and the guiding field along
//! a line, and shows the point-mass support check.

use adaptive_guidance::guarantees::{support_check, support_threshold};
use adaptive_guidance::sde::{simulate_batch, BatchSpec};
use adaptive_guidance::{GuidanceSchedule, MixtureModel, TimeGrid};

const MODEL: &str = r#"{
  "dim": 2,
  "T": 5.0,
  "components": [
    {"weight": 0.5, "mean": [1.0, 0.0], "variance": 0.0, "class": 0},
    {"weight": 0.5, "mean": [-1.0, 0.0], "variance": 0.0, "class": 1}
  ]
}"#;

fn main() -> adaptive_guidance::Result<()> {
    let model = MixtureModel::from_json_str(MODEL)?;
    for c in model.classes() {
        println!("class {c}: prior {}", model.class_prior(c)?);
    }
    for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        println!("G at t = 4, x1 = {x:>4}: {:.4}", model.guiding_field(4.0, &[x, 0.0], 0)?);
    }
    let cutoff = 0.01;
    let grid = TimeGrid::uniform(model.horizon(), 257, cutoff)?;
    let batch = simulate_batch(&model, &GuidanceSchedule::constant(1.0)?, 0, &grid, &BatchSpec::new(2000, 3))?;
    let report = support_check(&model, &batch, support_threshold(cutoff))?;
    println!("terminal states near the class-0 atom: {:.4}", report.pass_fraction.mean);
    Ok(())
}
