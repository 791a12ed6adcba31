//! Runs the martingale, Doob, Itô, gain, KL and coverage checks on a guided
//! batch and prints one line per check.

use adaptive_guidance::guarantees::{all_asserted_pass, run_suite, SuiteConfig};
use adaptive_guidance::MixtureModel;

fn main() -> adaptive_guidance::Result<()> {
    let model = MixtureModel::reference_mixture();
    let cfg = SuiteConfig {
        n_paths: 4000,
        ..SuiteConfig::default()
    };
    let checks = run_suite(&model, &cfg)?;
    for c in &checks {
        let tag = if !c.asserted { "info" } else if c.pass { "pass" } else { "FAIL" };
        println!("{tag:>4}  {:<40} {:>12.5} vs {:>10.5} (stderr {:.2e})", c.name, c.statistic, c.bound, c.stderr);
    }
    println!("all asserted checks pass: {}", all_asserted_pass(&checks));
    Ok(())
}
