//! Solves the HJB equation for the optimal guidance field on a coarse grid,
//! writes the six panel slices as CSV and summarises how `w*` varies.
//!
//! `cargo run --release --example hjb_figure -- out_dir [h]`

use std::path::PathBuf;

use adaptive_guidance::cli::slice_file_name;
use adaptive_guidance::hjb::{slice_stats, solve_hjb, HjbConfig, FIGURE_TIMES};
use adaptive_guidance::io::create_file;
use adaptive_guidance::MixtureModel;

fn main() -> adaptive_guidance::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "hjb_out".into()));
    let h: f64 = args.next().map(|s| s.parse().expect("h must be a number")).unwrap_or(0.1);
    std::fs::create_dir_all(&out)?;

    let model = MixtureModel::reference_mixture();
    let mut cfg = HjbConfig::new(0, 5.0, 4.0, h);
    cfg.slice_times = FIGURE_TIMES.to_vec();
    let grid = solve_hjb(&model, &cfg)?;
    println!("{} time steps, max Courant {:.3}, mirror asymmetry {:.1e}", grid.steps, grid.max_courant, grid.mirror_asymmetry());
    for s in &grid.slices {
        let stats = slice_stats(&model, &grid, s, 0.01)?;
        println!(
            "t = {:>4.2} (tau = {:>4.2}): mean w* {:.4}, cv {:.3}",
            s.t_back, s.tau, stats.mean, stats.coefficient_of_variation
        );
        grid.write_slice_csv(s, create_file(&out.join(slice_file_name(s.t_back, s.tau)))?)?;
    }
    Ok(())
}
