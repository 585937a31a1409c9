//! Runs the finite-difference gradient suite over every registered
//! operation and loss, then shows the detector catching a wrong gradient.

use aftk::cli::cmd_gradcheck;
use aftk::gradsuite::{broken_case, registry};

fn main() -> aftk::Result<()> {
    let points = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let t0 = std::time::Instant::now();
    let (code, reports) = cmd_gradcheck(&registry(), points, 0, None)?;
    println!("{} cases x {points} points in {:.1}s, exit {code}", reports.len(), t0.elapsed().as_secs_f64());
    let (code, _) = cmd_gradcheck(&[broken_case()], 3, 0, None)?;
    println!("deliberately wrong backward: exit {code}");
    Ok(())
}
