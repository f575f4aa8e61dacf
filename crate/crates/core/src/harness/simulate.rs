//! Global-threshold dynamics over a stream of per-batch maximum scores.

use crate::error::Result;
use crate::membank::global_threshold;

/// Threshold trajectory `[tau0, tau1, ...]`, one step per stream element.
pub fn simulate_threshold(max_score_stream: &[Vec<f64>], lambda: f64, tau0: f64) -> Result<Vec<f64>> {
    let mut traj = Vec::with_capacity(max_score_stream.len() + 1);
    traj.push(tau0);
    let mut tau = tau0;
    for maxima in max_score_stream {
        tau = global_threshold(tau, maxima, lambda)?;
        traj.push(tau);
    }
    Ok(traj)
}
