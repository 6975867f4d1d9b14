// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimum-norm correction for one barrier, checked against the QP oracle.

use barrier_steer::barrier::BarrierGradient;
use barrier_steer::steering::{apply_steering, lift, qp_oracle, solve_correction};

fn main() -> barrier_steer::Result<()> {
    let g = BarrierGradient::new(vec![0.6, -0.8, 0.0, 1.2]);
    let x = vec![0.5, 1.0, -2.0, 0.1];
    let h: f64 = g.g.iter().zip(&x).map(|(a, b)| a * b).sum();
    for tau in [h - 1.0, h + 0.5, h + 2.0] {
        let c = solve_correction(h, &g, tau, 0.0);
        let oracle = qp_oracle(h, &g.g, tau)?;
        let gap = c.theta.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let y = apply_steering(&x, &c, 1.0)?;
        let h_new: f64 = g.g.iter().zip(&y).map(|(a, b)| a * b).sum();
        println!(
            "h {h:+.3} tau {tau:+.3} fired {:5} lambda {:.4} |theta| {:.4} lift {:.4} new h {h_new:+.3} oracle gap {gap:.1e}",
            c.fired,
            c.lambda,
            c.norm(),
            lift(&g, &c)?
        );
    }
    Ok(())
}
