use splinetrace::bspline::*;
use splinetrace::synthdata::*;

fn main() {
    let map = gen_vessel_map(0);
    let truth = gen_guidewire(&map, 0.8, Some(BranchId::Lcca), TipType::Angled, 24, 0).unwrap();
    println!("n_ctrl {}  arc {:.4}", truth.control_points.len(), truth.arc_length(1e-5));
    for density in [256usize, 512, 1024, 2048, 4096] {
        let poly = truth.to_polyline(density).unwrap();
        let refit = fit_spline(&poly, 3, truth.control_points.len()).unwrap();
        let mut worst = 0.0f64;
        let mut worst_t = 0.0;
        for k in 0..=600 {
            let t = k as f64 / 600.0;
            let d = truth.eval(t).unwrap().dist(refit.curve.eval(t).unwrap());
            if d > worst { worst = d; worst_t = t; }
        }
        let kd: f64 = truth.knots.values().iter().zip(refit.curve.knots.values())
            .map(|(a,b)| (a-b).abs()).fold(0.0, f64::max);
        println!("density {density}: refit rms {:.2e} dev {:.3e} at t={worst_t:.3} knotdiff {:.2e}", refit.rms_residual, worst, kd);
    }
    // curvature profile of truth near the ends
    for k in [0, 5, 10, 20, 50, 300, 550, 580, 590, 595] {
        let t = k as f64 / 600.0;
        let h = 1e-4;
        let a = truth.eval((t-h).max(0.0)).unwrap();
        let b = truth.eval(t).unwrap();
        let c = truth.eval((t+h).min(1.0)).unwrap();
        let d1 = c.sub(a).scale(1.0/(2.0*h));
        let d2 = c.add(a).sub(b.scale(2.0)).scale(1.0/(h*h));
        let speed = d1.norm();
        let kappa = (d1.x*d2.y - d1.y*d2.x).abs() / speed.powi(3).max(1e-12);
        println!("t={t:.3} speed {speed:.3} kappa {kappa:.1}");
    }
}
