// scratch: squared-hinge penalty, Adam vs plain GD vs Polyak step
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swingctl::grid::{build_modes, GridSpec};
use swingctl::linalg::{self, SymMatrix};
use swingctl::lyapunov::xy_margins;
use swingctl::opt::Adam;
use std::time::Instant;

fn main() {
    let modes = build_modes(&GridSpec::bundled_default(), &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 5.0, 9.0], 1e-3, true).unwrap();
    let pairs = modes.continuous_pairs();
    let n = 24usize;
    let margin_target = 1e-3; let x_floor = 1e-4;
    let t_rel = 1e-3f64;
    let sigma_y = pairs.iter().map(|p| p.a.norm()/p.b.norm()).fold(0.0f64, f64::max);
    for method in ["polyak", "adam", "gd"] {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = DMatrix::<f64>::identity(n, n);
        let mut y_hat = DMatrix::<f64>::from_fn(12, n, |_,_| rng.random_range(-1e-3..1e-3));
        let mut adam = Adam::for_params(&[&g, &y_hat]);
        let x_from = |g: &DMatrix<f64>| SymMatrix::from_matrix(&(g*g.transpose() + DMatrix::identity(n,n)*x_floor));
        let mut done = false;
        for step in 0..60_000u32 {
            let x = x_from(&g);
            let y = &y_hat * sigma_y;
            if step % 10 == 0 {
                let margins = xy_margins(&pairs, &x, &y).unwrap();
                let worst = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if worst < 0.0 {
                    println!("{method}: FEASIBLE at step {step} ({:.1?}), worst={worst:.3e}", t0.elapsed());
                    done = true;
                    break;
                }
                if step % 5000 == 0 {
                    let s = x.as_matrix().norm() / (n as f64).sqrt();
                    println!("{method} step {step:>6}: worst {worst:.4e} s={s:.3e}");
                }
            }
            let s = x.as_matrix().norm() / (n as f64).sqrt();
            if s > 100.0 || s < 0.01 {
                let c = (1.0 / s).sqrt();
                g *= c; y_hat *= c * c;
                adam = Adam::for_params(&[&g, &y_hat]);
                continue;
            }
            let mut x_bar = DMatrix::<f64>::zeros(n, n);
            let mut y_bar = DMatrix::<f64>::zeros(12, n);
            let mut pen = 0.0;
            for sp in &pairs {
                let m = &sp.a * x.as_matrix() + x.as_matrix() * sp.a.transpose() + &sp.b * &y + y.transpose() * sp.b.transpose();
                let (vals, vecs) = linalg::sym_eig(&SymMatrix::from_matrix(&m)).unwrap();
                let mut w_mat = DMatrix::<f64>::zeros(n, n);
                let mut any = false;
                for i in 0..vals.len() {
                    let viol = vals[i]/s + t_rel;
                    if viol <= 0.0 { continue; }
                    pen += viol * viol;
                    any = true;
                    let v: DVector<f64> = vecs.column(i).into_owned();
                    w_mat.syger(2.0*viol, &v, &v, 1.0);
                }
                if !any { continue; }
                let w_sym = SymMatrix::from_matrix(&w_mat).into_matrix();
                x_bar += sp.a.transpose() * &w_sym + &w_sym * &sp.a;
                y_bar += 2.0 * sigma_y * sp.b.transpose() * &w_sym;
            }
            let mut g_bar = 2.0 * &x_bar * &g;
            for i in 0..n { for j in i+1..n { g_bar[(i,j)] = 0.0; } }
            match method {
                "adam" => {
                    let lr = 1e-2 * 0.5f64.powf(step as f64 / 20_000.0);
                    adam.step(lr, &mut [&mut g, &mut y_hat], &[&g_bar, &y_bar]);
                }
                "gd" => {
                    let lr = 1e-2 * 0.5f64.powf(step as f64 / 20_000.0);
                    g -= &g_bar * lr;
                    y_hat -= &y_bar * lr;
                }
                _ => {
                    let denom = g_bar.norm_squared() + y_bar.norm_squared();
                    if denom > 0.0 {
                        let alpha = pen / denom;
                        g -= &g_bar * alpha;
                        y_hat -= &y_bar * alpha;
                    }
                }
            }
        }
        if !done { println!("{method}: exhausted budget after {:.1?}", t0.elapsed()); }
    }
}
