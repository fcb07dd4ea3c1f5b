use deepgin::critic::{DiscConfig, MultiScaleDisc};
use deepgin::nn::blocks::power_iterate;
use nalgebra_probe::top_sv;

mod nalgebra_probe {
    pub fn top_sv(data: &[f64], rows: usize, cols: usize) -> f64 {
        // power method with many iterations + random restarts as a cheap oracle
        let mut best = 0.0f64;
        for seed in 0..4u64 {
            let mut rng = deepgin::rng::Rng::new(100 + seed);
            let mut u: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
            for _ in 0..500 {
                let mut v = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        v[c] += u[r] * data[r * cols + c];
                    }
                }
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                for x in &mut v { *x /= nv; }
                let mut nu = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        nu[r] += data[r * cols + c] * v[c];
                    }
                }
                let nn = nu.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                for x in &mut nu { *x /= nn; }
                u = nu;
                best = best.max(nn);
            }
        }
        best
    }
}

fn main() {
    let disc = MultiScaleDisc::new(DiscConfig::default());
    let params = disc.init_params(11, 0.1);
    let state = disc.init_spectral_state(11);
    for (w_id, slot) in disc.sn_layers() {
        let w = params.get(w_id);
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        let truth = top_sv(w.data(), rows, cols);
        print!("layer {:?} [{rows}x{cols}] true {truth:.5} | est/true:", w_id);
        let mut u = state[slot].clone();
        for it in 1..=25 {
            let (_, sigma) = power_iterate(w, &mut u);
            if it % 5 == 0 || it <= 5 {
                print!(" it{it}={:.4}", sigma / truth);
            }
        }
        println!();
    }
}
