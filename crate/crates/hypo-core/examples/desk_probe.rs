use hypo_core::gradcheck::{acceptance_grid, run_check};
use hypo_core::theory::etf_optimize;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let t = Instant::now();
    for (c, d) in [(2usize, 2usize), (3, 3), (3, 8), (4, 3), (8, 16)] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = etf_optimize(c, d, 1.0, 5000, 0.5, &mut rng);
        println!("etf ({c},{d}): deviation {:.3e}", out.max_deviation);
    }
    println!("etf total {:?}", t.elapsed());
    let t = Instant::now();
    let grid = acceptance_grid(1);
    let mut worst = 0.0f64;
    for spec in &grid {
        let r = run_check(spec);
        worst = worst.max(r.max_rel_err);
    }
    println!("gradcheck {} instances: worst {:.3e} in {:?}", grid.len(), worst, t.elapsed());
}
