// Decompose sampler cost: RNG vs network evaluation.
use driftplan::seed;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() {
    // RNG part: 745k streams, 36 normals each.
    let t0 = std::time::Instant::now();
    let mut acc = 0.0f32;
    for r in 0..745_000u64 {
        let mut rng = seed::rng(seed::derive_index(9, r));
        for _ in 0..36 {
            acc += rng.sample::<f32, _>(StandardNormal);
        }
    }
    println!("rng 26.8M normals + 745k inits: {:.2}s (acc {acc})", t0.elapsed().as_secs_f64());

    // Pure kernel: emulate 26.8M row-steps of [32,32] net.
    let n0 = 32usize;
    let wt: Vec<f32> = (0..n0 * n0).map(|i| (i as f32 * 0.001).sin() * 0.1).collect();
    let w_out: Vec<f32> = (0..n0).map(|i| (i as f32 * 0.01).cos() * 0.1).collect();
    let ws: Vec<f32> = (0..n0).map(|i| 0.05 + i as f32 * 1e-3).collect();
    let proj: Vec<f32> = (0..n0).map(|i| 0.01 * i as f32).collect();
    let mut a = vec![0.0f32; n0];
    let mut b = vec![0.0f32; n0];
    let mut state = vec![0.1f32; 4096];
    let t0 = std::time::Instant::now();
    let iters = 26_800_000usize / 4096;
    for _ in 0..iters {
        for s in state.iter_mut() {
            let x = *s + 0.3;
            for o in 0..n0 { a[o] = ws[o].mul_add(x, proj[o]).max(0.0); }
            b.copy_from_slice(&proj);
            for k in 0..n0 {
                let ak = a[k];
                let col = &wt[k * n0..(k + 1) * n0];
                for (bo, wv) in b.iter_mut().zip(col.iter()) { *bo = wv.mul_add(ak, *bo); }
            }
            for v in b.iter_mut() { *v = v.max(0.0); }
            let mut accs = [0.0f32; 16];
            for i in 0..2 { for l in 0..16 { accs[l] = w_out[i*16+l].mul_add(b[i*16+l], accs[l]); } }
            let eps: f32 = accs.iter().sum();
            *s = (*s - 0.02 * eps) * 1.0001;
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("kernel {:.0}M row-steps single-core: {:.2}s ({:.1}M/s, state[0]={})", (iters*4096) as f64/1e6, dt, (iters*4096) as f64/dt/1e6, state[0]);
}
