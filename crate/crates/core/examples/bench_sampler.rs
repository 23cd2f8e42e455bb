// Throwaway throughput probe for sizing the case-study diffusion config.
use driftplan::diffusion::*;
use driftplan::seed;

fn main() {
    for (t_diff, hidden) in [(36usize, vec![32usize, 32]), (48, vec![32, 32]), (36, vec![48, 48]), (24, vec![32, 32])] {
        let mut data = Vec::new();
        let mut rng = seed::rng(1);
        use rand::Rng;
        for i in 0..5000 {
            let eta = rng.gen_range(0.01..0.03);
            data.push((ContextVector::new(eta, i % 79 + 1, i % 10 + 1, i % 2 + 1), rng.gen_range(0.0..0.2)));
        }
        let cfg = DiffusionConfig {
            t_diff, beta_start: 3e-4, beta_end: 0.055,
            encoder_hidden: vec![48, 48], noise_hidden: hidden.clone(),
            encoder_epochs: 10, noise_epochs: 5, batch: 256,
            ..DiffusionConfig::default()
        };
        let model = DiffusionModel::train(&data, &cfg, 2).unwrap();
        // grid: T=80, H=10, N=2 -> 1490 cells
        let mut cells = Vec::new();
        for t in 1..80usize {
            for h in 1..=10usize {
                if t + h > 80 { break; }
                for i in 1..=2usize { cells.push(ContextVector::new(0.02, t, h, i)); }
            }
        }
        assert_eq!(cells.len(), 1490);
        let grid = model.prepare_grid(&cells);
        let streams: Vec<u64> = (0..500u64).map(|k| seed::derive_index(7, k)).collect();
        let t0 = std::time::Instant::now();
        let out = grid.sample_rows(&streams).unwrap();
        let par = t0.elapsed().as_secs_f64();
        let t0 = std::time::Instant::now();
        let out2 = grid.sample_rows_seq(&streams).unwrap();
        let seq = t0.elapsed().as_secs_f64();
        assert_eq!(out, out2);
        println!("t_diff={t_diff} hidden={hidden:?}: par {par:.2}s seq {seq:.2}s ({:.1}M row-steps/s par)", (out.len() * t_diff) as f64 / par / 1e6);
    }
}
