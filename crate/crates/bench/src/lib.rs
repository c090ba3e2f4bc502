//! Shared fixtures for the criterion benchmarks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slac_core::latent_model::{FilterNoise, ModelConfig, ModelNets};
use slac_core::replay::{ReplayBuffer, WindowBatch};

pub fn bench_model(seed: u64) -> (ModelNets, WindowBatch, FilterNoise) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::desk_default(3, 1);
    let nets = ModelNets::new(&mut rng, cfg.clone());
    let mut buf = ReplayBuffer::new(10_000, 3, 1);
    buf.begin_episode(vec![0.1, 0.2, 0.3]);
    for t in 0..64 {
        buf.append_step(
            vec![0.5],
            -1.0,
            vec![(t as f64).sin(), (t as f64).cos(), 0.1],
            t == 63,
            false,
        )
        .unwrap();
    }
    let windows = buf.sample_windows(32, 8, &mut rng).unwrap();
    let batch = WindowBatch::from_windows(&windows);
    let noise = FilterNoise::sample(&mut rng, 9, 32, &cfg);
    (nets, batch, noise)
}
