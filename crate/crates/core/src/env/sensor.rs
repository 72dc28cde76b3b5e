use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EnvConfig;

/// Adds zero-mean Gaussian noise and clips each component to `±force_clip`.
pub fn sensor_read<R: Rng + ?Sized>(raw: &[f64], cfg: &EnvConfig, rng: &mut R) -> Vec<f64> {
    raw.iter()
        .map(|&f| {
            let noisy = if cfg.noise_sigma > 0.0 {
                f + Normal::new(0.0, cfg.noise_sigma)
                    .expect("noise_sigma validated non-negative")
                    .sample(rng)
            } else {
                f
            };
            noisy.clamp(-cfg.force_clip, cfg.force_clip)
        })
        .collect()
}

/// Force/torque sensor with its own RNG stream and an optional delay line.
#[derive(Debug, Clone)]
pub struct Sensor {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    delay: VecDeque<Vec<f64>>,
}

impl Sensor {
    pub fn new(cfg: &EnvConfig, seed: u64) -> Self {
        Self {
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            delay: VecDeque::with_capacity(cfg.latency_steps + 1),
        }
    }

    /// Measurement available to the controller this step. With latency `L`
    /// this is the reading taken `L` steps ago (zeros until then).
    pub fn read(&mut self, raw: &[f64]) -> Vec<f64> {
        let m = sensor_read(raw, &self.cfg, &mut self.rng);
        if self.cfg.latency_steps == 0 {
            return m;
        }
        self.delay.push_back(m);
        if self.delay.len() > self.cfg.latency_steps {
            self.delay.pop_front().expect("delay line nonempty")
        } else {
            vec![0.0; raw.len()]
        }
    }
}
