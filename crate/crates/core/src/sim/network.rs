//! Link model: base latency plus seeded uniform jitter, and per-message
//! drops for the message kinds that may be lost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::NetworkConfig;
use crate::ledger::SimTime;

#[derive(Debug, Clone)]
pub struct NetworkModel {
    base: SimTime,
    jitter: SimTime,
    drop_prob: f64,
    rng: ChaCha8Rng,
}

impl NetworkModel {
    pub fn new(config: &NetworkConfig, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&config.drop_prob), "drop_prob must lie in [0, 1)");
        NetworkModel {
            base: SimTime::from_ms(config.latency_ms),
            jitter: SimTime::from_ms(config.jitter_ms),
            drop_prob: config.drop_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `base ± jitter`, never negative.
    pub fn delay(&mut self) -> SimTime {
        if self.jitter.0 == 0 {
            return self.base;
        }
        let j = self.jitter.0 as i128;
        let offset = self.rng.random_range(-j..=j);
        SimTime((self.base.0 as i128 + offset).max(0) as u64)
    }

    pub fn drops(&mut self) -> bool {
        self.drop_prob > 0.0 && self.rng.random_bool(self.drop_prob)
    }
}
