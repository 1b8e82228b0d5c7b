//! Synthetic non-iid logistic-regression shards.
//!
//! Client i draws its positive-class share from Beta(α, α) (a two-class
//! Dirichlet), then samples features from N(±μ/√d · 1, I) plus a bias column.
//! Small α gives nearly single-class clients; large α gives near-iid shards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::objectives::{GlmObjective, Link};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShardConfig {
    pub clients: usize,
    /// Feature dimension before the bias column.
    pub features: usize,
    pub samples: usize,
    pub concentration: f64,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub batch: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for SyntheticShardConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            features: 5,
            samples: 64,
            concentration: 0.1,
            separation: 1.0,
            batch: 8,
            l2: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub objective: GlmObjective,
    /// Share of positive labels the shard was drawn with.
    pub positive_share: f64,
    pub distribution_id: usize,
}

pub fn make_synthetic_shards(cfg: &SyntheticShardConfig) -> Result<Vec<Shard>> {
    if cfg.clients == 0 || cfg.features == 0 || cfg.samples == 0 {
        return Err(invalid("shards need clients, features and samples >= 1"));
    }
    if !(cfg.concentration > 0.0 && cfg.concentration.is_finite()) {
        return Err(invalid("dirichlet concentration must be > 0"));
    }
    let beta = Beta::new(cfg.concentration, cfg.concentration)
        .map_err(|e| invalid(format!("dirichlet concentration: {e}")))?;
    let dim = cfg.features + 1;
    let offset = cfg.separation / (cfg.features as f64).sqrt();
    (0..cfg.clients)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let share: f64 = beta.sample(&mut rng);
            let label = Bernoulli::new(share.clamp(0.0, 1.0))
                .map_err(|e| invalid(format!("class share: {e}")))?;
            let mut x = Vec::with_capacity(cfg.samples * dim);
            let mut y = Vec::with_capacity(cfg.samples);
            for _ in 0..cfg.samples {
                let positive = label.sample(&mut rng);
                let mean = if positive { offset } else { -offset };
                for _ in 0..cfg.features {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.push(mean + z);
                }
                x.push(1.0);
                y.push(if positive { 1.0 } else { 0.0 });
            }
            let objective =
                GlmObjective::new(x, y, dim, Link::Logistic, cfg.batch.min(cfg.samples))?
                    .with_l2(cfg.l2);
            Ok(Shard {
                objective,
                positive_share: share,
                distribution_id: i,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ClientObjective;

    fn spread(concentration: f64) -> f64 {
        let cfg = SyntheticShardConfig {
            clients: 6,
            concentration,
            seed: 11,
            ..Default::default()
        };
        let optima: Vec<Vec<f64>> = make_synthetic_shards(&cfg)
            .unwrap()
            .into_iter()
            .map(|s| ClientObjective::from(s.objective).optimum().unwrap())
            .collect();
        let mut total = 0.0;
        for a in &optima {
            for b in &optima {
                total += a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        total
    }

    #[test]
    fn heterogeneity_grows_as_concentration_shrinks() {
        assert!(spread(1e6) < spread(0.1));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticShardConfig::default();
        assert_eq!(
            make_synthetic_shards(&cfg).unwrap(),
            make_synthetic_shards(&cfg).unwrap()
        );
    }

    #[test]
    fn single_client_optimum_is_federated_optimum() {
        let cfg = SyntheticShardConfig {
            clients: 1,
            ..Default::default()
        };
        let shard = make_synthetic_shards(&cfg).unwrap().remove(0);
        let obj: ClientObjective = shard.objective.into();
        let fleet = crate::model::Fleet::uniform([obj.clone()], &[1.0]).unwrap();
        let local = obj.optimum().unwrap();
        let global = fleet.optimum().unwrap();
        assert_eq!(local, global);
    }

    #[test]
    fn rejects_bad_concentration() {
        let cfg = SyntheticShardConfig {
            concentration: 0.0,
            ..Default::default()
        };
        assert!(make_synthetic_shards(&cfg).is_err());
    }
}
