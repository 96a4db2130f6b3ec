//! Metropolis–Hastings random walk on Cayley graphs.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::MetricsRecord;
use crate::error::{Error, Result};
use crate::flows::path_rng;
use crate::graphs::{CayleyGraph, Perm, DEFAULT_BACKGROUND_REWARD};
use crate::optim::{HistoryRow, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhConfig {
    pub steps: usize,
    pub burn_in: usize,
    /// Added to the base reward: the chain targets `R' = R + background`.
    pub background_reward: f64,
    pub seed: u64,
    /// Restart from a uniform state after each accepted move into the
    /// reward set, recording the episode length.
    pub restart_on_reward: bool,
    /// Steps per history row.
    pub window: usize,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            burn_in: 0,
            background_reward: DEFAULT_BACKGROUND_REWARD,
            seed: 0,
            restart_on_reward: true,
            window: 1000,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::InvalidConfig(format!(
                "steps {} must exceed burn_in {}",
                self.steps, self.burn_in
            )));
        }
        if self.window == 0 || !(self.background_reward >= 0.0) {
            return Err(Error::InvalidConfig(
                "window must be positive and background nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhResult {
    /// Chain state after every post-burn-in step.
    pub samples: Vec<Perm>,
    /// Mean `R` at episode ends, or over the samples without restarts.
    pub mean_reward: f64,
    /// Mean steps-to-first-reward per episode (NaN without episodes).
    pub mean_length: f64,
    pub acceptance_rate: f64,
    /// Per-window episode statistics; the metrics columns are NaN.
    pub history: TrainHistory,
}

/// The MH rule: accept with probability `min(1, proposed / current)`.
pub fn mh_accept<R: Rng>(rng: &mut R, current: f64, proposed: f64) -> bool {
    proposed >= current || rng.random::<f64>() * current < proposed
}

fn uniform_perm<R: Rng>(p: usize, rng: &mut R) -> Perm {
    let mut v: Vec<usize> = (0..p).collect();
    v.shuffle(rng);
    Perm::new(v).expect("shuffle of the identity")
}

/// Runs the chain with proposals uniform over the generators and their
/// inverses, so the proposal kernel is symmetric.
pub fn mh_run(space: &CayleyGraph, config: &MhConfig) -> Result<MhResult> {
    config.validate()?;
    let moves = space.symmetric_moves();
    let target = |g: &Perm| space.base_reward(g) + config.background_reward;
    let mut rng = path_rng(config.seed, 0);
    let mut x = uniform_perm(space.degree(), &mut rng);
    let mut rx = target(&x);
    let mut samples = Vec::with_capacity(config.steps - config.burn_in);
    let mut accepted = 0usize;
    let mut episode_len = 1usize;
    let (mut ep_reward, mut ep_length, mut episodes) = (0.0, 0.0, 0usize);
    let (mut win_reward, mut win_length, mut win_count) = (0.0, 0.0, 0usize);
    let mut history = TrainHistory::default();
    for step in 0..config.steps {
        let y = x.mul(moves.choose(&mut rng).expect("at least one generator"));
        let ry = target(&y);
        if mh_accept(&mut rng, rx, ry) {
            accepted += 1;
            x = y;
            rx = ry;
        }
        episode_len += 1;
        if config.restart_on_reward && space.in_reward_set(&x) {
            let r = space.reward(&x);
            if step >= config.burn_in {
                ep_reward += r;
                ep_length += episode_len as f64;
                episodes += 1;
            }
            win_reward += r;
            win_length += episode_len as f64;
            win_count += 1;
            x = uniform_perm(space.degree(), &mut rng);
            rx = target(&x);
            episode_len = 1;
        }
        if step >= config.burn_in {
            samples.push(x.clone());
        }
        if (step + 1) % config.window == 0 {
            let n = win_count as f64;
            let nan = f64::NAN;
            history.rows.push(HistoryRow {
                step: step + 1,
                metrics: MetricsRecord {
                    loss: nan,
                    tv_error: nan,
                    e_f: nan,
                    e_r: nan,
                    e_i: nan,
                    expected_tau: nan,
                    total_mass: nan,
                },
                mean_reward: if win_count > 0 { win_reward / n } else { nan },
                mean_length: if win_count > 0 { win_length / n } else { nan },
            });
            (win_reward, win_length, win_count) = (0.0, 0.0, 0);
        }
    }
    let (mean_reward, mean_length) = if episodes > 0 {
        (ep_reward / episodes as f64, ep_length / episodes as f64)
    } else {
        let r = samples.iter().map(|g| space.reward(g)).sum::<f64>() / samples.len() as f64;
        (r, f64::NAN)
    };
    Ok(MhResult {
        samples,
        mean_reward,
        mean_length,
        acceptance_rate: accepted as f64 / config.steps as f64,
        history,
    })
}

/// Per-state comparison of chain frequencies with `R'/R'(S*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub frequency: Vec<f64>,
    pub target: Vec<f64>,
    /// Batch-means standard error per state.
    pub sigma: Vec<f64>,
}

impl StationarityReport {
    /// Largest `|frequency - target| / sigma` over states; states with zero
    /// estimated sigma count only if they deviate.
    pub fn max_z(&self) -> f64 {
        self.frequency
            .iter()
            .zip(&self.target)
            .zip(&self.sigma)
            .map(|((f, t), s)| {
                let d = (f - t).abs();
                if *s > 0.0 {
                    d / s
                } else if d == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn num_outside(&self, k: f64) -> usize {
        self.frequency
            .iter()
            .zip(&self.target)
            .zip(&self.sigma)
            .filter(|((f, t), s)| (*f - *t).abs() > k * **s)
            .count()
    }
}

/// Frequencies of an enumerable chain by permutation rank, with standard
/// errors from `batches` contiguous batch means.
///
/// The batch variance is pooled over states sharing the same target weight:
/// rarely visited states otherwise get a variance estimate from a handful of
/// visits, which is far too noisy to set a per-state band.
pub fn stationarity(
    space: &CayleyGraph,
    samples: &[Perm],
    background: f64,
    batches: usize,
) -> Result<StationarityReport> {
    let elems = Perm::all(space.degree());
    let n_states = elems.len();
    if batches < 2 || samples.len() < batches {
        return Err(Error::InvalidConfig(format!(
            "{} samples in {batches} batches",
            samples.len()
        )));
    }
    let weights: Vec<f64> = elems
        .iter()
        .map(|g| space.base_reward(g) + background)
        .collect();
    let z: f64 = weights.iter().sum();
    let target: Vec<f64> = weights.iter().map(|w| w / z).collect();

    let per = samples.len() / batches;
    let used = per * batches;
    let mut batch_freq = vec![vec![0.0; n_states]; batches];
    for (i, g) in samples[..used].iter().enumerate() {
        batch_freq[i / per][g.rank()] += 1.0 / per as f64;
    }
    let b = batches as f64;
    let mut frequency = vec![0.0; n_states];
    let mut var = vec![0.0; n_states];
    for s in 0..n_states {
        let mean = batch_freq.iter().map(|f| f[s]).sum::<f64>() / b;
        frequency[s] = mean;
        var[s] = batch_freq
            .iter()
            .map(|f| (f[s] - mean).powi(2))
            .sum::<f64>()
            / (b - 1.0);
    }
    let mut levels: Vec<f64> = weights.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut sigma = vec![0.0; n_states];
    for level in levels {
        let members: Vec<usize> = (0..n_states).filter(|&s| weights[s] == level).collect();
        let pooled = members.iter().map(|&s| var[s]).sum::<f64>() / members.len() as f64;
        for s in members {
            sigma[s] = (pooled / b).sqrt();
        }
    }
    Ok(StationarityReport {
        frequency,
        target,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::RewardSpec;

    #[test]
    fn acceptance_rule() {
        let mut rng = path_rng(4, 0);
        let n = 100_000;
        let hits = (0..n).filter(|_| mh_accept(&mut rng, 2.0, 1.0)).count() as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((hits / n as f64 - 0.5).abs() < 3.0 * sigma);
        assert!(mh_accept(&mut rng, 1.0, 1.0));
    }

    #[test]
    fn constant_reward_accepts_everything() {
        let space = CayleyGraph::bubble_sort(
            4,
            RewardSpec::Fixed {
                prefix: 0,
                scale: 1.0,
            },
        )
        .unwrap();
        let config = MhConfig {
            steps: 1000,
            restart_on_reward: false,
            ..MhConfig::default()
        };
        let r = mh_run(&space, &config).unwrap();
        assert_eq!(r.acceptance_rate, 1.0);
        assert_eq!(r.samples.len(), 1000);
        assert!(r.mean_length.is_nan());
    }

    #[test]
    fn episodes_and_reproducibility() {
        let space = CayleyGraph::transposition_and_cycles(
            5,
            RewardSpec::Fixed {
                prefix: 1,
                scale: 5.0,
            },
        )
        .unwrap();
        let config = MhConfig {
            steps: 20_000,
            window: 5000,
            seed: 3,
            ..MhConfig::default()
        };
        let a = mh_run(&space, &config).unwrap();
        let b = mh_run(&space, &config).unwrap();
        assert_eq!(
            (&a.samples, a.acceptance_rate, a.mean_length),
            (&b.samples, b.acceptance_rate, b.mean_length)
        );
        assert!((a.mean_reward - 5.001).abs() < 1e-12);
        assert!(a.mean_length >= 1.0);
        assert_eq!(a.history.rows.len(), 4);
        assert!(MhConfig {
            burn_in: 10,
            steps: 10,
            ..config
        }
        .validate()
        .is_err());
    }

    #[test]
    fn small_group_is_stationary() {
        let space = CayleyGraph::bubble_sort(
            3,
            RewardSpec::Fixed {
                prefix: 1,
                scale: 2.0,
            },
        )
        .unwrap();
        let config = MhConfig {
            steps: 200_000,
            burn_in: 1000,
            restart_on_reward: false,
            seed: 1,
            ..MhConfig::default()
        };
        let r = mh_run(&space, &config).unwrap();
        let rep = stationarity(&space, &r.samples, config.background_reward, 50).unwrap();
        for (f, t) in rep.frequency.iter().zip(&rep.target) {
            assert!((f - t).abs() < 0.02, "{rep:?}");
        }
    }
}
