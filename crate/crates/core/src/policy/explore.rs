use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::space::{DecisionSpace, DecisionValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationKind {
    #[default]
    None,
    EpsilonGreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub kind: ExplorationKind,
    pub epsilon: f64,
}

impl ExplorationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn epsilon_greedy(epsilon: f64) -> Self {
        Self { kind: ExplorationKind::EpsilonGreedy, epsilon }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(PolicyError::Eval(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.kind == ExplorationKind::None && self.epsilon != 0.0 {
            return Err(PolicyError::Eval("epsilon must be 0 when exploration is none".into()));
        }
        Ok(())
    }

    fn effective_epsilon(&self) -> f64 {
        match self.kind {
            ExplorationKind::None => 0.0,
            ExplorationKind::EpsilonGreedy => self.epsilon,
        }
    }
}

/// Applies ε-greedy exploration to a policy decision. Returns the final
/// decision and whether it came from the exploration draw. Score spaces
/// have no finite set to draw from and pass through unexplored.
pub fn explore(
    base: DecisionValue,
    space: DecisionSpace,
    cfg: &ExplorationConfig,
    seed: u64,
) -> Result<(DecisionValue, bool), PolicyError> {
    cfg.validate()?;
    let eps = cfg.effective_epsilon();
    if eps == 0.0 {
        return Ok((base, false));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random::<f64>() >= eps {
        return Ok((base, false));
    }
    let drawn = match space {
        DecisionSpace::Binary => DecisionValue::Boolean(rng.random::<bool>()),
        DecisionSpace::Choice { k } => DecisionValue::Choice(rng.random_range(0..k.max(1))),
        DecisionSpace::Score | DecisionSpace::Ranking => return Ok((base, false)),
    };
    Ok((drawn, true))
}

/// Fills ranking positions greedily from `order` (best first); with
/// probability ε a position instead takes a uniformly random remaining
/// candidate. Returns `(candidate index, explored)` per position.
pub fn explore_ranking(
    order: &[usize],
    cfg: &ExplorationConfig,
    seed: u64,
) -> Result<Vec<(usize, bool)>, PolicyError> {
    cfg.validate()?;
    let eps = cfg.effective_epsilon();
    let mut remaining: Vec<usize> = order.to_vec();
    let mut out = Vec::with_capacity(order.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while !remaining.is_empty() {
        if eps > 0.0 && rng.random::<f64>() < eps {
            let pick = rng.random_range(0..remaining.len());
            out.push((remaining.remove(pick), true));
        } else {
            out.push((remaining.remove(0), false));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_is_identity() {
        for seed in 0..100 {
            let (d, e) = explore(
                DecisionValue::Boolean(true),
                DecisionSpace::Binary,
                &ExplorationConfig::epsilon_greedy(0.0),
                seed,
            )
            .unwrap();
            assert_eq!(d, DecisionValue::Boolean(true));
            assert!(!e);
        }
    }

    #[test]
    fn full_exploration_is_uniform_binary() {
        let cfg = ExplorationConfig::epsilon_greedy(1.0);
        let mut trues = 0;
        for seed in 0..10_000u64 {
            let (d, explored) =
                explore(DecisionValue::Boolean(false), DecisionSpace::Binary, &cfg, seed).unwrap();
            assert!(explored);
            if d == DecisionValue::Boolean(true) {
                trues += 1;
            }
        }
        let share = trues as f64 / 10_000.0;
        assert!((share - 0.5).abs() <= 0.03, "share {share}");
    }

    #[test]
    fn choice_draws_stay_in_range() {
        let cfg = ExplorationConfig::epsilon_greedy(1.0);
        let mut seen = [0usize; 3];
        for seed in 0..3_000u64 {
            let (d, _) = explore(DecisionValue::Choice(0), DecisionSpace::Choice { k: 3 }, &cfg, seed).unwrap();
            let DecisionValue::Choice(i) = d else { panic!() };
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800), "{seen:?}");
    }

    #[test]
    fn seeded_determinism() {
        let cfg = ExplorationConfig::epsilon_greedy(0.5);
        let a = explore(DecisionValue::Boolean(true), DecisionSpace::Binary, &cfg, 99).unwrap();
        let b = explore(DecisionValue::Boolean(true), DecisionSpace::Binary, &cfg, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_out_of_range() {
        let cfg = ExplorationConfig::epsilon_greedy(1.5);
        assert!(explore(DecisionValue::Boolean(true), DecisionSpace::Binary, &cfg, 1).is_err());
        let bad_none = ExplorationConfig { kind: ExplorationKind::None, epsilon: 0.3 };
        assert!(bad_none.validate().is_err());
    }

    #[test]
    fn ranking_without_exploration_keeps_order() {
        let out = explore_ranking(&[2, 0, 1], &ExplorationConfig::none(), 5).unwrap();
        assert_eq!(out, vec![(2, false), (0, false), (1, false)]);
    }
}
