//! ε-greedy Q-table agents, one per conv layer, that pick pruning ratios on a
//! 5-point grid around a base rate and learn from a broadcast scalar reward
//! through experience replay.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{count_flops, ModelGraph};
use crate::prune::{apply_prune, plan_from_scores, Direction};
use crate::sensitivity::ScoreTable;
use crate::train::evaluate;

pub const MIN_RATIO: f64 = 10.0;
pub const MAX_RATIO: f64 = 90.0;
pub const GRID_STEP: f64 = 5.0;
pub const WINDOW: f64 = 20.0;
const BASE_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub base_rate: f64,
    pub episodes: usize,
    pub lambda_r: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub eta: f64,
    pub replay_capacity: usize,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            base_rate: 50.0,
            episodes: 40,
            lambda_r: 0.5,
            epsilon: 0.3,
            epsilon_decay: 0.95,
            epsilon_floor: 0.05,
            eta: 0.1,
            replay_capacity: 4096,
            minibatch: 32,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(MIN_RATIO..=MAX_RATIO).contains(&self.base_rate) {
            return bad(format!("base rate {} outside [10, 90]", self.base_rate));
        }
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if !(self.lambda_r.is_finite() && self.lambda_r >= 0.0) {
            return bad(format!(
                "lambda_r {} must be finite and non-negative",
                self.lambda_r
            ));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("epsilon_decay", self.epsilon_decay),
            ("epsilon_floor", self.epsilon_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta {} outside (0, 1]", self.eta));
        }
        if self.replay_capacity == 0 || self.minibatch == 0 {
            return bad("replay capacity and minibatch must be positive".into());
        }
        Ok(())
    }
}

/// Grid ratios `{10, 15, …, 90} ∩ [base − 20, base + 20]`.
pub fn action_grid(base_rate: f64) -> Vec<f64> {
    let lo = (base_rate - WINDOW).max(MIN_RATIO);
    let hi = (base_rate + WINDOW).min(MAX_RATIO);
    (0..)
        .map(|i| MIN_RATIO + GRID_STEP * i as f64)
        .take_while(|&r| r <= MAX_RATIO)
        .filter(|&r| r >= lo - 1e-9 && r <= hi + 1e-9)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub layer_id: usize,
    pub grid: Vec<f64>,
    pub q: Vec<f64>,
    pub visits: Vec<u64>,
    pub epsilon: f64,
    /// Replay updates applied per arm.
    pub updates: Vec<u64>,
    base_arm: usize,
}

impl AgentState {
    pub fn new(layer_id: usize, base_rate: f64, epsilon: f64) -> Result<Self> {
        let grid = action_grid(base_rate);
        if grid.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty action grid for base rate {base_rate}"
            )));
        }
        let base_arm = grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - base_rate).abs().total_cmp(&(b.1 - base_rate).abs()))
            .map(|(i, _)| i)
            .expect("non-empty grid");
        let mut q = vec![0.0; grid.len()];
        q[base_arm] = BASE_PRIOR;
        Ok(AgentState {
            layer_id,
            visits: vec![0; grid.len()],
            updates: vec![0; grid.len()],
            grid,
            q,
            epsilon,
            base_arm,
        })
    }

    /// Highest q, lowest ratio on ties.
    pub fn greedy_arm(&self) -> usize {
        argmax(self.q.iter().copied().enumerate())
    }

    /// Greedy over arms that have evidence behind them (visited, or the
    /// base arm carrying its prior).
    pub fn final_arm(&self) -> usize {
        argmax(
            self.q
                .iter()
                .copied()
                .enumerate()
                .filter(|&(i, _)| self.visits[i] > 0 || i == self.base_arm),
        )
    }

    pub fn select_action(&self, rng: &mut impl Rng) -> usize {
        if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            rng.random_range(0..self.grid.len())
        } else {
            self.greedy_arm()
        }
    }

    pub fn arm_of(&self, ratio: f64) -> Option<usize> {
        self.grid.iter().position(|&r| (r - ratio).abs() < 1e-9)
    }

    /// `q[a] ← q[a] + η (r − q[a])`.
    pub fn update(&mut self, arm: usize, reward: f64, eta: f64) {
        self.q[arm] += eta * (reward - self.q[arm]);
    }

    /// Incremental mean over the arm's replayed rewards, with `eta` as the
    /// smallest step so old evidence keeps fading.
    pub fn replay_update(&mut self, arm: usize, reward: f64, eta: f64) {
        self.updates[arm] += 1;
        let step = (1.0 / self.updates[arm] as f64).max(eta);
        self.update(arm, reward, step);
    }
}

fn argmax(items: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in items {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub episode: usize,
    pub layer_id: usize,
    pub s: f64,
    pub a: f64,
    pub r: f64,
}

/// FIFO replay buffer.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Uniform draws with replacement.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Vec<Experience> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..k)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect()
    }
}

/// `acc_pruned / acc_base − λ · flops_pruned / flops_base`.
pub fn compute_reward(
    acc_base: f64,
    acc_pruned: f64,
    flops_base: f64,
    flops_pruned: f64,
    lambda_r: f64,
) -> Result<f64> {
    if !(acc_base > 0.0 && flops_base > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "baseline accuracy {acc_base} and FLOPs {flops_base} must be positive"
        )));
    }
    Ok(acc_pruned / acc_base - lambda_r * (flops_pruned / flops_base))
}

/// Scores one joint choice of per-layer ratios.
pub trait RewardOracle {
    fn reward(&mut self, ratios: &[f64]) -> Result<f64>;
}

impl<F: FnMut(&[f64]) -> Result<f64>> RewardOracle for F {
    fn reward(&mut self, ratios: &[f64]) -> Result<f64> {
        self(ratios)
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub ratios: Vec<f64>,
    pub agents: Vec<AgentState>,
    /// Every experience in episode order, `episodes × layers` entries.
    pub log: Vec<Experience>,
}

pub fn run_search(
    layer_count: usize,
    cfg: &ControllerConfig,
    oracle: &mut impl RewardOracle,
) -> Result<SearchResult> {
    cfg.validate()?;
    if layer_count == 0 {
        return Err(Error::InvalidArgument("no layers to search".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agents: Vec<AgentState> = (0..layer_count)
        .map(|l| AgentState::new(l, cfg.base_rate, cfg.epsilon))
        .collect::<Result<_>>()?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut log = Vec::with_capacity(cfg.episodes * layer_count);

    for episode in 0..cfg.episodes {
        let arms: Vec<usize> = agents.iter().map(|a| a.select_action(&mut rng)).collect();
        let ratios: Vec<f64> = agents.iter().zip(&arms).map(|(a, &i)| a.grid[i]).collect();
        let r = oracle.reward(&ratios)?;
        if !r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite reward {r} at episode {episode}"
            )));
        }
        for (agent, &arm) in agents.iter_mut().zip(&arms) {
            agent.visits[arm] += 1;
            let e = Experience {
                episode,
                layer_id: agent.layer_id,
                s: cfg.base_rate,
                a: agent.grid[arm],
                r,
            };
            replay.push(e.clone());
            log.push(e);
        }
        for e in replay.sample(cfg.minibatch, &mut rng) {
            let agent = &mut agents[e.layer_id];
            let arm = agent
                .arm_of(e.a)
                .expect("replayed ratio is on the agent's grid");
            agent.replay_update(arm, e.r, cfg.eta);
        }
        for agent in &mut agents {
            agent.epsilon =
                (agent.epsilon * cfg.epsilon_decay).max(cfg.epsilon_floor.min(agent.epsilon));
        }
    }
    let ratios = agents.iter().map(|a| a.grid[a.final_arm()]).collect();
    Ok(SearchResult {
        ratios,
        agents,
        log,
    })
}

/// JSON lines, one `{episode, layer_id, s, a, r}` object per experience.
pub fn replay_jsonl(log: &[Experience]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        let _ = writeln!(out, "{}", serde_json::to_string(e)?);
    }
    Ok(out)
}

/// Reward from pruning a model per the candidate ratios and evaluating it on
/// a held-out subset without fine-tuning.
pub struct PruneReward<'a> {
    pub model: &'a ModelGraph<f32>,
    pub scores: &'a ScoreTable,
    pub direction: Direction,
    pub eval: &'a Dataset,
    pub lambda_r: f64,
    acc_base: f64,
    flops_base: f64,
}

impl<'a> PruneReward<'a> {
    pub fn new(
        model: &'a ModelGraph<f32>,
        scores: &'a ScoreTable,
        direction: Direction,
        eval: &'a Dataset,
        lambda_r: f64,
    ) -> Result<Self> {
        let acc_base = evaluate(model, eval)?;
        let flops_base = count_flops(model)?.total_flops as f64;
        if acc_base <= 0.0 {
            return Err(Error::InvalidArgument(
                "baseline accuracy on the reward subset is zero".into(),
            ));
        }
        Ok(PruneReward {
            model,
            scores,
            direction,
            eval,
            lambda_r,
            acc_base,
            flops_base,
        })
    }

    pub fn baseline_accuracy(&self) -> f64 {
        self.acc_base
    }
}

impl RewardOracle for PruneReward<'_> {
    fn reward(&mut self, ratios: &[f64]) -> Result<f64> {
        let plan = plan_from_scores(self.model, self.scores, ratios, self.direction)?;
        let (pruned, _) = apply_prune(self.model, &plan)?;
        let acc = evaluate(&pruned, self.eval)?;
        let flops = count_flops(&pruned)?.total_flops as f64;
        compute_reward(self.acc_base, acc, self.flops_base, flops, self.lambda_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn grid_window_and_clipping() {
        assert_eq!(
            action_grid(50.0),
            vec![30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0]
        );
        assert_eq!(action_grid(10.0), vec![10.0, 15.0, 20.0, 25.0, 30.0]);
        assert_eq!(action_grid(90.0), vec![70.0, 75.0, 80.0, 85.0, 90.0]);
        assert_eq!(action_grid(52.0).first(), Some(&35.0));
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = AgentState::new(0, 50.0, 0.0).unwrap();
        assert_eq!(a.grid[a.select_action(&mut rng)], 50.0);
        a.q = vec![0.0; a.grid.len()];
        let (i40, i45) = (a.arm_of(40.0).unwrap(), a.arm_of(45.0).unwrap());
        a.q[i40] = 0.7;
        a.q[i45] = 0.7;
        assert_eq!(a.grid[a.select_action(&mut rng)], 40.0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let a = AgentState::new(0, 50.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 10_000;
        let mut counts = vec![0usize; a.grid.len()];
        for _ in 0..draws {
            counts[a.select_action(&mut rng)] += 1;
        }
        let p = 1.0 / a.grid.len() as f64;
        let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean} ± {sd}");
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(0.9, 0.9, 100.0, 100.0, 0.5).unwrap(), 0.5);
        assert!((compute_reward(1.0, 0.99, 1.0, 0.3, 0.5).unwrap() - 0.84).abs() < 1e-12);
        assert!(compute_reward(0.0, 0.5, 1.0, 1.0, 0.5).is_err());
        assert!(compute_reward(0.5, 0.5, 0.0, 1.0, 0.5).is_err());
        let lo = compute_reward(0.8, 0.5, 1.0, 0.4, 0.0).unwrap();
        let hi = compute_reward(0.8, 0.6, 1.0, 0.4, 0.0).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn update_contracts_toward_reward() {
        let mut a = AgentState::new(0, 50.0, 0.0).unwrap();
        let arm = a.arm_of(30.0).unwrap();
        a.update(arm, 1.0, 0.1);
        assert!((a.q[arm] - 0.1).abs() < 1e-15);
        let mut gap = (a.q[arm] - 2.0).abs();
        for _ in 0..20 {
            a.update(arm, 2.0, 0.1);
            let next = (a.q[arm] - 2.0).abs();
            assert!((next - 0.9 * gap).abs() < 1e-12);
            gap = next;
        }
    }

    #[test]
    fn replay_update_is_a_running_mean_until_eta_takes_over() {
        let mut a = AgentState::new(0, 50.0, 0.0).unwrap();
        let arm = a.arm_of(50.0).unwrap();
        let rewards = [0.4, 0.8, 0.3, 0.9, 0.6];
        for (n, &r) in rewards.iter().enumerate() {
            a.replay_update(arm, r, 0.1);
            let mean = rewards[..=n].iter().sum::<f64>() / (n + 1) as f64;
            assert!((a.q[arm] - mean).abs() < 1e-12);
        }
        let mut b = a.clone();
        for _ in 0..20 {
            a.replay_update(arm, 1.0, 0.1);
        }
        for _ in 0..20 {
            b.update(arm, 1.0, 0.1);
        }
        assert!((a.q[arm] - b.q[arm]).abs() > 0.0);
        assert_eq!(a.updates[arm], 25);
    }

    #[test]
    fn stochastic_rewards_track_the_mean() {
        let (mu, sd, eta) = (0.6, 0.2, 0.05);
        let normal = Normal::new(mu, sd).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = AgentState::new(0, 50.0, 0.0).unwrap();
        let arm = a.arm_of(35.0).unwrap();
        for _ in 0..1000 {
            a.update(arm, normal.sample(&mut rng), eta);
        }
        // Stationary EMA variance is η/(2−η)·σ².
        let effective_n = (2.0 - eta) / eta;
        assert!((a.q[arm] - mu).abs() < 3.0 * sd / f64::sqrt(effective_n));
    }

    #[test]
    fn single_greedy_episode_returns_base_rate() {
        let cfg = ControllerConfig {
            episodes: 1,
            epsilon: 0.0,
            base_rate: 60.0,
            ..Default::default()
        };
        let mut oracle = |_: &[f64]| Ok(-0.3);
        let res = run_search(4, &cfg, &mut oracle).unwrap();
        assert_eq!(res.ratios, vec![60.0; 4]);
        assert_eq!(res.log.len(), 4);
    }

    #[test]
    fn log_length_and_broadcast_credit() {
        let cfg = ControllerConfig {
            episodes: 25,
            seed: 8,
            ..Default::default()
        };
        let mut oracle = |r: &[f64]| Ok(r.iter().sum::<f64>() / 1000.0);
        let res = run_search(3, &cfg, &mut oracle).unwrap();
        assert_eq!(res.log.len(), 75);
        for ep in res.log.chunks(3) {
            assert!(ep
                .iter()
                .all(|e| e.r == ep[0].r && e.episode == ep[0].episode));
        }
        let text = replay_jsonl(&res.log).unwrap();
        assert_eq!(text.lines().count(), 75);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["episode", "layer_id", "s", "a", "r"] {
            assert!(first.get(key).is_some());
        }
    }

    /// Separable concave reward peaked at per-layer optima.
    pub(crate) fn bandit(
        optima: Vec<f64>,
        noise: f64,
        seed: u64,
    ) -> impl FnMut(&[f64]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let normal = Normal::new(0.0, noise.max(1e-12)).unwrap();
        move |ratios: &[f64]| {
            let l = ratios.len() as f64;
            let r: f64 = ratios
                .iter()
                .zip(&optima)
                .map(|(a, o)| 1.0 - ((a - o) / 20.0).powi(2))
                .sum::<f64>()
                / l;
            Ok(r + normal.sample(&mut rng))
        }
    }

    #[test]
    fn converges_on_synthetic_bandit() {
        for (optima, need) in [(vec![50.0, 50.0, 50.0], 19), (vec![40.0, 60.0, 65.0], 15)] {
            let hits = (0..20)
                .filter(|&seed| {
                    let cfg = ControllerConfig {
                        episodes: 200,
                        seed,
                        ..Default::default()
                    };
                    let mut oracle = bandit(optima.clone(), 0.02, seed);
                    let res = run_search(optima.len(), &cfg, &mut oracle).unwrap();
                    res.ratios
                        .iter()
                        .zip(&optima)
                        .all(|(r, o)| (r - o).abs() <= 5.0)
                })
                .count();
            assert!(hits >= need, "optima {optima:?}: {hits}/20");
        }
    }

    proptest! {
        #[test]
        fn chosen_ratios_stay_in_window(base in 10u32..=90, seed in 0u64..1000, layers in 1usize..5) {
            let cfg = ControllerConfig { base_rate: base as f64, episodes: 15, seed, epsilon: 0.8, ..Default::default() };
            let mut oracle = |r: &[f64]| Ok(-r.iter().sum::<f64>() / 100.0);
            let res = run_search(layers, &cfg, &mut oracle).unwrap();
            for e in &res.log {
                prop_assert!((MIN_RATIO..=MAX_RATIO).contains(&e.a));
                prop_assert!((e.a - base as f64).abs() <= WINDOW + 1e-9);
            }
            for r in &res.ratios {
                prop_assert!((r - base as f64).abs() <= WINDOW + 1e-9);
            }
            for a in &res.agents {
                prop_assert!(a.q.iter().all(|q| q.is_finite()));
                prop_assert!(a.epsilon <= 0.8);
            }
        }
    }
}
