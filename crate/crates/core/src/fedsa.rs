//! Federated simulated annealing over `(tau, eta, participant subset)`.
//!
//! Each epoch evaluates one neighbor of the best-known solution with a real
//! aggregation round, accepts it by the Boltzmann rule, and then spends a
//! second aggregation round re-measuring the best solution. Because training
//! moves the global model, a solution's loss drifts between epochs; a best
//! solution that got worse on re-measurement is replaced by a random one.
//!
//! The temperature only drops when a worse candidate is accepted.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{DriverRun, Federation};
use crate::metrics::{Decision, Phase, RoundRecord, SolutionSnapshot};
use crate::nn::ParameterVector;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from, SimRng, STREAM_ANNEAL};

/// Lowest temperature cooling can reach.
pub const TEMPERATURE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }

    pub fn sign(self) -> i64 {
        match self {
            Direction::Up => 1,
            Direction::Down => -1,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Direction::Up
        } else {
            Direction::Down
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub eta_min: f64,
    pub eta_max: f64,
    pub tau_min: usize,
    pub tau_max: usize,
    /// All participant IDs, in join order.
    pub mu: Vec<usize>,
    /// Participants per round.
    pub k: usize,
}

impl SearchSpace {
    pub const DEFAULT_ETA: (f64, f64) = (0.01, 0.5);
    pub const DEFAULT_TAU: (usize, usize) = (1, 20);

    pub fn new(n_participants: usize, k: usize) -> Self {
        SearchSpace {
            eta_min: Self::DEFAULT_ETA.0,
            eta_max: Self::DEFAULT_ETA.1,
            tau_min: Self::DEFAULT_TAU.0,
            tau_max: Self::DEFAULT_TAU.1,
            mu: (0..n_participants).collect(),
            k,
        }
    }

    /// A single-point learning-rate interval is accepted so that a component
    /// can be pinned.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::invalid(format!(
                "learning-rate bounds [{}, {}] must satisfy 0 < eta_min <= eta_max",
                self.eta_min, self.eta_max
            )));
        }
        if self.tau_min == 0 || self.tau_min > self.tau_max {
            return Err(Error::invalid(format!(
                "local-update bounds [{}, {}] must satisfy 1 <= tau_min <= tau_max",
                self.tau_min, self.tau_max
            )));
        }
        if self.k == 0 || self.k > self.mu.len() {
            return Err(Error::invalid(format!(
                "subset size {} must lie in [1, {}]",
                self.k,
                self.mu.len()
            )));
        }
        let unique: HashSet<_> = self.mu.iter().collect();
        if unique.len() != self.mu.len() {
            return Err(Error::invalid("participant IDs must be unique"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cooling {
    /// `T <- (1 - alpha) T`
    #[default]
    Complement,
    /// `T <- alpha T`
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedSaConfig {
    pub t_init: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub cooling: Cooling,
}

impl FedSaConfig {
    pub const DEFAULT_T_INIT: f64 = 0.8;
    pub const DEFAULT_ALPHA: f64 = 0.05;
    pub const DEFAULT_EPSILON: f64 = 0.1;

    pub fn new(epochs: usize, seed: u64) -> Self {
        FedSaConfig {
            t_init: Self::DEFAULT_T_INIT,
            alpha: Self::DEFAULT_ALPHA,
            epsilon: Self::DEFAULT_EPSILON,
            epochs,
            seed,
            cooling: Cooling::Complement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_init > 0.0) || !self.t_init.is_finite() {
            return Err(Error::invalid("t_init must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// One point of the search: local updates, learning rate and participant
/// subset, plus the search direction each component is currently moving in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub tau: usize,
    pub eta: f64,
    /// Slot `i` holds one selected participant ID.
    pub participants: Vec<usize>,
    pub tau_direction: Direction,
    pub eta_direction: Direction,
    pub slot_directions: Vec<Direction>,
}

impl Solution {
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.tau < space.tau_min || self.tau > space.tau_max {
            return Err(Error::invalid(format!("tau {} outside [{}, {}]", self.tau, space.tau_min, space.tau_max)));
        }
        if !(self.eta >= space.eta_min && self.eta <= space.eta_max) {
            return Err(Error::invalid(format!("eta {} outside [{}, {}]", self.eta, space.eta_min, space.eta_max)));
        }
        if self.participants.len() != space.k || self.slot_directions.len() != space.k {
            return Err(Error::invalid(format!(
                "expected {} participant slots, got {}",
                space.k,
                self.participants.len()
            )));
        }
        let members: HashSet<_> = space.mu.iter().collect();
        let mut seen = HashSet::new();
        for id in &self.participants {
            if !members.contains(id) {
                return Err(Error::invalid(format!("participant {id} is not in the federation")));
            }
            if !seen.insert(id) {
                return Err(Error::invalid(format!("participant {id} selected twice")));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> SolutionSnapshot {
        SolutionSnapshot {
            tau: self.tau,
            eta: self.eta,
            participants: self.participants.clone(),
        }
    }
}

/// Uniform draw of every component: integer `tau`, real `eta`, a `k`-subset
/// of participants and random directions.
pub fn init_solution<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Solution {
    let tau = rng.random_range(space.tau_min..=space.tau_max);
    let eta = uniform(space.eta_min, space.eta_max, rng);
    let participants = index::sample(rng, space.mu.len(), space.k)
        .into_iter()
        .map(|i| space.mu[i])
        .collect();
    let tau_direction = Direction::random(rng);
    let eta_direction = Direction::random(rng);
    let slot_directions = (0..space.k).map(|_| Direction::random(rng)).collect();
    Solution {
        tau,
        eta,
        participants,
        tau_direction,
        eta_direction,
        slot_directions,
    }
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Boltzmann acceptance `exp(-delta_e / T)`, capped at 1.
pub fn acceptance_probability(delta_e: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok((-delta_e / temperature).exp().min(1.0))
}

/// Bernoulli draw: true with probability `p`.
pub fn accept_with<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

pub fn cool(temperature: f64, alpha: f64, schedule: Cooling) -> f64 {
    let next = match schedule {
        Cooling::Complement => temperature * (1.0 - alpha),
        Cooling::Multiplicative => temperature * alpha,
    };
    next.max(TEMPERATURE_FLOOR)
}

/// Steps `value` one unit in `direction`; at a border the direction flips
/// and the step goes the other way.
pub fn neighbor_int(value: usize, lo: usize, hi: usize, direction: Direction) -> (usize, Direction) {
    if lo >= hi {
        return (value, direction);
    }
    let target = value as i64 + direction.sign();
    if target >= lo as i64 && target <= hi as i64 {
        (target as usize, direction)
    } else {
        let flipped = direction.flip();
        ((value as i64 + flipped.sign()) as usize, flipped)
    }
}

/// Moves one participant slot along the positions `0..n` of the ID list.
///
/// `occupied` holds the positions held by the other slots. A move that lands
/// on an occupied position is retried in the opposite direction; if that is
/// also blocked, a random free position (other than the current one) is
/// drawn. With no free position the slot stays put.
pub fn neighbor_slot<R: Rng + ?Sized>(
    position: usize,
    n: usize,
    direction: Direction,
    occupied: &HashSet<usize>,
    rng: &mut R,
) -> (usize, Direction) {
    if n <= 1 {
        return (position, direction);
    }
    let (target, dir) = neighbor_int(position, 0, n - 1, direction);
    if !occupied.contains(&target) {
        return (target, dir);
    }
    let back = position as i64 + dir.flip().sign();
    if back >= 0 && (back as usize) < n && !occupied.contains(&(back as usize)) {
        return (back as usize, dir.flip());
    }
    let free: Vec<usize> = (0..n)
        .filter(|p| *p != position && !occupied.contains(p))
        .collect();
    if free.is_empty() {
        return (position, direction);
    }
    (free[rng.random_range(0..free.len())], dir)
}

/// Neighbor of a participant subset: every slot moves one step along `mu`.
///
/// Slots are processed in order; a slot may not land on an ID held by a slot
/// that has not moved yet or one already placed this round.
pub fn neighbor_participants<R: Rng + ?Sized>(
    current: &[usize],
    mu: &[usize],
    directions: &[Direction],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Direction>)> {
    if current.len() != directions.len() {
        return Err(Error::invalid("one direction per participant slot is required"));
    }
    if current.len() >= mu.len() {
        return Ok((current.to_vec(), directions.to_vec()));
    }
    let position_of: HashMap<usize, usize> = mu.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let positions: Vec<usize> = current
        .iter()
        .map(|id| {
            position_of
                .get(id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("participant {id} is not in the federation")))
        })
        .collect::<Result<_>>()?;
    let mut occupied: HashSet<usize> = positions.iter().copied().collect();
    if occupied.len() != positions.len() {
        return Err(Error::invalid("current subset has duplicates"));
    }
    let mut next = Vec::with_capacity(current.len());
    let mut next_dirs = Vec::with_capacity(current.len());
    for (&pos, &dir) in positions.iter().zip(directions) {
        occupied.remove(&pos);
        let (moved, d) = neighbor_slot(pos, mu.len(), dir, &occupied, rng);
        occupied.insert(moved);
        next.push(mu[moved]);
        next_dirs.push(d);
    }
    Ok((next, next_dirs))
}

/// `eta_best + direction * epsilon * u`, clamped to the learning-rate bounds.
/// Hitting a bound flips the direction.
pub fn neighbor_eta_with(
    eta_best: f64,
    space: &SearchSpace,
    epsilon: f64,
    direction: Direction,
    u: f64,
) -> (f64, Direction) {
    let raw = eta_best + direction.sign() as f64 * epsilon * u;
    if raw > space.eta_max {
        (space.eta_max, Direction::Down)
    } else if raw < space.eta_min {
        (space.eta_min, Direction::Up)
    } else {
        (raw, direction)
    }
}

/// As [`neighbor_eta_with`] with `u` drawn uniformly from `[eta_min, eta_max]`.
pub fn neighbor_eta<R: Rng + ?Sized>(
    eta_best: f64,
    space: &SearchSpace,
    epsilon: f64,
    direction: Direction,
    rng: &mut R,
) -> (f64, Direction) {
    let u = uniform(space.eta_min, space.eta_max, rng);
    neighbor_eta_with(eta_best, space, epsilon, direction, u)
}

pub fn gen_neighbor_solution<R: Rng + ?Sized>(
    best: &Solution,
    space: &SearchSpace,
    cfg: &FedSaConfig,
    rng: &mut R,
) -> Result<Solution> {
    let (tau, tau_direction) = neighbor_int(best.tau, space.tau_min, space.tau_max, best.tau_direction);
    let (eta, eta_direction) = neighbor_eta(best.eta, space, cfg.epsilon, best.eta_direction, rng);
    let (participants, slot_directions) =
        neighbor_participants(&best.participants, &space.mu, &best.slot_directions, rng)?;
    Ok(Solution {
        tau,
        eta,
        participants,
        tau_direction,
        eta_direction,
        slot_directions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealState {
    pub temperature: f64,
    pub best_solution: Solution,
    pub best_loss: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct FedSaRun<T> {
    pub best: Solution,
    pub records: Vec<RoundRecord>,
    pub final_params: ParameterVector<T>,
    pub final_state: AnnealState,
    pub cooling_events: usize,
    pub worse_acceptances: usize,
    pub reinitializations: usize,
}

impl<T> FedSaRun<T> {
    pub fn into_driver_run(self) -> DriverRun<T> {
        DriverRun {
            records: self.records,
            final_params: self.final_params,
        }
    }
}

struct Aggregator<'a, T> {
    federation: &'a Federation<T>,
    global: ParameterVector<T>,
    round: usize,
}

impl<T: Scalar> Aggregator<'_, T> {
    /// One aggregation round with `solution`; the global model advances.
    fn aggregate(&mut self, solution: &Solution, phase: Phase, epoch: usize) -> Result<RoundRecord> {
        self.round += 1;
        let outcome =
            self.federation
                .aggregate_round(&self.global, &solution.participants, solution.tau, solution.eta, self.round)?;
        self.global = outcome.params;
        let mut record = self.federation.evaluate(&self.global, self.round, phase)?;
        record.epoch = Some(epoch);
        record.solution = Some(solution.snapshot());
        record.federated_objective = Some(outcome.federated_objective);
        Ok(record)
    }
}

pub fn run_fedsa<T: Scalar>(
    federation: &Federation<T>,
    space: &SearchSpace,
    cfg: &FedSaConfig,
    initial: ParameterVector<T>,
) -> Result<FedSaRun<T>> {
    run_fedsa_with(federation, space, cfg, initial, &mut |_| Ok(()))
}

/// Annealing driver. Emits `1 + 2 * epochs` records: the initial solution's
/// round, then per epoch a candidate round and a revalidation round.
pub fn run_fedsa_with<T: Scalar>(
    federation: &Federation<T>,
    space: &SearchSpace,
    cfg: &FedSaConfig,
    initial: ParameterVector<T>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<FedSaRun<T>> {
    space.validate()?;
    cfg.validate()?;
    if space.mu.iter().any(|&id| id >= federation.participants().len()) {
        return Err(Error::invalid("search space names participants outside the federation"));
    }
    let mut rng: SimRng = rng_from(derive_seed(cfg.seed, &[STREAM_ANNEAL]));
    let mut agg = Aggregator {
        federation,
        global: initial,
        round: 0,
    };
    let mut records = Vec::with_capacity(1 + 2 * cfg.epochs);
    let mut emit = |record: RoundRecord, records: &mut Vec<RoundRecord>| -> Result<()> {
        sink(&record)?;
        records.push(record);
        Ok(())
    };

    let mut temperature = cfg.t_init;
    let mut best = init_solution(space, &mut rng);
    let mut record = agg.aggregate(&best, Phase::Init, 0)?;
    let mut best_loss = record.loss;
    record.temperature = Some(temperature);
    emit(record, &mut records)?;

    let mut cooling_events = 0;
    let mut worse_acceptances = 0;
    let mut reinitializations = 0;
    for epoch in 1..=cfg.epochs {
        let candidate = gen_neighbor_solution(&best, space, cfg, &mut rng)?;
        let mut record = agg.aggregate(&candidate, Phase::Candidate, epoch)?;
        let current_loss = record.loss;
        let decision = if current_loss < best_loss {
            Decision::AcceptedBetter
        } else {
            let p = acceptance_probability(current_loss - best_loss, temperature)?;
            if accept_with(p, &mut rng) {
                temperature = cool(temperature, cfg.alpha, cfg.cooling);
                cooling_events += 1;
                Decision::AcceptedWorse
            } else {
                Decision::Rejected
            }
        };
        if decision != Decision::Rejected {
            best = candidate;
            best_loss = current_loss;
            if decision == Decision::AcceptedWorse {
                worse_acceptances += 1;
            }
        }
        record.decision = Some(decision);
        record.temperature = Some(temperature);
        emit(record, &mut records)?;

        let mut record = agg.aggregate(&best, Phase::Revalidation, epoch)?;
        let retest_loss = record.loss;
        if retest_loss > best_loss {
            best = init_solution(space, &mut rng);
            reinitializations += 1;
            record.decision = Some(Decision::Reinitialized);
        } else {
            record.decision = Some(Decision::Retained);
        }
        best_loss = retest_loss;
        record.temperature = Some(temperature);
        emit(record, &mut records)?;
    }

    Ok(FedSaRun {
        final_state: AnnealState {
            temperature,
            best_solution: best.clone(),
            best_loss,
            epoch: cfg.epochs,
        },
        best,
        records,
        final_params: agg.global,
        cooling_events,
        worse_acceptances,
        reinitializations,
    })
}
