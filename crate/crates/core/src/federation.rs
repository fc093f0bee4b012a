//! Synchronous federated-learning runtime and the FedAvg baseline.
//!
//! One aggregation round: pick a participant subset, let each selected
//! participant run `tau` mini-batch SGD steps from the current global model
//! on its own shard, then combine the local models with dataset-size
//! weights over the contributing subset.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::metrics::{Phase, RoundRecord, SolutionSnapshot};
use crate::nn::{self, Batch, ParameterVector};
use crate::scalar::Scalar;
use crate::seed::{chain_seed, derive_seed, rng_from, STREAM_LOCAL, STREAM_SELECT};

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantState<T> {
    pub id: usize,
    pub shard: Shard<T>,
}

impl<T: Scalar> ParticipantState<T> {
    /// `D_n`, the number of rows the participant trains on.
    pub fn shard_size(&self) -> usize {
        self.shard.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_participants: usize,
    pub subset_size: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 || self.subset_size > self.n_participants {
            return Err(Error::invalid(format!(
                "subset_size {} must lie in [1, n_participants = {}]",
                self.subset_size, self.n_participants
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub tau: usize,
    pub eta0: f64,
    pub rounds: usize,
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(Error::invalid("eta0 must be a finite non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate<T> {
    pub params: ParameterVector<T>,
    /// Training loss of the last mini-batch.
    pub loss: f64,
}

/// `tau` mini-batch SGD steps on `data` starting from `start`.
///
/// Step `i` draws its batch from a generator seeded with the `i`-th element
/// of the chain `seed, chain_seed(seed), ...`. Rows are sampled without
/// replacement, or with replacement when `data` has fewer than
/// `batch_size` rows.
pub fn train_steps<T: Scalar>(
    start: &ParameterVector<T>,
    data: &Batch<T>,
    tau: usize,
    eta: T,
    batch_size: usize,
    seed: u64,
) -> Result<LocalUpdate<T>> {
    if tau == 0 {
        return Err(Error::invalid("tau must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut params = start.clone();
    let mut step_seed = seed;
    let mut loss = T::zero();
    for _ in 0..tau {
        let mut rng = rng_from(step_seed);
        let rows: Vec<usize> = if data.len() >= batch_size {
            index::sample(&mut rng, data.len(), batch_size).into_vec()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..data.len())).collect()
        };
        let batch = data.gather(&rows);
        let (l, grad) = nn::loss_and_gradient(&params, &batch)?;
        nn::sgd_step_in_place(&mut params, &grad, eta)?;
        loss = l;
        step_seed = chain_seed(step_seed);
    }
    Ok(LocalUpdate {
        params,
        loss: loss.as_f64(),
    })
}

/// A participant's local training from the received global model.
pub fn local_update<T: Scalar>(
    global: &ParameterVector<T>,
    shard: &Shard<T>,
    tau: usize,
    eta: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LocalUpdate<T>> {
    if shard.is_empty() {
        return Err(Error::invalid(format!("participant {} has an empty shard", shard.owner_id)));
    }
    train_steps(global, &shard.samples.samples, tau, T::of(eta), batch_size, seed)
}

/// Dataset-size weighted average `sum_n (D_n / D) w_n`, where `D` sums the
/// sizes of the given contributions only.
pub fn fedavg_aggregate<T: Scalar>(contributions: &[(&ParameterVector<T>, usize)]) -> Result<ParameterVector<T>> {
    let (first, _) = contributions
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if contributions.iter().any(|(p, _)| !p.same_layout(first)) {
        return Err(Error::LayoutMismatch);
    }
    if contributions.iter().any(|&(_, size)| size == 0) {
        return Err(Error::invalid("contribution with zero dataset size"));
    }
    let total: usize = contributions.iter().map(|&(_, s)| s).sum();
    let mut out = ParameterVector::zeros(first.layout().clone());
    for &(params, size) in contributions {
        let weight = T::of(size as f64 / total as f64);
        for (acc, &v) in out.values_mut().iter_mut().zip(params.values()) {
            *acc = *acc + weight * v;
        }
    }
    Ok(out)
}

/// Size-weighted mean of local losses, `sum_n (D_n / D) F_n`.
pub fn federated_objective(local_losses: &[(f64, usize)]) -> Result<f64> {
    if local_losses.is_empty() {
        return Err(Error::invalid("no local losses"));
    }
    if local_losses.iter().any(|&(_, s)| s == 0) {
        return Err(Error::invalid("local loss with zero dataset size"));
    }
    let total: usize = local_losses.iter().map(|&(_, s)| s).sum();
    Ok(local_losses
        .iter()
        .map(|&(loss, size)| size as f64 / total as f64 * loss)
        .sum())
}

/// Uniform `k`-subset of `all_ids` without replacement, in draw order.
pub fn select_random(all_ids: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("a round needs at least one participant"));
    }
    if k > all_ids.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} of {} participants",
            all_ids.len()
        )));
    }
    let mut rng = rng_from(seed);
    Ok(index::sample(&mut rng, all_ids.len(), k)
        .into_iter()
        .map(|i| all_ids[i])
        .collect())
}

/// Learning-rate decay `eta / (1 + gamma * i)` with `gamma = 0.1 / i`.
///
/// `gamma * i` is 0.1 for every round, so each call divides by 1.1.
pub fn decay_eta(eta_prev: f64, round_index: usize) -> f64 {
    let i = round_index.max(1) as f64;
    let gamma = 0.1 / i;
    eta_prev * (1.0 / (1.0 + gamma * i))
}

/// What one aggregation round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome<T> {
    pub params: ParameterVector<T>,
    pub federated_objective: f64,
    /// Selected participants that could not train (empty shard).
    pub skipped: Vec<usize>,
}

/// Participants plus the server-side validation set.
#[derive(Debug, Clone)]
pub struct Federation<T> {
    pub config: FederationConfig,
    participants: Vec<ParticipantState<T>>,
    validation: Dataset<T>,
}

impl<T: Scalar> Federation<T> {
    /// Assigns participant IDs in shard order.
    pub fn new(config: FederationConfig, shards: Vec<Shard<T>>, validation: Dataset<T>) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.n_participants {
            return Err(Error::invalid(format!(
                "{} shards for {} participants",
                shards.len(),
                config.n_participants
            )));
        }
        if validation.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        let participants = shards
            .into_iter()
            .enumerate()
            .map(|(id, mut shard)| {
                shard.owner_id = id;
                ParticipantState { id, shard }
            })
            .collect();
        Ok(Federation {
            config,
            participants,
            validation,
        })
    }

    pub fn participants(&self) -> &[ParticipantState<T>] {
        &self.participants
    }

    pub fn ids(&self) -> Vec<usize> {
        self.participants.iter().map(|p| p.id).collect()
    }

    pub fn validation(&self) -> &Dataset<T> {
        &self.validation
    }

    /// Seed of participant `id`'s local training in round `round`.
    pub fn local_seed(&self, round: usize, id: usize) -> u64 {
        derive_seed(self.config.seed, &[STREAM_LOCAL, round as u64, id as u64])
    }

    pub fn selection_seed(&self, round: usize) -> u64 {
        derive_seed(self.config.seed, &[STREAM_SELECT, round as u64])
    }

    /// Local training of `selected` from `global`, then FedAvg aggregation.
    pub fn aggregate_round(
        &self,
        global: &ParameterVector<T>,
        selected: &[usize],
        tau: usize,
        eta: f64,
        round: usize,
    ) -> Result<RoundOutcome<T>> {
        let mut seen = HashSet::with_capacity(selected.len());
        for &id in selected {
            if id >= self.participants.len() {
                return Err(Error::invalid(format!("unknown participant {id}")));
            }
            if !seen.insert(id) {
                return Err(Error::invalid(format!("participant {id} selected twice")));
            }
        }
        let results: Vec<(usize, Option<LocalUpdate<T>>)> = selected
            .par_iter()
            .map(|&id| {
                let p = &self.participants[id];
                if p.shard.is_empty() {
                    return Ok((id, None));
                }
                local_update(
                    global,
                    &p.shard,
                    tau,
                    eta,
                    self.config.batch_size,
                    self.local_seed(round, id),
                )
                .map(|u| (id, Some(u)))
            })
            .collect::<Result<_>>()?;
        let mut skipped = Vec::new();
        let mut contributions = Vec::with_capacity(results.len());
        let mut losses = Vec::with_capacity(results.len());
        for (id, update) in &results {
            match update {
                Some(u) => {
                    let size = self.participants[*id].shard_size();
                    contributions.push((&u.params, size));
                    losses.push((u.loss, size));
                }
                None => skipped.push(*id),
            }
        }
        if contributions.is_empty() {
            return Err(Error::invalid("no selected participant could train"));
        }
        Ok(RoundOutcome {
            params: fedavg_aggregate(&contributions)?,
            federated_objective: federated_objective(&losses)?,
            skipped,
        })
    }

    /// Validation loss and classification metrics of `params`.
    pub fn evaluate(&self, params: &ParameterVector<T>, round_index: usize, phase: Phase) -> Result<RoundRecord> {
        evaluate_record(params, &self.validation, round_index, phase)
    }
}

pub fn evaluate_record<T: Scalar>(
    params: &ParameterVector<T>,
    validation: &Dataset<T>,
    round_index: usize,
    phase: Phase,
) -> Result<RoundRecord> {
    let eval = nn::evaluate(params, &validation.samples)?;
    RoundRecord::from_evaluation(
        round_index,
        phase,
        eval.loss.as_f64(),
        &eval.predictions,
        validation.labels(),
    )
}

/// Records plus the final global model.
#[derive(Debug, Clone)]
pub struct DriverRun<T> {
    pub records: Vec<RoundRecord>,
    pub final_params: ParameterVector<T>,
}

/// FedAvg with random selection, fixed `tau` and per-round learning-rate decay.
pub fn run_fedavg<T: Scalar>(
    federation: &Federation<T>,
    cfg: &FedAvgConfig,
    initial: ParameterVector<T>,
) -> Result<DriverRun<T>> {
    run_fedavg_with(federation, cfg, initial, &mut |_| Ok(()))
}

/// As [`run_fedavg`], handing each record to `sink` as soon as it exists.
pub fn run_fedavg_with<T: Scalar>(
    federation: &Federation<T>,
    cfg: &FedAvgConfig,
    initial: ParameterVector<T>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<DriverRun<T>> {
    cfg.validate()?;
    let ids = federation.ids();
    let mut global = initial;
    let mut eta = cfg.eta0;
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let selected = select_random(&ids, federation.config.subset_size, federation.selection_seed(round))?;
        let outcome = federation.aggregate_round(&global, &selected, cfg.tau, eta, round)?;
        global = outcome.params;
        let mut record = federation.evaluate(&global, round, Phase::Fedavg)?;
        record.solution = Some(SolutionSnapshot {
            tau: cfg.tau,
            eta,
            participants: selected,
        });
        record.federated_objective = Some(outcome.federated_objective);
        sink(&record)?;
        records.push(record);
        eta = decay_eta(eta, round);
    }
    Ok(DriverRun {
        records,
        final_params: global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, NetworkSpec};
    use std::sync::Arc;

    /// 1 input, no hidden layer, 2 outputs: 4 parameters.
    fn layout() -> Arc<crate::nn::Layout> {
        Arc::new(NetworkSpec::new(1, 2).with_hidden(vec![]).layout())
    }

    fn shard(rows: usize, seed: u64) -> Shard<f64> {
        let spec = crate::data::SynthSpec {
            n_samples: rows,
            n_features: 3,
            class_ratio: 0.5,
            separation: 4.0,
            seed,
        };
        let ds = crate::data::synth_generate(&spec).unwrap();
        Shard {
            owner_id: 0,
            source_rows: (0..rows).collect(),
            samples: ds,
        }
    }

    #[test]
    fn aggregate_examples() {
        let l = layout();
        let a = ParameterVector::from_values(l.clone(), vec![0.0; 4]).unwrap();
        let b = ParameterVector::from_values(l.clone(), vec![4.0; 4]).unwrap();
        let avg = fedavg_aggregate(&[(&a, 1), (&b, 3)]).unwrap();
        assert!(avg.values().iter().all(|&v| v == 3.0));
        let same = fedavg_aggregate(&[(&b, 2), (&b, 5), (&b, 1)]).unwrap();
        assert_eq!(same, b);
        assert_eq!(fedavg_aggregate(&[(&a, 7)]).unwrap(), a);
    }

    #[test]
    fn aggregate_errors() {
        let a = ParameterVector::<f64>::zeros(layout());
        let other = ParameterVector::<f64>::zeros(Arc::new(NetworkSpec::new(2, 2).with_hidden(vec![]).layout()));
        assert!(matches!(fedavg_aggregate(&[(&a, 1), (&other, 1)]), Err(Error::LayoutMismatch)));
        assert!(fedavg_aggregate::<f64>(&[]).is_err());
        assert!(fedavg_aggregate(&[(&a, 0)]).is_err());
    }

    #[test]
    fn objective_examples() {
        assert!((federated_objective(&[(0.2, 5), (0.4, 5)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(federated_objective(&[(0.7, 3)]).unwrap(), 0.7);
        assert_eq!(federated_objective(&[(1.0, 1), (0.0, 3)]).unwrap(), 0.25);
        assert!(federated_objective(&[]).is_err());
    }

    #[test]
    fn selection_contract() {
        let ids: Vec<usize> = (0..10).collect();
        let mut all = select_random(&ids, 10, 1).unwrap();
        all.sort();
        assert_eq!(all, ids);
        assert!(select_random(&ids, 0, 1).is_err());
        assert!(select_random(&ids, 11, 1).is_err());
        assert_eq!(select_random(&ids, 3, 9).unwrap(), select_random(&ids, 3, 9).unwrap());
    }

    #[test]
    fn selection_frequency_is_uniform() {
        let ids: Vec<usize> = (0..10).collect();
        let trials = 10_000;
        let mut counts = [0usize; 10];
        for seed in 0..trials {
            for id in select_random(&ids, 3, seed as u64).unwrap() {
                counts[id] += 1;
            }
        }
        let p = 0.3;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "frequency {freq}");
        }
    }

    #[test]
    fn decay_examples() {
        assert!((decay_eta(0.1, 1) - 0.090_909_090_909_090_9).abs() < 1e-15);
        let after3 = (1..=3).fold(0.1, decay_eta);
        assert!((after3 - 0.1 / 1.1f64.powi(3)).abs() < 1e-15);
        assert!((after3 - 0.075_131).abs() < 1e-6);
        let mut eta = 0.1;
        for i in 1..50 {
            let next = decay_eta(eta, i);
            assert!(next < eta);
            eta = next;
        }
    }

    #[test]
    fn zero_rate_local_update_is_identity() {
        let s = shard(40, 1);
        let p: ParameterVector<f64> = init_params(&NetworkSpec::new(3, 2), 2).unwrap();
        let u = local_update(&p, &s, 1, 0.0, 8, 5).unwrap();
        assert_eq!(u.params, p);
        assert!(local_update(&p, &s, 0, 0.1, 8, 5).is_err());
    }

    #[test]
    fn local_updates_compose_with_chained_seeds() {
        let s = shard(40, 1);
        let p: ParameterVector<f64> = init_params(&NetworkSpec::new(3, 2), 2).unwrap();
        let two = local_update(&p, &s, 2, 0.1, 8, 77).unwrap();
        let first = local_update(&p, &s, 1, 0.1, 8, 77).unwrap();
        let second = local_update(&first.params, &s, 1, 0.1, 8, chain_seed(77)).unwrap();
        assert_eq!(two, second);
    }

    #[test]
    fn small_shard_samples_with_replacement() {
        let s = shard(5, 3);
        let p: ParameterVector<f64> = init_params(&NetworkSpec::new(3, 2), 2).unwrap();
        let u = local_update(&p, &s, 3, 0.1, 32, 1).unwrap();
        assert!(u.loss.is_finite());
    }

    #[test]
    fn empty_shard_is_rejected() {
        let s = Shard {
            owner_id: 4,
            samples: shard(4, 1).samples.subset(&[]),
            source_rows: vec![],
        };
        let p: ParameterVector<f64> = init_params(&NetworkSpec::new(3, 2), 2).unwrap();
        let err = local_update(&p, &s, 1, 0.1, 8, 1).unwrap_err();
        assert!(err.to_string().contains("participant 4"));
    }
}
