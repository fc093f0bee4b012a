//! Pooled-data baseline: one model trained on the whole training split.
//!
//! Progress is reported in blocks of `tau` mini-batch steps so that block `b`
//! lines up with federated round `b`. The learning rate follows the same
//! per-block decay as FedAvg.

use crate::data::Dataset;
use crate::error::Result;
use crate::federation::{decay_eta, evaluate_record, train_steps, DriverRun, FedAvgConfig};
use crate::metrics::{Phase, RoundRecord, SolutionSnapshot};
use crate::nn::ParameterVector;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, STREAM_CENTRAL};

pub fn run_centralized<T: Scalar>(
    train: &Dataset<T>,
    validation: &Dataset<T>,
    cfg: &FedAvgConfig,
    batch_size: usize,
    seed: u64,
    initial: ParameterVector<T>,
) -> Result<DriverRun<T>> {
    run_centralized_with(train, validation, cfg, batch_size, seed, initial, &mut |_| Ok(()))
}

pub fn run_centralized_with<T: Scalar>(
    train: &Dataset<T>,
    validation: &Dataset<T>,
    cfg: &FedAvgConfig,
    batch_size: usize,
    seed: u64,
    initial: ParameterVector<T>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<DriverRun<T>> {
    cfg.validate()?;
    let mut params = initial;
    let mut eta = cfg.eta0;
    let mut records = Vec::with_capacity(cfg.rounds);
    for block in 1..=cfg.rounds {
        let step_seed = derive_seed(seed, &[STREAM_CENTRAL, block as u64]);
        let update = train_steps(&params, &train.samples, cfg.tau, T::of(eta), batch_size, step_seed)?;
        params = update.params;
        let mut record = evaluate_record(&params, validation, block, Phase::Centralized)?;
        record.solution = Some(SolutionSnapshot {
            tau: cfg.tau,
            eta,
            participants: Vec::new(),
        });
        sink(&record)?;
        records.push(record);
        eta = decay_eta(eta, block);
    }
    Ok(DriverRun {
        records,
        final_params: params,
    })
}
