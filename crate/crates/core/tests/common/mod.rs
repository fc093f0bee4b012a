#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use fedsa_core::experiment::{parse_config, Overrides, ParsedConfig};
use fedsa_core::nn::{backward, cross_entropy, forward, init_params, Batch, NetworkSpec, ParameterVector};
use fedsa_core::seed::rng_from;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Synthetic reference setup: 10 features, 4,000 samples, 20 participants
/// with 6 selected per round.
pub fn reference_config(driver: &str, seed: u64, extra: &str) -> ParsedConfig {
    let text = format!(
        r#"
driver = "{driver}"
seed = {seed}

[data.synthetic]
n_samples = 4000
n_features = 10
class_ratio = 0.5
separation = 6.0

[federation]
n_participants = 20
subset_size = 6
batch_size = 32

[fedavg]
tau = 10
eta0 = 0.1
rounds = 30

[fedsa]
epochs = 15
{extra}
"#
    );
    parse_config(&text, None, &Overrides::default()).expect("reference config parses")
}

fn loss_at(params: &ParameterVector<f64>, batch: &Batch<f64>) -> f64 {
    cross_entropy(&forward(params, batch).unwrap(), batch.labels())
}

fn central_difference(params: &ParameterVector<f64>, batch: &Batch<f64>, coord: usize) -> f64 {
    let mut plus = params.clone();
    plus.values_mut()[coord] += FD_STEP;
    let mut minus = params.clone();
    minus.values_mut()[coord] -= FD_STEP;
    (loss_at(&plus, batch) - loss_at(&minus, batch)) / (2.0 * FD_STEP)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_batch(rows: usize, width: usize, classes: usize, seed: u64) -> Batch<f64> {
    let mut rng = rng_from(seed);
    let features = (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, width, labels).unwrap()
}

/// Compares `per_layer` random coordinates of each layer against central
/// differences on a 5-sample batch. Returns the worst relative error and the
/// number of coordinates checked.
pub fn worst_gradient_error(spec: &NetworkSpec, seed: u64, per_layer: usize) -> (f64, usize) {
    let mut params: ParameterVector<f64> = init_params(spec, seed).unwrap();
    // Non-zero biases so that every coordinate is exercised.
    let mut rng = rng_from(seed ^ 0xabc);
    for v in params.values_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let batch = random_batch(5, spec.input_dim, spec.output_dim, seed + 1);
    let grad = backward(&params, &batch).unwrap();
    let layout = params.layout().clone();
    let offsets = layout.offsets();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (layer, shape) in layout.layers.iter().enumerate() {
        let count = shape.param_count();
        for i in index::sample(&mut rng, count, per_layer.min(count)) {
            let coord = offsets[layer] + i;
            let numeric = central_difference(&params, &batch, coord);
            worst = worst.max(relative_error(grad.values()[coord], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Header in the CICIDS2017 MachineLearningCVE layout (leading spaces kept).
const FIXTURE_FEATURES: [&str; 12] = [
    " Flow Duration",
    " Total Fwd Packets",
    " Total Backward Packets",
    "Total Length of Fwd Packets",
    " Fwd Packet Length Max",
    " Fwd Packet Length Mean",
    "Flow Bytes/s",
    " Flow Packets/s",
    " Flow IAT Mean",
    " Packet Length Variance",
    " Average Packet Size",
    "Init_Win_bytes_forward",
];

/// Writes a CICIDS-format CSV: identifier and port columns, twelve flow
/// features, a `Label` column with BENIGN and attack names, occasional
/// `Infinity` / `NaN` cells. Returns the number of rows whose cells are all
/// finite.
pub fn write_cicids_fixture(path: &Path, rows: usize, seed: u64) -> usize {
    let mut rng = rng_from(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut text = String::from("Flow ID, Source IP, Source Port, Destination IP, Destination Port, Protocol, Timestamp");
    for name in FIXTURE_FEATURES {
        write!(text, ",{name}").unwrap();
    }
    text.push_str(", Label\n");
    let attacks = ["DDoS", "PortScan", "DoS Hulk"];
    let mut clean = 0;
    for r in 0..rows {
        let attack = rng.random_bool(0.4);
        let label = if attack { attacks[r % attacks.len()] } else { "BENIGN" };
        write!(
            text,
            "192.168.10.{a}-8.8.8.8-{p}-53-17,192.168.10.{a},{p},8.8.8.8,{dp},{proto},7/7/2017 3:{m:02}",
            a = r % 250,
            p = 40000 + r % 20000,
            dp = if attack { 80 } else { 53 },
            proto = if attack { 6 } else { 17 },
            m = r % 60
        )
        .unwrap();
        let broken = r % 97 == 13;
        for (j, _) in FIXTURE_FEATURES.iter().enumerate() {
            let shift = if attack { 3.0 } else { 0.0 };
            let v: f64 = (noise.sample(&mut rng) + shift) * (1.0 + j as f64) * 100.0;
            if broken && j == 6 {
                text.push_str(if r % 2 == 0 { ",Infinity" } else { ",NaN" });
            } else {
                write!(text, ",{v:.3}").unwrap();
            }
        }
        writeln!(text, ",{label}").unwrap();
        if !broken {
            clean += 1;
        }
    }
    std::fs::write(path, text).unwrap();
    clean
}

/// Config for the CICIDS-format fixture with the given federation shape.
pub fn cicids_config(csv: &Path, driver: &str, n_participants: usize, subset: usize, extra: &str) -> ParsedConfig {
    let text = format!(
        r#"
driver = "{driver}"
seed = 5

[data.csv]
paths = ["{}"]

[federation]
n_participants = {n_participants}
subset_size = {subset}

[fedavg]
rounds = 8

[fedsa]
epochs = 4
{extra}
"#,
        csv.display()
    );
    parse_config(&text, None, &Overrides::default()).expect("fixture config parses")
}
