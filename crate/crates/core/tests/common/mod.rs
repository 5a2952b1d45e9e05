#![allow(dead_code)]

use simlink::channel::ChannelRealization;
use simlink::config::RunConfig;
use simlink::emnn::{random_bits, EmnnModel};
use simlink::evaluator::untrained_model;
use simlink::metasurface::Polarization;
use simlink::wavemath::{RMat, RngStreams};

/// Built-in defaults with `key=value` overrides applied.
pub fn config(overrides: &[&str]) -> RunConfig {
    let base = RunConfig::default().to_toml().unwrap();
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml(&base, "test", &sets).unwrap()
}

/// Small devices on both families; `users` users at distinct positions.
pub fn small_config(users: usize, bits: usize, subcarriers: usize) -> RunConfig {
    let positions: Vec<String> = (0..users).map(|j| format!("[{}.0, 0.0, 6.0]", 3 + 2 * j)).collect();
    let bit_list = vec![bits.to_string(); users].join(", ");
    config(&[
        &format!("system.subcarriers={subcarriers}"),
        &format!("system.users={users}"),
        &format!("system.user_positions=[{}]", positions.join(", ")),
        &format!("system.bits_per_user=[{bit_list}]"),
        "sim.layers_tx=2",
        "sim.layers_rx=2",
        "sim.units_tx=[3, 3]",
        "sim.units_rx=[3, 3]",
        "sim.antennas_tx=[2, 2]",
        "sim.antennas_rx=[2, 1]",
        "dpsim.layers_tx=2",
        "dpsim.layers_rx=2",
        "dpsim.units_tx=[3, 3]",
        "dpsim.units_rx=[3, 3]",
        "dpsim.antennas_tx=[2, 1]",
        "dpsim.antennas_rx=[1, 1]",
    ])
}

pub fn model_and_channel(cfg: &RunConfig, mode: Polarization, seed: u64) -> (EmnnModel, ChannelRealization) {
    let model = untrained_model(cfg, mode).unwrap();
    let ch = cfg.channel_spec(mode).realization(&RngStreams::new(seed), 0).unwrap();
    (model, ch)
}

/// Random bit rows without the all-zero vector, which maps to silence at initialisation.
pub fn nonzero_bits(rows: usize, bits: usize, seed: u64) -> RMat {
    let mut rng = RngStreams::new(seed).stream("bits", 0);
    let mut m = random_bits(rows, bits, &mut rng);
    for r in 0..rows {
        while m.row(r).iter().all(|&b| b == 0.0) {
            let fresh = random_bits(1, bits, &mut rng);
            m.row_mut(r).copy_from_slice(fresh.row(0));
        }
    }
    m
}
