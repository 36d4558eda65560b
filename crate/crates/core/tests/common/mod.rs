#![allow(dead_code)]

use optosqueeze::params::{ParamsFile, SystemParams};
use proptest::prelude::*;

/// Parameter files spread around the reference point; all of them validate.
pub fn params_file() -> impl Strategy<Value = ParamsFile> {
    (
        0.01f64..0.08,
        150.0f64..500.0,
        20.0f64..400.0,
        0.3f64..1.0,
        1.0f64..100.0,
        1e4f64..2e6,
        prop::bool::ANY,
    )
        .prop_map(|(delta, f_m, q, eta, n_opt, n_th, flip)| {
            let mut f = ParamsFile {
                delta_over_kappa: delta,
                omega_m_hz: Some(f_m),
                q,
                eta,
                optical_n_th: n_opt,
                n_th: Some(n_th),
                ..ParamsFile::default()
            };
            if flip {
                f.g_hz_per_m = -f.g_hz_per_m;
            }
            f
        })
}

pub fn params() -> impl Strategy<Value = SystemParams> {
    params_file().prop_map(|f| SystemParams::from_file(&f).expect("strategy yields valid params"))
}

/// Deterministic list of parameter sets for the slower statistical checks.
pub fn sample_params(n: usize, seed: u64) -> Vec<SystemParams> {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    let rng = TestRng::from_seed(RngAlgorithm::ChaCha, &bytes);
    let mut runner = TestRunner::new_with_rng(Config::default(), rng);
    let strategy = params();
    (0..n)
        .map(|_| strategy.new_tree(&mut runner).unwrap().current())
        .collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
