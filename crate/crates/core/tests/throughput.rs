use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soshydro_core::lattice::SlopeConfig;
use soshydro_core::mobility::Mobility;
use soshydro_core::sim::{simulate, Field, SimParams};
use std::time::Instant;

fn time_one(n: usize, mobility: Mobility, label: &str, field: Field, steps: f64) {
    let c_dt = 0.1;
    let params = SimParams {
        n,
        mobility,
        c_dt,
        t_final: steps * c_dt / (n as f64).powi(4),
        record_stride: usize::MAX,
        field,
    };
    let init = SlopeConfig::periodic(vec![0.0; n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let t0 = Instant::now();
    simulate(&init, &params, &mut rng).unwrap();
    let el = t0.elapsed().as_secs_f64();
    println!(
        "N={n:4} {label:14} steps={steps:.0} wall={el:6.2}s  ns per site-step={:6.2}",
        el / (steps * n as f64) * 1e9
    );
}

// Wall-clock probe used to size replica budgets; run manually with
// --ignored --nocapture. No assertions on purpose: timing varies by host.
#[test]
#[ignore]
fn stepper_throughput_probe() {
    let constant = Mobility::constant(1.0).unwrap();
    let bump01 = Mobility::bump(0.1).unwrap();
    let bump03 = Mobility::bump(0.3).unwrap();
    let sine: Vec<f64> = (0..128)
        .map(|i| 2.0 * (2.0 * std::f64::consts::PI * i as f64 / 128.0).sin())
        .collect();
    time_one(128, constant.clone(), "constant", Field::Off, 4e5);
    time_one(128, bump01.clone(), "bump(0.1)", Field::Off, 4e5);
    time_one(128, bump03.clone(), "bump(0.3)", Field::Off, 4e5);
    time_one(128, bump03.clone(), "bump(0.3)+E", Field::Static(sine), 4e5);
    time_one(64, constant.clone(), "constant", Field::Off, 8e5);
    time_one(64, bump03, "bump(0.3)", Field::Off, 8e5);
    time_one(32, constant, "constant", Field::Off, 1.6e6);
}
