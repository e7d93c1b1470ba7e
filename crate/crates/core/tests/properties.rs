//! Physics and codec properties of the two data generators.

use proptest::prelude::*;
use tlrm::balls::{initial_state, rasterize, simulate_balls, step, BallWorld};
use tlrm::kalman::to_pseudo_obs;
use tlrm::ppc::{emit_spikes, PopulationCode};
use tlrm::rng::rng_from_seed;

fn world() -> BallWorld {
    BallWorld::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn kinetic_energy_and_speeds_survive_ten_thousand_steps(seed in any::<u64>()) {
        let w = world();
        let mut s = initial_state(&w, &mut rng_from_seed(seed)).unwrap();
        let e0 = s.kinetic_energy();
        let speeds0: Vec<f64> = s.velocities.iter().map(|v| v[0].hypot(v[1])).collect();
        for _ in 0..10_000 {
            step(&w, &mut s);
        }
        prop_assert!(((s.kinetic_energy() - e0) / e0).abs() < 1e-9);
        for (v, s0) in s.velocities.iter().zip(&speeds0) {
            prop_assert!((v[0].hypot(v[1]) / s0 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn balls_stay_inside_and_apart(seed in any::<u64>()) {
        let w = world();
        let traj = simulate_balls(&w, 2_000, &mut rng_from_seed(seed)).unwrap();
        let tol = 1e-6 * w.radius;
        for s in &traj {
            for (i, p) in s.positions.iter().enumerate() {
                for k in 0..2 {
                    prop_assert!(p[k] >= w.radius - tol && p[k] <= w.box_size - w.radius + tol);
                }
                for q in &s.positions[i + 1..] {
                    prop_assert!((p[0] - q[0]).hypot(p[1] - q[1]) >= 2.0 * w.radius - tol);
                }
            }
        }
    }

    #[test]
    fn pixels_lie_in_unit_interval(seed in any::<u64>(), res in 8usize..24) {
        let w = world();
        for s in simulate_balls(&w, 50, &mut rng_from_seed(seed)).unwrap() {
            let f = rasterize(&w, &s, res).unwrap();
            prop_assert_eq!(f.len(), res * res);
            prop_assert!(f.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

fn code() -> PopulationCode {
    PopulationCode::tiling(15, -1.0, 1.0, 3.0).unwrap()
}

proptest! {
    #[test]
    fn com_decode_is_exactly_scale_invariant(
        counts in proptest::collection::vec(0u16..200, 15),
        k in 0u32..6,
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let c = code();
        let scaled: Vec<u16> = counts.iter().map(|&x| x << k).collect();
        prop_assert_eq!(c.com_decode(&counts).unwrap(), c.com_decode(&scaled).unwrap());
        let real: Vec<f64> = counts.iter().map(|&x| x as f64 * 0.37).collect();
        let factor = f64::powi(2.0, k as i32 - 3);
        let real_scaled: Vec<f64> = real.iter().map(|x| x * factor).collect();
        prop_assert_eq!(c.com_decode_real(&real).unwrap(), c.com_decode_real(&real_scaled).unwrap());
    }

    #[test]
    fn pseudo_observation_variance_is_width_squared_over_total(
        counts in proptest::collection::vec(0u16..50, 15),
    ) {
        let c = code();
        let total: u32 = counts.iter().map(|&x| x as u32).sum();
        let obs = to_pseudo_obs(&c, &counts);
        if total == 0 {
            prop_assert!(!obs.valid);
        } else {
            prop_assert!(obs.valid);
            prop_assert_eq!(obs.variance, c.sigma_tc * c.sigma_tc / total as f64);
        }
    }
}

#[test]
fn poisson_moments_within_three_standard_errors() {
    let n = 100_000;
    for (i, &rate) in [0.3, 2.0, 7.5, 40.0].iter().enumerate() {
        let mut rng = rng_from_seed(500 + i as u64);
        let draws = emit_spikes(&vec![rate; n], &mut rng).unwrap();
        let x: Vec<f64> = draws.iter().map(|&c| c as f64).collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (rate / n as f64).sqrt();
        // Poisson fourth central moment is rate * (1 + 3 rate).
        let se_var = ((rate + 2.0 * rate * rate) / n as f64).sqrt();
        assert!((mean - rate).abs() < 3.0 * se_mean, "rate {rate}: mean {mean}");
        assert!((var - rate).abs() < 3.0 * se_var, "rate {rate}: variance {var}");
    }
}
