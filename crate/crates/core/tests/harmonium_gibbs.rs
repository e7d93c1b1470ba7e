//! Gibbs-sampling properties of a harmonium small enough to enumerate:
//! one observation unit, two carried units and two hidden units, all binary.

use tlrm::harmonium::{predict_next_batch, EfhParams, UnitKind};
use tlrm::rng::rng_from_seed;

fn toy() -> EfhParams {
    let mut p = EfhParams::recurrent(1, UnitKind::RealBernoulli, 2).unwrap();
    p.w = vec![0.8, -1.1, 0.4, -0.3, 0.9, 1.5];
    p.b_vis = vec![0.2, -0.4, 0.1];
    p.b_hid = vec![-0.3, 0.5];
    p
}

fn bits(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((k >> i) & 1) as f64).collect()
}

fn prob_of(means: &[f64], state: &[f64]) -> f64 {
    means
        .iter()
        .zip(state)
        .map(|(&m, &s)| if s == 1.0 { m } else { 1.0 - m })
        .product()
}

/// Joint `p(v, h)` by brute force over all 32 states, indexed `v + 8 h`.
fn exact_joint(p: &EfhParams) -> Vec<f64> {
    let mut e = vec![0.0; 32];
    for hk in 0..4 {
        let h = bits(hk, 2);
        for vk in 0..8 {
            let v = bits(vk, 3);
            let mut energy = 0.0;
            for j in 0..2 {
                energy += p.b_hid[j] * h[j];
                for i in 0..3 {
                    energy += h[j] * p.w[j * 3 + i] * v[i];
                }
            }
            for i in 0..3 {
                energy += p.b_vis[i] * v[i];
            }
            e[vk + 8 * hk] = energy.exp();
        }
    }
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Transition matrix of one sweep (sample h | v, then v | h), built from
/// the model's own conditionals.
fn sweep_kernel(p: &EfhParams) -> Vec<f64> {
    let mut k = vec![0.0; 32 * 32];
    for from in 0..32 {
        let v = bits(from % 8, 3);
        let hm = p.hidden_means(&v);
        for hk in 0..4 {
            let h = bits(hk, 2);
            let ph = prob_of(&hm, &h);
            let vm = p.visible_means(&h).values;
            for vk in 0..8 {
                k[from * 32 + vk + 8 * hk] += ph * prob_of(&vm, &bits(vk, 3));
            }
        }
    }
    k
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn stationary_distribution_survives_a_million_sweeps() {
    let p = toy();
    let pi = exact_joint(&p);
    let k = sweep_kernel(&p);
    let mut d = pi.clone();
    let mut next = vec![0.0; 32];
    for _ in 0..1_000_000 {
        next.fill(0.0);
        for (i, &di) in d.iter().enumerate() {
            for (j, n) in next.iter_mut().enumerate() {
                *n += di * k[i * 32 + j];
            }
        }
        std::mem::swap(&mut d, &mut next);
    }
    let drift = tv(&d, &pi);
    assert!(drift < 1e-3, "drift {drift}");
}

#[test]
fn sampled_chain_matches_exact_visible_marginal() {
    let p = toy();
    let pi = exact_joint(&p);
    let mut marginal = vec![0.0; 8];
    for (s, q) in pi.iter().enumerate() {
        marginal[s % 8] += q;
    }
    let mut rng = rng_from_seed(11);
    let mut v = vec![0.0; 3];
    let mut counts = vec![0.0; 8];
    let n = 200_000;
    for it in 0..n + 1000 {
        let h = p.sample_hidden(&v, &mut rng);
        v = p.sample_visible(&h, &mut rng);
        if it >= 1000 {
            let k = v.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>();
            counts[k] += 1.0;
        }
    }
    let emp: Vec<f64> = counts.iter().map(|c| c / n as f64).collect();
    assert!(tv(&emp, &marginal) < 0.01, "{emp:?} vs {marginal:?}");
}

#[test]
fn clamped_block_is_bit_identical_after_prediction() {
    let p = toy();
    let mut rng = rng_from_seed(12);
    let z = [0.123456789, 0.987654321, 0.5, 0.25];
    let (_, vis) = predict_next_batch(&p, &z, &[1.0, 0.0], 2, 40, &mut rng).unwrap();
    assert_eq!(&vis[1..3], &z[..2]);
    assert_eq!(&vis[4..6], &z[2..]);
}
