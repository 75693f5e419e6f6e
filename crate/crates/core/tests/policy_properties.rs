mod common;

use common::*;
use fairfl::policy::{benchmark_policy, bounds, check_constraints, optimal_policy, solve_zhat, utility, zhat_residual, PolicyProblem};
use fairfl::wireless::{rate, round_energy, snr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn power_rate_transform_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let inst = random_policy_instance(&mut rng);
        let pr = inst.problem();
        let p: f64 = rng.random_range(1e-4..1.0);
        let z = pr.z_of_p(p);
        assert!((pr.p_of_z(z) - p).abs() <= 1e-12 * p);
        let direct = rate(inst.profile.bandwidth_hz, snr(p, &inst.channel, inst.profile.distance_m), inst.channel.gap);
        assert!((pr.rate_of_z(z) - direct).abs() <= 1e-12 * direct);
    }
}

#[test]
fn utility_matches_composition_of_energy_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..100 {
        let inst = random_policy_instance(&mut rng);
        let pr = inst.problem();
        let b = bounds(&pr).unwrap();
        let j = rng.random_range(b.j_min..=b.j_max);
        let p = rng.random_range(b.p_min..=b.p_max);
        let e = round_energy(j, p, &inst.profile, &inst.channel, inst.model_bits).unwrap();
        let s = inst.energy_scale;
        let (b1, b2) = (inst.fit.beta1(), inst.fit.beta2());
        let g = s * e.total;
        let expected = b1 - b1 * (-s * e.computation / b2).exp() - g * (g - inst.energy_weight);
        let got = utility(&inst.fit, j as f64, pr.z_of_p(p), &pr).unwrap();
        assert!((got - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{got} vs {expected}");
    }
}

#[test]
fn decisions_satisfy_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let spec = policy_loss_spec();
    for _ in 0..200 {
        let inst = random_policy_instance(&mut rng);
        let pr = inst.problem();
        let b = bounds(&pr).unwrap();
        let opt = optimal_policy(&inst.fit, &pr, &spec).unwrap();
        check_constraints(&opt, &pr, &b).unwrap();
        let bench = benchmark_policy(&pr, &spec).unwrap();
        check_constraints(&bench, &pr, &b).unwrap();
        assert_eq!(bench.power_w, b.p_max);
        assert_eq!(bench.iterations, b.j_max);
    }
}

fn best_utility(inst: &PolicyInstance, pr: &PolicyProblem) -> f64 {
    optimal_policy(&inst.fit, pr, &policy_loss_spec()).unwrap().utility.unwrap()
}

#[test]
fn optimal_utility_monotone_in_power_and_deadline() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..100 {
        let inst = random_policy_instance(&mut rng);
        let base = best_utility(&inst, &inst.problem());
        let tol = 1e-9 * (1.0 + base.abs());

        let mut more_power = inst.profile.clone();
        more_power.max_power_w *= 2.0;
        let pr = PolicyProblem { profile: &more_power, ..inst.problem() };
        assert!(best_utility(&inst, &pr) >= base - tol);

        let pr = PolicyProblem { deadline_s: inst.deadline_s * 1.25, ..inst.problem() };
        assert!(best_utility(&inst, &pr) >= base - tol);
    }
}

#[test]
fn deadline_saturates_while_energy_below_half_weight() {
    // below rho/2 both utility terms grow with energy, so one more iteration
    // must be infeasible or push the energy past rho/2
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let spec = policy_loss_spec();
    let mut active = 0;
    for _ in 0..300 {
        let inst = random_policy_instance(&mut rng);
        let pr = inst.problem();
        let b = bounds(&pr).unwrap();
        let d = optimal_policy(&inst.fit, &pr, &spec).unwrap();
        if d.iterations == b.j_max {
            continue;
        }
        let next = d.iterations + 1;
        let Some(z_next) = pr.z_for_deadline(next as f64).map(|z| z.max(d.z)) else { continue };
        if z_next > b.z_max {
            continue;
        }
        active += 1;
        assert!(scaled_total_energy(&inst, next as f64, z_next) > 0.5 * inst.energy_weight);
    }
    assert!(active > 50, "only {active} instances exercised");
}

#[test]
fn residual_sign_tracks_slope_along_deadline() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut roots = 0;
    for _ in 0..100 {
        let inst = random_policy_instance(&mut rng);
        let pr = inst.problem();
        let b = bounds(&pr).unwrap();
        let along = |z: f64| utility(&inst.fit, pr.j_for_deadline(z), z, &pr).unwrap();
        let z = rng.random_range(b.z_min..b.z_max);
        let h = 1e-6 * z;
        let slope = (along(z + h) - along(z - h)) / (2.0 * h);
        let r = zhat_residual(&inst.fit, z, &pr);
        if slope.abs() > 1e-6 && r.abs() > 1e-6 {
            assert!(slope * r < 0.0, "slope {slope}, residual {r}");
        }
        if let Some(root) = solve_zhat(&inst.fit, &pr, &b).unwrap() {
            if root > b.z_min && root < b.z_max {
                roots += 1;
                let h = 1e-5 * root;
                let slope = (along(root + h) - along(root - h)) / (2.0 * h);
                let scale = (along(root + h) - along(root)).abs().max(1e-12) / h;
                assert!(slope.abs() <= 1e-3 * (1.0 + scale), "slope {slope} at root {root}");
            }
        }
    }
    assert!(roots > 10);
}
