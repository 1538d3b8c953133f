mod common;

use common::*;
use matchcal::calibration::{normalized_mse, power_mc, PowerConfig, PowerMode};
use matchcal::error_engine::{g_vector, te_bias, te_variance};
use matchcal::linalg::{balance_summary, inverse_first_block, project};
use matchcal::matching::{match_caliper, Caliper};
use matchcal::omitted_bias::relative_squared_bias_reduction;
use matchcal::{BiasMethod, Dataset, DesignPartition, OmittedBiasAnalysis};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(128)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn scatter_equals_expanded_form(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed), 50, 6);
        prop_assume!(inst.part.k_included() > 0);
        let s = balance_summary(&inst.d, &inst.part).unwrap();
        let z = inst.part.included_matrix(&inst.d);
        let (nt, nc) = (s.n_treated as f64, s.n_control as f64);
        let (p, q) = (&s.p, &s.q);
        let direct = z.transpose() * &z + p * q.transpose() / nc - p * p.transpose() * (1.0 / nt + 1.0 / nc)
            + q * p.transpose() / nc - q * q.transpose() / nc;
        prop_assert!((&direct - &s.a).abs().max() <= 1e-9 * s.a.abs().max());
        prop_assert!((&s.a - s.a.transpose()).abs().max() == 0.0);
        prop_assert!(s.rho_i.iter().chain(s.rho_o.iter()).all(|r| r.abs() <= 1.0));
    }

    #[test]
    fn bias_is_linear(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 50, 6);
        let ko = inst.part.k_omitted();
        let g1: Vec<f64> = (0..ko).map(|_| r.random_range(-2.0..2.0)).collect();
        let g2: Vec<f64> = (0..ko).map(|_| r.random_range(-2.0..2.0)).collect();
        let comb: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + b).collect();
        let b1 = te_bias(&inst.d, &inst.part, &g1).unwrap();
        let b2 = te_bias(&inst.d, &inst.part, &g2).unwrap();
        let lhs = te_bias(&inst.d, &inst.part, &comb).unwrap();
        // rounding in gᵗZᵒγ scales with the magnitude of the summed terms
        let g = g_vector(&inst.d, &inst.part).unwrap().abs();
        let zo = inst.part.omitted_matrix(&inst.d).abs();
        let mag = |gamma: &[f64]| g.dot(&(&zo * DVector::from_column_slice(gamma).abs()));
        let scale = alpha.abs() * mag(&g1) + mag(&g2);
        prop_assert!((lhs - (alpha * b1 + b2)).abs() <= 1e-12 * scale);
    }

    #[test]
    fn first_block_variance_positive(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed), 50, 6);
        prop_assert!(inverse_first_block(&inst.d, &inst.part).unwrap().a > 0.0);
    }

    #[test]
    fn projection_reconstructs(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(3..40);
        let m = r.random_range(1..6);
        let basis = DMatrix::from_fn(n, m, |_, _| r.random_range(-2.0..2.0));
        let target = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
        let p = project(&target, &basis).unwrap();
        prop_assert!((&p.parallel + &p.orthogonal - &target).norm() <= 1e-12 * target.norm());
    }

    #[test]
    fn estimators_are_nested(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed), 50, 6);
        let agg = OmittedBiasAnalysis::new(&inst.d, &inst.part).unwrap().aggregate(None).unwrap();
        let tol = 1e-12 * agg.absolute_max;
        prop_assert!(agg.single_max <= agg.subspace_max + tol);
        prop_assert!(agg.subspace_max <= agg.absolute_max + tol);
    }

    #[test]
    fn reduction_ignores_term_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let inst = random_instance(&mut rng(seed), 50, 4);
        let (d, part) = (&inst.d, &inst.part);
        let scores = d.column(part.omitted[0]);
        let Ok(m) = match_caliper(&scores, d, Some(Caliper::sd(0.5))) else { return Ok(()) };
        let Ok(base) = relative_squared_bias_reduction(d, part, 0, &m) else { return Ok(()) };
        let mut z = d.covariates().clone();
        let c = part.omitted[0];
        let col = z.column(c) * scale;
        z.set_column(c, &col);
        let scaled = Dataset::new("w", d.treatment().to_vec(), z, d.columns().to_vec()).unwrap();
        let again = relative_squared_bias_reduction(&scaled, part, 0, &m).unwrap();
        prop_assert!((base - again).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn mse_affine_in_r_o_sq(seed in any::<u64>(), r1 in 0.0f64..10.0, r2 in 0.0f64..10.0) {
        let inst = random_instance(&mut rng(seed), 50, 4);
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let a = normalized_mse(&inst.d, &inst.part, None, lo, BiasMethod::Subspace).unwrap();
        let b = normalized_mse(&inst.d, &inst.part, None, hi, BiasMethod::Subspace).unwrap();
        prop_assert_eq!(a.normalized_variance, b.normalized_variance);
        prop_assert_eq!(a.normalized_sq_bias, b.normalized_sq_bias);
        if a.normalized_sq_bias > 0.0 && hi > lo {
            prop_assert!(b.normalized_mse > a.normalized_mse);
        }
    }

    #[test]
    fn matching_invariants(seed in any::<u64>(), width in 0.01f64..2.0) {
        let inst = random_instance(&mut rng(seed), 50, 4);
        let d = &inst.d;
        let scores = d.column(0);
        let sd = sample_sd(scores.as_slice());
        let Ok(m) = match_caliper(&scores, d, Some(Caliper::sd(width))) else { return Ok(()) };
        let mut controls: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        controls.sort_unstable();
        controls.dedup();
        prop_assert_eq!(controls.len(), m.pairs.len());
        for &(t, c) in &m.pairs {
            prop_assert!(d.treatment()[t] && !d.treatment()[c]);
            prop_assert!((scores[t] - scores[c]).abs() <= width * sd * (1.0 + 1e-10));
        }
        let mut union: Vec<usize> = m.pairs.iter().flat_map(|&(t, c)| [t, c]).collect();
        union.sort_unstable();
        prop_assert_eq!(&union, &m.retained);
        prop_assert_eq!(m.pairs.len() + m.dropped_treated.len(), d.n_treated());
        let again = match_caliper(&scores, d, Some(Caliper::sd(width))).unwrap();
        prop_assert_eq!(serde_json::to_string(&m).unwrap(), serde_json::to_string(&again).unwrap());

        // variance bound on the matched subset
        if let Ok(sub) = d.subset(&m.retained) {
            if let Ok(v) = te_variance(&sub, &inst.part, 1.0) {
                let lb = 1.0 / sub.n_treated() as f64 + 1.0 / sub.n_control() as f64;
                prop_assert!(v >= lb * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn g_annihilates_design(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed), 50, 6);
        let g = g_vector(&inst.d, &inst.part).unwrap();
        let scale = g.norm() * (inst.d.n() as f64).sqrt();
        prop_assert!(g.sum().abs() <= 1e-10 * scale);
        prop_assert!((g.dot(&inst.d.w()) - 1.0).abs() <= 1e-10);
        for &c in &inst.part.included {
            let z = inst.d.column(c);
            prop_assert!(g.dot(&z).abs() <= 1e-10 * g.norm() * z.norm());
        }
    }
}

#[test]
fn power_is_schedule_independent() {
    let d = matchcal::synth::random_dataset(80, 2, 4);
    let part = DesignPartition::new(vec![0, 1], vec![]);
    let cfg = PowerConfig {
        effect_size: 0.4,
        alpha: 0.05,
        iterations: 400,
        seed: 17,
        gamma_included: vec![1.0, 1.0],
        gamma_omitted: vec![],
    };
    let rows: Vec<usize> = (0..60).collect();
    let run = |threads: usize, mode: PowerMode| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| power_mc(&d, &part, &rows, mode, &cfg).unwrap())
    };
    for mode in [PowerMode::Matched, PowerMode::Random] {
        assert_eq!(run(1, mode), run(4, mode));
    }
}
