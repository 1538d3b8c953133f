//! Seeded synthetic datasets.
//!
//! `lalonde_like` and `lindner_like` reproduce the group sizes and column
//! layout of the job-training and cardiology studies commonly used for
//! matching benchmarks. The values are drawn from rough marginal
//! distributions, good enough for shape-level tests and demos.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use crate::data::Dataset;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn build(treatment: Vec<bool>, names: &[&str], rows: Vec<Vec<f64>>) -> Dataset {
    let z = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    Dataset::from_columns("treat", treatment, names, z).expect("synthetic dataset is valid")
}

/// `n` rows, `k` standard-normal covariates, `max(2, 2n/5)` treated rows at
/// random positions with a mean shift of 0.5 on every covariate.
pub fn random_dataset(n: usize, k: usize, seed: u64) -> Dataset {
    assert!(n >= 4, "need at least 4 rows");
    let mut r = rng(seed);
    let nt = (2 * n / 5).max(2);
    let mut treatment: Vec<bool> = (0..n).map(|i| i < nt).collect();
    treatment.shuffle(&mut r);
    let rows = (0..n)
        .map(|i| {
            let shift = if treatment[i] { 0.5 } else { 0.0 };
            (0..k).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    build(treatment, &names, rows)
}

/// `n_pairs` treated rows followed by an exact copy of each as a control.
pub fn duplicated_pairs(n_pairs: usize, k: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let base: Vec<Vec<f64>> = (0..n_pairs)
        .map(|_| (0..k).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let rows = base.iter().chain(base.iter()).cloned().collect();
    let treatment = (0..2 * n_pairs).map(|i| i < n_pairs).collect();
    let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    build(treatment, &names, rows)
}

/// Treatment assigned by a logistic model in `k` standard-normal
/// covariates, so the groups are imbalanced but overlap. Redraws until
/// both groups have at least `k + 3` rows.
pub fn confounded(n: usize, k: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    loop {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let treatment: Vec<bool> = rows
            .iter()
            .map(|x| {
                let eta = -0.6
                    + x.iter()
                        .enumerate()
                        .map(|(j, v)| if j % 2 == 0 { 0.8 } else { -0.5 } * v / (1.0 + j as f64 / 2.0))
                        .sum::<f64>();
                r.random_bool(1.0 / (1.0 + (-eta).exp()))
            })
            .collect();
        let nt = treatment.iter().filter(|&&t| t).count();
        if nt >= k + 3 && n - nt >= k + 3 {
            let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            return build(treatment, &names, rows);
        }
    }
}

fn clamp_round(v: f64, lo: f64, hi: f64) -> f64 {
    v.round().clamp(lo, hi)
}

fn earnings(r: &mut ChaCha8Rng, p_zero: f64, mean: f64) -> f64 {
    if r.random_bool(p_zero) {
        0.0
    } else {
        (Exp::new(1.0 / mean).unwrap().sample(r) * 100.0).round() / 100.0
    }
}

fn bit(r: &mut ChaCha8Rng, p: f64) -> f64 {
    if r.random_bool(p) {
        1.0
    } else {
        0.0
    }
}

pub const LALONDE_COLUMNS: [&str; 8] = ["age", "educ", "re74", "re75", "black", "hispan", "married", "nodegree"];
pub const LINDNER_COLUMNS: [&str; 7] = ["height", "ejecfrac", "ves1proc", "stent", "female", "diabetic", "acutemi"];

/// 185 treated and 429 control rows; numeric `age, educ, re74, re75` and
/// binary `black, hispan, married, nodegree`. `black` and `hispan` are
/// mutually exclusive, as in the original study.
pub fn lalonde_like(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(614);
    let mut treatment = Vec::with_capacity(614);
    for i in 0..614 {
        let t = i < 185;
        let (age, educ) = if t {
            (Normal::new(25.8, 7.2).unwrap(), Normal::new(10.3, 2.0).unwrap())
        } else {
            (Normal::new(28.0, 10.8).unwrap(), Normal::new(10.2, 2.9).unwrap())
        };
        let age = clamp_round(age.sample(&mut r), 16.0, 55.0);
        let educ = clamp_round(educ.sample(&mut r), 0.0, 18.0);
        let (pb, ph, pm, pn) = if t { (0.84, 0.35, 0.19, 0.71) } else { (0.2, 0.18, 0.51, 0.6) };
        let (z74, m74, z75, m75) = if t {
            (0.71, 7500.0, 0.6, 4000.0)
        } else {
            (0.26, 7600.0, 0.3, 3900.0)
        };
        let re74 = earnings(&mut r, z74, m74);
        let re75 = earnings(&mut r, z75, m75);
        let black = bit(&mut r, pb);
        let hispan = if black == 1.0 { 0.0 } else { bit(&mut r, ph) };
        let married = bit(&mut r, pm);
        let nodegree = bit(&mut r, pn);
        rows.push(vec![age, educ, re74, re75, black, hispan, married, nodegree]);
        treatment.push(t);
    }
    build(treatment, &LALONDE_COLUMNS, rows)
}

/// 698 treated and 298 control rows; numeric `height, ejecfrac, ves1proc`
/// and binary `stent, female, diabetic, acutemi`.
pub fn lindner_like(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(996);
    let mut treatment = Vec::with_capacity(996);
    let vessels_t = [0.0, 0.52, 0.33, 0.11, 0.03, 0.01];
    let vessels_c = [0.0, 0.62, 0.29, 0.07, 0.015, 0.005];
    for i in 0..996 {
        let t = i < 698;
        let height = clamp_round(Normal::new(if t { 171.4 } else { 171.5 }, 10.7).unwrap().sample(&mut r), 108.0, 196.0);
        let ejecfrac = clamp_round(Normal::new(if t { 50.4 } else { 52.3 }, 10.4).unwrap().sample(&mut r), 18.0, 90.0);
        let probs = if t { &vessels_t } else { &vessels_c };
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut ves = 5.0;
        for (kv, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                ves = kv as f64;
                break;
            }
        }
        let (ps, pf, pd, pa) = if t { (0.70, 0.33, 0.22, 0.18) } else { (0.58, 0.35, 0.22, 0.06) };
        rows.push(vec![height, ejecfrac, ves, bit(&mut r, ps), bit(&mut r, pf), bit(&mut r, pd), bit(&mut r, pa)]);
        treatment.push(t);
    }
    build(treatment, &LINDNER_COLUMNS, rows)
}
