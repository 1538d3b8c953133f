//! Instance generators and independent oracles shared by the integration
//! tests. The oracles use dense linear algebra or literal re-implementations
//! and never call into the closed-form code paths.
#![allow(dead_code)]

use matchcal::{ColumnKind, ColumnMeta, Dataset, DesignPartition};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn numeric_meta(k: usize) -> Vec<ColumnMeta> {
    (0..k)
        .map(|j| ColumnMeta {
            name: format!("z{j}"),
            kind: ColumnKind::Numeric,
            term: None,
        })
        .collect()
}

/// A random instance: dataset plus partition.
pub struct Instance {
    pub d: Dataset,
    pub part: DesignPartition,
    pub gamma_o: Vec<f64>,
}

/// `N ≤ n_max`, `Kⁱ ≤ ki_max`, `1 ≤ Kᵒ ≤ 3`, columns scaled and shifted at
/// random, treated rows shifted so groups are imbalanced.
pub fn random_instance(r: &mut ChaCha8Rng, n_max: usize, ki_max: usize) -> Instance {
    let ki = r.random_range(0..=ki_max);
    let ko = r.random_range(1..=3);
    let k = ki + ko;
    let n = r.random_range((k + 8).max(10)..=n_max.max(k + 8));
    let nt = r.random_range(3..=n - 3);
    let mut treatment: Vec<bool> = (0..n).map(|i| i < nt).collect();
    treatment.shuffle(r);
    let scales: Vec<f64> = (0..k).map(|_| r.random_range(0.1..10.0)).collect();
    let offsets: Vec<f64> = (0..k).map(|_| r.random_range(-5.0..5.0)).collect();
    let shifts: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
    let z = DMatrix::from_fn(n, k, |i, j| {
        let e: f64 = r.sample(StandardNormal);
        offsets[j] + scales[j] * (e + if treatment[i] { shifts[j] } else { 0.0 })
    });
    let d = Dataset::new("w", treatment, z, numeric_meta(k)).unwrap();
    let part = DesignPartition::new((0..ki).collect(), (ki..k).collect());
    let gamma_o = (0..ko).map(|_| r.random_range(-3.0..3.0)).collect();
    Instance { d, part, gamma_o }
}

/// Treated rows followed by exact copies as controls: `d = 0` for every column.
pub fn perfectly_matched(r: &mut ChaCha8Rng, n_max: usize, ki_max: usize) -> Instance {
    let ki = r.random_range(0..=ki_max);
    let ko = r.random_range(1..=3);
    let k = ki + ko;
    let pairs = r.random_range((k + 4).max(5)..=(n_max / 2).max(k + 4));
    let base = DMatrix::from_fn(pairs, k, |_, _| r.sample::<f64, _>(StandardNormal) * 3.0);
    let z = DMatrix::from_fn(2 * pairs, k, |i, j| base[(i % pairs, j)]);
    let treatment = (0..2 * pairs).map(|i| i < pairs).collect();
    let d = Dataset::new("w", treatment, z, numeric_meta(k)).unwrap();
    let part = DesignPartition::new((0..ki).collect(), (ki..k).collect());
    let gamma_o = (0..ko).map(|_| r.random_range(-3.0..3.0)).collect();
    Instance { d, part, gamma_o }
}

/// Dense `(XⁱᵗXⁱ)⁻¹`.
pub fn dense_inverse(d: &Dataset, part: &DesignPartition) -> DMatrix<f64> {
    let x = part.design_matrix(d);
    (x.transpose() * &x).try_inverse().expect("invertible Gram matrix")
}

/// First element of the OLS coefficient vector for regressing `target` on
/// `Xⁱ`, by a dense LU solve of the normal equations.
pub fn ols_first(d: &Dataset, part: &DesignPartition, target: &DVector<f64>) -> f64 {
    let x = part.design_matrix(d);
    (x.transpose() * &x).lu().solve(&(x.transpose() * target)).unwrap()[0]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

const TIE_RTOL: f64 = 1e-10;

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_RTOL * a.abs().max(b.abs())
}

/// Literal greedy matcher: repeatedly take the highest-key unvisited
/// treated unit and give it the closest unused control if within
/// `max_distance`. Values within a relative 1e-10 are ties, resolved to
/// the lowest index.
pub fn brute_greedy(
    treatment: &[bool],
    key: &dyn Fn(usize) -> f64,
    dist: &dyn Fn(usize, usize) -> f64,
    max_distance: Option<f64>,
) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut remaining: Vec<usize> = (0..treatment.len()).filter(|&i| treatment[i]).collect();
    let mut free: Vec<usize> = (0..treatment.len()).filter(|&i| !treatment[i]).collect();
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    while !remaining.is_empty() {
        let top = remaining.iter().map(|&t| key(t)).fold(f64::NEG_INFINITY, f64::max);
        let t = *remaining.iter().filter(|&&t| tied(key(t), top) || key(t) == top).min().unwrap();
        remaining.retain(|&x| x != t);
        let best = free.iter().map(|&c| dist(t, c)).fold(f64::INFINITY, f64::min);
        let chosen = free.iter().copied().filter(|&c| dist(t, c) == best || tied(dist(t, c), best)).min();
        match chosen {
            Some(c) if max_distance.is_none_or(|m| best <= m || tied(best, m)) => {
                free.retain(|&x| x != c);
                pairs.push((t, c));
            }
            _ => dropped.push(t),
        }
    }
    (pairs, dropped)
}

pub fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}
