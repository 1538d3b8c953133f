//! Normalized MSE, caliper calibration, Monte-Carlo power and Monte-Carlo
//! verification of the closed forms.
//!
//! The exchange rate between bias and variance is the omitted R²,
//! `R_o² = ‖Z⊥ᵒγᵒ‖²/σ₀²`, measured on the reference (unmatched) sample.
//! With `δⁿ = √N·δ/‖Z⊥ᵒγᵒ‖` this gives
//! `MSE/σ₀² = σ²/σ₀² + R_o²·δⁿ²/N`.
//!
//! Monte-Carlo iterations run in parallel. Iteration `i` draws from a
//! ChaCha8 generator seeded with `seed` on stream `i`, and results are
//! reduced in iteration order, so output does not depend on scheduling.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, DesignPartition, GenerativeModel};
use crate::error::{Error, Result};
use crate::error_engine::{g_vector, te_bias};
use crate::matching::{match_caliper, Caliper, MatchResult};
use crate::ols::OlsDesign;
use crate::omitted_bias::{BiasMethod, OmittedBiasAnalysis};

/// One column of a calibration grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CaliperSetting {
    Width { caliper: Caliper },
    /// Matching with no caliper.
    Unlimited,
    /// No matching: the full sample.
    Unmatched,
}

impl CaliperSetting {
    pub fn label(&self) -> String {
        match self {
            CaliperSetting::Width { caliper } => caliper.width.to_string(),
            CaliperSetting::Unlimited => "unlimited".into(),
            CaliperSetting::Unmatched => "unmatched".into(),
        }
    }

    /// Total order used for ties: finite widths ascending, then the
    /// unlimited caliper, then no matching.
    pub fn rank_key(&self) -> (u8, f64) {
        match self {
            CaliperSetting::Width { caliper } => (0, caliper.width),
            CaliperSetting::Unlimited => (1, 0.0),
            CaliperSetting::Unmatched => (2, 0.0),
        }
    }

    fn matched(&self, d: &Dataset, scores: &DVector<f64>) -> Result<Option<MatchResult>> {
        match self {
            CaliperSetting::Width { caliper } => match_caliper(scores, d, Some(*caliper)).map(Some),
            CaliperSetting::Unlimited => match_caliper(scores, d, None).map(Some),
            CaliperSetting::Unmatched => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub setting: CaliperSetting,
    pub r_o_sq: f64,
    pub normalized_variance: f64,
    pub normalized_sq_bias: f64,
    pub normalized_mse: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalEntry {
    pub r_o_sq: f64,
    pub setting: CaliperSetting,
    pub normalized_mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedSetting {
    pub setting: CaliperSetting,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationCurve {
    pub bias_method: BiasMethod,
    /// Grouped by setting (in rank order), then by `R_o²` in input order.
    pub grid: Vec<GridPoint>,
    pub optimal: Vec<OptimalEntry>,
    pub skipped: Vec<SkippedSetting>,
}

/// Variance and squared-bias components of one matched configuration.
#[derive(Debug, Clone, Copy)]
struct Components {
    normalized_variance: f64,
    normalized_sq_bias: f64,
    n_treated: usize,
    n_control: usize,
}

fn components(
    analysis: &OmittedBiasAnalysis,
    retained: Option<&[usize]>,
    method: BiasMethod,
) -> Result<Components> {
    let d = analysis.reference();
    let part = analysis.partition();
    let (variance, nt, nc) = match retained {
        None => (g_vector(d, part)?.norm_squared(), d.n_treated(), d.n_control()),
        Some(r) => {
            let sub = d.subset(r)?;
            (g_vector(&sub, part)?.norm_squared(), sub.n_treated(), sub.n_control())
        }
    };
    let bias = analysis.aggregate(retained)?.get(method);
    Ok(Components {
        normalized_variance: variance,
        normalized_sq_bias: bias * bias / d.n() as f64,
        n_treated: nt,
        n_control: nc,
    })
}

fn point(setting: CaliperSetting, c: &Components, r_o_sq: f64) -> GridPoint {
    GridPoint {
        setting,
        r_o_sq,
        normalized_variance: c.normalized_variance,
        normalized_sq_bias: c.normalized_sq_bias,
        normalized_mse: c.normalized_variance + r_o_sq * c.normalized_sq_bias,
        n_treated: c.n_treated,
        n_control: c.n_control,
    }
}

fn check_r_o_sq(r: f64) -> Result<()> {
    if r >= 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("omitted R² must be non-negative, got {r}")))
    }
}

/// Normalized MSE of the matched subsample (`None`: the full sample).
pub fn normalized_mse(
    d: &Dataset,
    part: &DesignPartition,
    matched: Option<&MatchResult>,
    r_o_sq: f64,
    bias_method: BiasMethod,
) -> Result<GridPoint> {
    check_r_o_sq(r_o_sq)?;
    let analysis = OmittedBiasAnalysis::new(d, part)?;
    let retained = matched.map(|m| m.retained.as_slice());
    let c = components(&analysis, retained, bias_method)?;
    let setting = match matched {
        None => CaliperSetting::Unmatched,
        Some(m) => match m.caliper {
            Some(caliper) => CaliperSetting::Width { caliper },
            None => CaliperSetting::Unlimited,
        },
    };
    Ok(point(setting, &c, r_o_sq))
}

/// Evaluates every caliper (plus unlimited matching and no matching) at
/// every `R_o²` and picks the minimizer per `R_o²`, breaking ties toward
/// the smallest caliper. Calipers that yield fewer than two pairs or a
/// singular design are skipped and listed in `skipped`.
pub fn calibrate_caliper(
    d: &Dataset,
    part: &DesignPartition,
    scores: &DVector<f64>,
    calipers: &[Caliper],
    r_o_grid: &[f64],
    bias_method: BiasMethod,
) -> Result<CalibrationCurve> {
    if calipers.is_empty() {
        return Err(Error::InvalidArgument("caliper grid must be nonempty".into()));
    }
    let mut settings: Vec<CaliperSetting> = calipers.iter().map(|&caliper| CaliperSetting::Width { caliper }).collect();
    settings.push(CaliperSetting::Unlimited);
    settings.push(CaliperSetting::Unmatched);
    calibrate_settings(d, part, scores, &settings, r_o_grid, bias_method)
}

/// [`calibrate_caliper`] over an explicit list of settings, without the
/// implicit unlimited and unmatched entries.
pub fn calibrate_settings(
    d: &Dataset,
    part: &DesignPartition,
    scores: &DVector<f64>,
    settings: &[CaliperSetting],
    r_o_grid: &[f64],
    bias_method: BiasMethod,
) -> Result<CalibrationCurve> {
    if settings.is_empty() || r_o_grid.is_empty() {
        return Err(Error::InvalidArgument("caliper and R_o² grids must be nonempty".into()));
    }
    for &r in r_o_grid {
        check_r_o_sq(r)?;
    }
    let mut settings = settings.to_vec();
    settings.sort_by(|a, b| {
        let (ka, kb) = (a.rank_key(), b.rank_key());
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    settings.dedup();

    let analysis = OmittedBiasAnalysis::new(d, part)?;
    let evaluated: Vec<(CaliperSetting, Result<Components>)> = settings
        .par_iter()
        .map(|s| {
            let res = s.matched(d, scores).and_then(|m| match m {
                Some(m) if m.n_pairs() < 2 => Err(Error::Infeasible(format!("{} pair(s)", m.n_pairs()))),
                Some(m) => components(&analysis, Some(&m.retained), bias_method),
                None => components(&analysis, None, bias_method),
            });
            (*s, res)
        })
        .collect();

    let mut feasible = Vec::new();
    let mut skipped = Vec::new();
    for (s, res) in evaluated {
        match res {
            Ok(c) => feasible.push((s, c)),
            Err(e) => skipped.push(SkippedSetting {
                setting: s,
                reason: e.to_string(),
            }),
        }
    }
    if feasible.is_empty() {
        return Err(Error::Infeasible("every caliper setting failed".into()));
    }

    let mut grid = Vec::with_capacity(feasible.len() * r_o_grid.len());
    for (s, c) in &feasible {
        for &r in r_o_grid {
            grid.push(point(*s, c, r));
        }
    }
    let optimal = r_o_grid
        .iter()
        .enumerate()
        .map(|(ri, &r)| {
            let mut best: Option<&GridPoint> = None;
            for p in grid.iter().skip(ri).step_by(r_o_grid.len()) {
                if best.is_none_or(|b| p.normalized_mse < b.normalized_mse) {
                    best = Some(p);
                }
            }
            let b = best.expect("grid is nonempty");
            OptimalEntry {
                r_o_sq: r,
                setting: b.setting,
                normalized_mse: b.normalized_mse,
            }
        })
        .collect();
    Ok(CalibrationCurve {
        bias_method,
        grid,
        optimal,
        skipped,
    })
}

/// Whether the optimal setting never moves toward looser calipers as
/// `R_o²` grows (the grid must be ascending in `R_o²`).
pub fn optimal_is_nonincreasing(curve: &CalibrationCurve) -> bool {
    curve.optimal.windows(2).all(|w| {
        let (a, b) = (w[0].setting.rank_key(), w[1].setting.rank_key());
        b.0 < a.0 || (b.0 == a.0 && b.1 <= a.1)
    })
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn add_noise(y: &mut DVector<f64>, sd: f64, rng: &mut ChaCha8Rng) {
    for v in y.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sd * e;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerMode {
    /// Simulate on the given retained rows.
    Matched,
    /// Each iteration draws a uniform subsample with the same group sizes.
    Random,
}

/// Simulation settings for power analysis. Noise SD is 1, so the effect
/// size is the TE itself.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct PowerConfig {
    pub effect_size: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub seed: u64,
    pub gamma_included: Vec<f64>,
    pub gamma_omitted: Vec<f64>,
}

impl PowerConfig {
    fn validate(&self, part: &DesignPartition) -> Result<()> {
        if self.iterations < 100 {
            return Err(Error::InvalidArgument(format!("power needs at least 100 iterations, got {}", self.iterations)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        self.model().validate(part)
    }

    fn model(&self) -> GenerativeModel {
        GenerativeModel {
            tau: self.effect_size,
            intercept: 0.0,
            gamma_included: self.gamma_included.clone(),
            gamma_omitted: self.gamma_omitted.clone(),
            noise_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerEstimate {
    pub power: f64,
    /// `√(p(1−p)/iterations)`
    pub mc_se: f64,
    pub rejections: usize,
    pub iterations: usize,
    pub n_treated: usize,
    pub n_control: usize,
}

fn estimate(rejections: usize, iterations: usize, nt: usize, nc: usize) -> PowerEstimate {
    let power = rejections as f64 / iterations as f64;
    PowerEstimate {
        power,
        mc_se: (power * (1.0 - power) / iterations as f64).sqrt(),
        rejections,
        iterations,
        n_treated: nt,
        n_control: nc,
    }
}

fn rejects(design: &OlsDesign, y: &DVector<f64>, alpha: f64) -> bool {
    let fit = design.fit(y);
    let t = StudentsT::new(0.0, 1.0, fit.df as f64).expect("positive degrees of freedom");
    let crit = t.inverse_cdf(1.0 - alpha / 2.0);
    (fit.tau_hat / fit.std_err).abs() > crit
}

/// Monte-Carlo power of the two-sided t-test on `τ̂` for the rows
/// `retained` of `d` (or for random subsamples of the same group sizes).
pub fn power_mc(
    d: &Dataset,
    part: &DesignPartition,
    retained: &[usize],
    mode: PowerMode,
    cfg: &PowerConfig,
) -> Result<PowerEstimate> {
    part.validate(d)?;
    cfg.validate(part)?;
    let sub = d.subset(retained)?;
    let (nt, nc) = (sub.n_treated(), sub.n_control());
    if sub.n() <= part.k_included() + 2 {
        return Err(Error::InsufficientGroup {
            n_treated: nt,
            n_control: nc,
            required: part.k_included() / 2 + 2,
        });
    }
    let gm = cfg.model();
    let count = match mode {
        PowerMode::Matched => {
            let design = OlsDesign::new(&part.design_matrix(&sub))?;
            let mean = gm.mean_outcome(&sub, part)?;
            (0..cfg.iterations)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(cfg.seed, i as u64);
                    let mut y = mean.clone();
                    add_noise(&mut y, 1.0, &mut rng);
                    rejects(&design, &y, cfg.alpha)
                })
                .collect::<Vec<bool>>()
        }
        PowerMode::Random => {
            let treated = d.treated_rows();
            let controls = d.control_rows();
            let results: Vec<Result<bool>> = (0..cfg.iterations)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(cfg.seed, i as u64);
                    // a draw with a constant column is rejected and redrawn
                    for _ in 0..100 {
                        let mut rows: Vec<usize> = sample(&mut rng, treated.len(), nt).iter().map(|k| treated[k]).collect();
                        rows.extend(sample(&mut rng, controls.len(), nc).iter().map(|k| controls[k]));
                        rows.sort_unstable();
                        let s = d.subset(&rows)?;
                        let design = match OlsDesign::new(&part.design_matrix(&s)) {
                            Ok(x) => x,
                            Err(Error::SingularDesign { .. }) => continue,
                            Err(e) => return Err(e),
                        };
                        let mut y = gm.mean_outcome(&s, part)?;
                        add_noise(&mut y, 1.0, &mut rng);
                        return Ok(rejects(&design, &y, cfg.alpha));
                    }
                    Err(Error::Infeasible("random subsamples keep producing singular designs".into()))
                })
                .collect();
            results.into_iter().collect::<Result<Vec<bool>>>()?
        }
    };
    Ok(estimate(count.iter().filter(|&&r| r).count(), cfg.iterations, nt, nc))
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerRow {
    pub setting: CaliperSetting,
    pub matched: PowerEstimate,
    pub random: PowerEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerReport {
    pub effect_size: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub seed: u64,
    pub rows: Vec<PowerRow>,
    pub skipped: Vec<SkippedSetting>,
}

/// Matched and random-subsample power for every caliper. The same seed is
/// used for every row, so rows differ only through the subsample.
pub fn power_curve(
    d: &Dataset,
    part: &DesignPartition,
    scores: &DVector<f64>,
    calipers: &[Caliper],
    cfg: &PowerConfig,
) -> Result<PowerReport> {
    let mut settings: Vec<CaliperSetting> = calipers.iter().map(|&caliper| CaliperSetting::Width { caliper }).collect();
    settings.push(CaliperSetting::Unlimited);
    power_settings(d, part, scores, &settings, cfg)
}

/// [`power_curve`] over an explicit list of settings. `Unmatched` uses
/// every row; its random estimate draws the same rows under a different
/// stream, so the two differ only by Monte-Carlo noise.
pub fn power_settings(
    d: &Dataset,
    part: &DesignPartition,
    scores: &DVector<f64>,
    settings: &[CaliperSetting],
    cfg: &PowerConfig,
) -> Result<PowerReport> {
    cfg.validate(part)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &s in settings {
        let outcome = s.matched(d, scores).and_then(|m| {
            let retained = m.map_or_else(|| (0..d.n()).collect(), |m| m.retained);
            let matched = power_mc(d, part, &retained, PowerMode::Matched, cfg)?;
            let random = power_mc(d, part, &retained, PowerMode::Random, cfg)?;
            Ok(PowerRow {
                setting: s,
                matched,
                random,
            })
        });
        match outcome {
            Ok(r) => rows.push(r),
            Err(e) => skipped.push(SkippedSetting {
                setting: s,
                reason: e.to_string(),
            }),
        }
    }
    if rows.is_empty() {
        return Err(Error::Infeasible("no caliper produced a usable subsample".into()));
    }
    Ok(PowerReport {
        effect_size: cfg.effect_size,
        alpha: cfg.alpha,
        iterations: cfg.iterations,
        seed: cfg.seed,
        rows,
        skipped,
    })
}

/// Closed-form TE bias and variance next to their Monte-Carlo estimates.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyRecord {
    pub iterations: usize,
    pub seed: u64,
    pub tau: f64,
    pub closed_bias: f64,
    pub closed_variance: f64,
    pub empirical_bias: f64,
    pub empirical_variance: f64,
    pub bias_se: f64,
    pub variance_se: f64,
    pub bias_z: f64,
    pub variance_z: f64,
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Simulates outcomes from `gm`, refits OLS each time with an independent
/// QR solve, and compares the moments of `τ̂` with the closed forms.
pub fn mc_verify(
    d: &Dataset,
    part: &DesignPartition,
    gm: &GenerativeModel,
    iterations: usize,
    seed: u64,
) -> Result<VerifyRecord> {
    if iterations < 1000 {
        return Err(Error::InvalidArgument(format!("verification needs at least 1000 iterations, got {iterations}")));
    }
    gm.validate(part)?;
    let mean = gm.mean_outcome(d, part)?;
    let design = OlsDesign::new(&part.design_matrix(d))?;
    let closed_bias = te_bias(d, part, &gm.gamma_omitted)?;
    let closed_variance = gm.noise_sd * gm.noise_sd * g_vector(d, part)?.norm_squared();

    let estimates: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let mut y = mean.clone();
            add_noise(&mut y, gm.noise_sd, &mut rng);
            design.fit(&y).tau_hat
        })
        .collect();

    let n = iterations as f64;
    let m = estimates.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for e in &estimates {
        let dev = e - m;
        m2 += dev * dev;
        m4 += dev.powi(4);
    }
    let var = m2 / (n - 1.0);
    let m4 = m4 / n;
    let bias_se = (var / n).sqrt();
    let variance_se = ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    let empirical_bias = m - gm.tau;
    Ok(VerifyRecord {
        iterations,
        seed,
        tau: gm.tau,
        closed_bias,
        closed_variance,
        empirical_bias,
        empirical_variance: var,
        bias_se,
        variance_se,
        bias_z: z_score(empirical_bias - closed_bias, bias_se),
        variance_z: z_score(var - closed_variance, variance_se),
    })
}
