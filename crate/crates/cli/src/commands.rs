use matchcal::calibration::{
    calibrate_settings, mc_verify, optimal_is_nonincreasing, power_settings, CaliperSetting, PowerConfig,
};
use matchcal::data::simulate_outcome;
use matchcal::error_engine::te_variance;
use matchcal::omitted_bias::{relative_squared_bias_reduction_rows, AggregateBias};
use matchcal::{Error, GenerativeModel, OmittedBiasAnalysis};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{num, opt, Sink, Table};
use crate::study::Study;

pub type Files = Result<Vec<String>, CliError>;

fn setting_cells(s: &CaliperSetting) -> [String; 2] {
    match s {
        CaliperSetting::Width { caliper } => [s.label(), num(caliper.width)],
        _ => [s.label(), String::new()],
    }
}

fn grid_settings(cfg: &RunConfig, unmatched: bool) -> Vec<CaliperSetting> {
    let mut settings: Vec<CaliperSetting> = cfg
        .calipers
        .iter()
        .map(|&w| CaliperSetting::Width {
            caliper: cfg.caliper_of(w),
        })
        .collect();
    if cfg.baselines {
        settings.push(CaliperSetting::Unlimited);
        if unmatched {
            settings.push(CaliperSetting::Unmatched);
        }
    }
    settings
}

fn generative_model(cfg: &RunConfig, study: &Study) -> Result<GenerativeModel, CliError> {
    Ok(GenerativeModel {
        tau: cfg.tau,
        intercept: cfg.intercept,
        gamma_included: cfg.gamma_included.resolve(study.part.k_included(), "gamma_included")?,
        gamma_omitted: cfg.gamma_omitted.resolve(study.part.k_omitted(), "gamma_omitted")?,
        noise_sd: cfg.sigma0,
    })
}

#[derive(Serialize)]
struct TermRow {
    label: String,
    smd_before: Option<f64>,
    smd_after: Option<f64>,
    bias_before: Option<f64>,
    bias_after: Option<f64>,
    reduction: Option<f64>,
    absorbed: bool,
}

#[derive(Serialize)]
struct SampleSummary {
    n_treated: usize,
    n_control: usize,
    te_variance: f64,
    aggregate: AggregateBias,
}

#[derive(Serialize)]
struct Diagnosis<'a> {
    matching: Option<&'a matchcal::MatchResult>,
    before: SampleSummary,
    after: SampleSummary,
    terms: Vec<TermRow>,
}

pub fn diagnose(cfg: &RunConfig) -> Files {
    let study = Study::load(cfg)?;
    let (d, part) = (&study.expanded, &study.part);
    let matched = study.matched(cfg)?;
    let all: Vec<usize> = (0..d.n()).collect();
    let retained = matched.as_ref().map_or(all.as_slice(), |m| m.retained.as_slice());
    let sub = d.subset(retained)?;

    let analysis = OmittedBiasAnalysis::new(d, part)?;
    let before = analysis.report(None)?;
    let after = analysis.report(matched.as_ref().map(|m| m.retained.as_slice()))?;
    let sigma0_sq = cfg.sigma0 * cfg.sigma0;

    let mut terms = Vec::with_capacity(part.k_omitted());
    for (k, (b, a)) in before.per_term.iter().zip(&after.per_term).enumerate() {
        let reduction = match relative_squared_bias_reduction_rows(d, part, k, retained) {
            Ok(r) => Some(r),
            Err(Error::Absorbed(_)) => None,
            Err(e) => return Err(e.into()),
        };
        terms.push(TermRow {
            label: b.label.clone(),
            smd_before: b.smd_before,
            smd_after: a.smd_after,
            bias_before: b.normalized_bias,
            bias_after: a.normalized_bias,
            reduction,
            absorbed: b.absorbed || reduction.is_none(),
        });
    }

    let mut table = Table::new(&["label", "smd_before", "smd_after", "bias_before", "bias_after", "reduction", "absorbed"]);
    for t in &terms {
        table.push(vec![
            t.label.clone(),
            opt(t.smd_before),
            opt(t.smd_after),
            opt(t.bias_before),
            opt(t.bias_after),
            opt(t.reduction),
            t.absorbed.to_string(),
        ]);
    }
    let result = Diagnosis {
        matching: matched.as_ref(),
        before: SampleSummary {
            n_treated: d.n_treated(),
            n_control: d.n_control(),
            te_variance: te_variance(d, part, sigma0_sq)?,
            aggregate: before.aggregate,
        },
        after: SampleSummary {
            n_treated: sub.n_treated(),
            n_control: sub.n_control(),
            te_variance: te_variance(&sub, part, sigma0_sq)?,
            aggregate: after.aggregate,
        },
        terms,
    };
    let mut sink = Sink::new(&cfg.out)?;
    sink.csv("diagnose_terms.csv", &table)?;
    sink.finish("diagnose.json", "diagnose", cfg, &study.warnings, &result)
}

#[derive(Serialize)]
struct Calibration {
    curve: matchcal::calibration::CalibrationCurve,
    /// `None` when the R_o² grid is not ascending.
    optimal_nonincreasing: Option<bool>,
}

pub fn calibrate(cfg: &RunConfig) -> Files {
    Study::require_psm(cfg, "calibrate")?;
    let study = Study::load(cfg)?;
    let scores = study.scores()?;
    let settings = grid_settings(cfg, true);
    let curve = calibrate_settings(&study.expanded, &study.part, &scores, &settings, &cfg.r_o_grid, cfg.bias_method)?;

    let mut grid = Table::new(&[
        "setting",
        "caliper",
        "r_o_sq",
        "normalized_variance",
        "normalized_sq_bias",
        "normalized_mse",
        "n_treated",
        "n_control",
        "optimal",
    ]);
    for p in &curve.grid {
        let optimal = curve.optimal.iter().any(|o| o.r_o_sq == p.r_o_sq && o.setting == p.setting);
        let [label, width] = setting_cells(&p.setting);
        grid.push(vec![
            label,
            width,
            num(p.r_o_sq),
            num(p.normalized_variance),
            num(p.normalized_sq_bias),
            num(p.normalized_mse),
            p.n_treated.to_string(),
            p.n_control.to_string(),
            optimal.to_string(),
        ]);
    }
    let mut best = Table::new(&["r_o_sq", "setting", "caliper", "normalized_mse"]);
    for o in &curve.optimal {
        let [label, width] = setting_cells(&o.setting);
        best.push(vec![num(o.r_o_sq), label, width, num(o.normalized_mse)]);
    }
    let ascending = cfg.r_o_grid.windows(2).all(|w| w[0] <= w[1]);
    let result = Calibration {
        optimal_nonincreasing: ascending.then(|| optimal_is_nonincreasing(&curve)),
        curve,
    };
    let mut sink = Sink::new(&cfg.out)?;
    sink.csv("calibration_grid.csv", &grid)?;
    sink.csv("calibration_optimal.csv", &best)?;
    sink.finish("calibration.json", "calibrate", cfg, &study.warnings, &result)
}

pub fn power(cfg: &RunConfig) -> Files {
    Study::require_psm(cfg, "power")?;
    let seed = cfg.require_seed()?;
    let study = Study::load(cfg)?;
    let gm = generative_model(cfg, &study)?;
    let pc = PowerConfig {
        effect_size: cfg.effect_size,
        alpha: cfg.alpha,
        iterations: cfg.iterations,
        seed,
        gamma_included: gm.gamma_included,
        gamma_omitted: gm.gamma_omitted,
    };
    let scores = study.scores()?;
    let settings = grid_settings(cfg, true);
    let report = power_settings(&study.expanded, &study.part, &scores, &settings, &pc)?;

    let mut table = Table::new(&[
        "setting",
        "caliper",
        "n_treated",
        "n_control",
        "iterations",
        "matched_power",
        "matched_mc_se",
        "random_power",
        "random_mc_se",
    ]);
    for r in &report.rows {
        let [label, width] = setting_cells(&r.setting);
        table.push(vec![
            label,
            width,
            r.matched.n_treated.to_string(),
            r.matched.n_control.to_string(),
            r.matched.iterations.to_string(),
            num(r.matched.power),
            num(r.matched.mc_se),
            num(r.random.power),
            num(r.random.mc_se),
        ]);
    }
    let mut sink = Sink::new(&cfg.out)?;
    sink.csv("power.csv", &table)?;
    sink.finish("power.json", "power", cfg, &study.warnings, &report)
}

pub fn verify(cfg: &RunConfig) -> Files {
    let seed = cfg.require_seed()?;
    let study = Study::load(cfg)?;
    let gm = generative_model(cfg, &study)?;
    let r = mc_verify(&study.expanded, &study.part, &gm, cfg.iterations, seed)?;
    let mut table = Table::new(&[
        "iterations",
        "seed",
        "tau",
        "closed_bias",
        "empirical_bias",
        "bias_se",
        "bias_z",
        "closed_variance",
        "empirical_variance",
        "variance_se",
        "variance_z",
    ]);
    table.push(vec![
        r.iterations.to_string(),
        r.seed.to_string(),
        num(r.tau),
        num(r.closed_bias),
        num(r.empirical_bias),
        num(r.bias_se),
        num(r.bias_z),
        num(r.closed_variance),
        num(r.empirical_variance),
        num(r.variance_se),
        num(r.variance_z),
    ]);
    let mut sink = Sink::new(&cfg.out)?;
    sink.csv("verify.csv", &table)?;
    sink.finish("verify.json", "verify", cfg, &study.warnings, &r)
}

pub fn match_cmd(cfg: &RunConfig) -> Files {
    let study = Study::load(cfg)?;
    let m = study
        .matched(cfg)?
        .ok_or_else(|| CliError::config("`match` needs match_method \"psm\" or \"mahalanobis\""))?;
    let mut pairs = Table::new(&["treated_row", "control_row"]);
    for &(t, c) in &m.pairs {
        pairs.push(vec![t.to_string(), c.to_string()]);
    }
    let mut sink = Sink::new(&cfg.out)?;
    sink.csv("match_pairs.csv", &pairs)?;
    let path = sink.path("matched_data.csv");
    study.raw.subset(&m.retained)?.write_csv(&path, &[])?;
    sink.finish("match.json", "match", cfg, &study.warnings, &m)
}

#[derive(Serialize)]
struct Simulation {
    n: usize,
    n_treated: usize,
    n_control: usize,
    outcome: String,
    model: GenerativeModel,
    included: Vec<String>,
    omitted: Vec<String>,
}

pub fn simulate(cfg: &RunConfig) -> Files {
    let seed = cfg.require_seed()?;
    let study = Study::load(cfg)?;
    let gm = generative_model(cfg, &study)?;
    let y = simulate_outcome(&study.expanded, &study.part, &gm, seed)?;
    let mut sink = Sink::new(&cfg.out)?;
    let path = sink.path("simulated.csv");
    study.raw.write_csv(&path, &[(cfg.outcome.as_str(), &y)])?;
    let name = |c: &usize| study.expanded.columns()[*c].name.clone();
    let result = Simulation {
        n: study.raw.n(),
        n_treated: study.raw.n_treated(),
        n_control: study.raw.n_control(),
        outcome: cfg.outcome.clone(),
        model: gm,
        included: study.part.included.iter().map(name).collect(),
        omitted: study.part.omitted.iter().map(name).collect(),
    };
    sink.finish("simulate.json", "simulate", cfg, &study.warnings, &result)
}
