//! The five subcommands. Each writes its report directory and returns the
//! threshold checks that `--assert` enforces.

use std::path::Path;

use affinitynet::data::{self, Dataset, SplitPlan};
use affinitynet::gradsuite::{self, GRADIENT_TOLERANCE};
use affinitynet::layers::{model_forward, predict_classes, LayerSpec, ModelSpec};
use affinitynet::metrics::{
    accuracy, adjusted_mutual_information, chi_square_sf, concordance_index, cosine_spectral_clustering,
    hazard_group_split, kaplan_meier_by_group, logrank_statistic,
};
use affinitynet::training::{self, TrainHistory};
use rayon::prelude::*;

use crate::config::{echo, ClassifyConfig, ClusterConfig, GradcheckConfig, SurvivalConfig, SyntheticConfig, TrainSection};
use crate::error::{CliError, CliResult};
use crate::report::{num, Report, Table};

/// One threshold check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_add(rep as u64)
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of the `top` largest values.
pub fn top_mean(values: &[f64], top: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    mean(&v[..top.min(v.len())])
}

/// At least four fifths of the reps, rounded up.
fn most(reps: usize) -> usize {
    (4 * reps).div_ceil(5)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

fn masked<T: Copy>(values: &[T], mask: &[bool]) -> Vec<T> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

fn push_history(table: &mut Table, prefix: &[String], history: &TrainHistory) {
    for r in &history.records {
        let mut row = prefix.to_vec();
        row.extend([r.epoch.to_string(), num(r.train_loss), num(r.train_metric), opt_num(r.test_metric)]);
        table.push(row);
    }
}

struct Fitted {
    predictions: Vec<usize>,
    hidden: affinitynet::Matrix64,
    weights: Option<Vec<f64>>,
    history: TrainHistory,
}

fn fit_classifier(spec: &ModelSpec, d: &Dataset<f64>, train: &[bool], test: &[bool], section: &TrainSection, seed: u64) -> CliResult<Fitted> {
    let td = d.classification_data(train, Some(test), None)?;
    let (params, history) = training::train(spec, &td, &section.with_seed(seed))?;
    let out = model_forward(spec, &params, &d.features, None)?;
    Ok(Fitted {
        predictions: predict_classes(&out.output),
        hidden: out.hidden,
        weights: params.feature_weights(spec),
        history,
    })
}

fn labels(d: &Dataset<f64>) -> CliResult<&[usize]> {
    d.labels
        .as_deref()
        .ok_or_else(|| CliError::Config("dataset has no labels".into()))
}

const MODELS: [&str; 2] = ["affinitynet", "neuralnet"];

struct SyntheticRun {
    accuracy: [(f64, f64); 2],
    weights: Option<Vec<f64>>,
    ratio: Option<f64>,
    histories: [TrainHistory; 2],
}

pub fn synthetic(config: &SyntheticConfig, out: &Path) -> CliResult<Outcome> {
    let report = Report::create(out, echo(config))?;
    let runs = (0..config.reps)
        .into_par_iter()
        .map(|r| -> CliResult<SyntheticRun> {
            let seed = rep_seed(config.seed, r);
            let d = data::gen_synthetic(config.n_per_cluster, seed)?;
            let (train, test) = data::split(
                &d,
                &SplitPlan {
                    train_fraction: config.train_fraction,
                    stratified: true,
                    seed,
                },
            )?;
            let truth = labels(&d)?;
            let classes = d.num_classes();
            let specs = [
                config.model.affinitynet(d.p(), classes),
                config.model.baseline(d.p(), classes),
            ];
            let mut fits = Vec::new();
            for spec in &specs {
                fits.push(fit_classifier(spec, &d, &train, &test, &config.train, seed)?);
            }
            let acc = |f: &Fitted, mask: &[bool]| accuracy(&masked(&f.predictions, mask), &masked(truth, mask));
            let accuracy = [
                (acc(&fits[0], &train)?, acc(&fits[0], &test)?),
                (acc(&fits[1], &train)?, acc(&fits[1], &test)?),
            ];
            let weights = fits[0].weights.clone();
            let ratio = weights.as_ref().map(|w| {
                let s = data::SYNTHETIC_SIGNAL_DIMS;
                mean(&w[..s]) / mean(&w[s..])
            });
            let [a, b] = <[Fitted; 2]>::try_from(fits).ok().expect("two fits");
            Ok(SyntheticRun {
                accuracy,
                weights,
                ratio,
                histories: [a.history, b.history],
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = Table::new(&["rep", "seed", "model", "train_accuracy", "test_accuracy", "signal_noise_weight_ratio"]);
    let mut history = Table::new(&["rep", "model", "epoch", "train_loss", "train_accuracy", "test_accuracy"]);
    let mut weights = Table::new(&["rep", "feature", "kind", "weight"]);
    for (r, run) in runs.iter().enumerate() {
        for (m, model) in MODELS.iter().enumerate() {
            let ratio = if m == 0 { opt_num(run.ratio) } else { "NA".into() };
            table.push(vec![
                r.to_string(),
                rep_seed(config.seed, r).to_string(),
                model.to_string(),
                num(run.accuracy[m].0),
                num(run.accuracy[m].1),
                ratio,
            ]);
            push_history(&mut history, &[r.to_string(), model.to_string()], &run.histories[m]);
        }
        for (j, w) in run.weights.iter().flatten().enumerate() {
            let (kind, idx) = if j < data::SYNTHETIC_SIGNAL_DIMS {
                ("signal", j + 1)
            } else {
                ("noise", j + 1 - data::SYNTHETIC_SIGNAL_DIMS)
            };
            weights.push(vec![r.to_string(), format!("{kind}_{idx}"), kind.to_string(), num(*w)]);
        }
    }
    let aff: Vec<f64> = runs.iter().map(|r| r.accuracy[0].1).collect();
    let nn: Vec<f64> = runs.iter().map(|r| r.accuracy[1].1).collect();
    let ratio_hits = runs.iter().filter(|r| r.ratio.is_some_and(|v| v >= 5.0)).count();
    let mut summary = Table::new(&["key", "value"]);
    summary.push(vec!["median_affinitynet_test_accuracy".into(), num(median(&aff))]);
    summary.push(vec!["median_neuralnet_test_accuracy".into(), num(median(&nn))]);
    summary.push(vec!["reps_with_weight_ratio_at_least_5".into(), ratio_hits.to_string()]);
    summary.push(vec!["reps".into(), config.reps.to_string()]);
    report.write_table("runs.tsv", &table)?;
    report.write_table("history.tsv", &history)?;
    report.write_table("feature_weights.tsv", &weights)?;
    report.write_table("summary.tsv", &summary)?;
    Ok(Outcome {
        checks: vec![
            Check::new(
                "affinitynet median test accuracy >= 0.95",
                median(&aff) >= 0.95,
                num(median(&aff)),
            ),
            Check::new("neuralnet median test accuracy <= 0.65", median(&nn) <= 0.65, num(median(&nn))),
            Check::new(
                "signal/noise weight ratio >= 5 in at least 4/5 of reps",
                ratio_hits >= most(config.reps),
                format!("{ratio_hits} of {}", config.reps),
            ),
        ],
    })
}

pub const ABSENT_BASELINES: &str = "SVM, naive Bayes and random forest baselines are not built in and are absent from this report";

pub fn classify(config: &ClassifyConfig, out: &Path) -> CliResult<Outcome> {
    let report = Report::create(out, echo(config))?;
    let fixed = if config.data.is_fixed() {
        Some(config.data.load(config.seed)?)
    } else {
        None
    };
    let jobs: Vec<(usize, usize)> = (0..config.fractions.len())
        .flat_map(|f| (0..config.reps).map(move |r| (f, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(f, r)| -> CliResult<[(f64, f64); 2]> {
            let seed = rep_seed(config.seed, r);
            let owned;
            let d = match &fixed {
                Some(d) => d,
                None => {
                    owned = config.data.load(seed)?;
                    &owned
                }
            };
            let (train, test) = data::split(
                d,
                &SplitPlan {
                    train_fraction: config.fractions[f],
                    stratified: true,
                    seed,
                },
            )?;
            let truth = masked(labels(d)?, &test);
            let classes = d.num_classes();
            let mut out = [(0.0, 0.0); 2];
            let specs = [
                config.model.affinitynet(d.p(), classes),
                config.model.baseline(d.p(), classes),
            ];
            for (m, spec) in specs.iter().enumerate() {
                let fit = fit_classifier(spec, d, &train, &test, &config.train, seed)?;
                let pred = masked(&fit.predictions, &test);
                out[m] = (adjusted_mutual_information(&pred, &truth)?, accuracy(&pred, &truth)?);
            }
            Ok(out)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = Table::new(&["fraction", "rep", "seed", "model", "test_ami", "test_accuracy"]);
    let mut summary = Table::new(&["fraction", "model", "top_mean_ami", "mean_ami", "top", "reps"]);
    let mut tops = vec![[0.0; 2]; config.fractions.len()];
    for (f, &fraction) in config.fractions.iter().enumerate() {
        for (m, model) in MODELS.iter().enumerate() {
            let amis: Vec<f64> = (0..config.reps).map(|r| runs[f * config.reps + r][m].0).collect();
            for (r, &(ami, acc)) in (0..config.reps).map(|r| &runs[f * config.reps + r][m]).enumerate() {
                table.push(vec![
                    num(fraction),
                    r.to_string(),
                    rep_seed(config.seed, r).to_string(),
                    model.to_string(),
                    num(ami),
                    num(acc),
                ]);
            }
            tops[f][m] = top_mean(&amis, config.top);
            summary.push(vec![
                num(fraction),
                model.to_string(),
                num(tops[f][m]),
                num(mean(&amis)),
                config.top.to_string(),
                config.reps.to_string(),
            ]);
        }
    }
    let protocol = if config.top == config.reps {
        "top equals reps, so top_mean_ami is the plain mean over all runs".to_string()
    } else {
        format!("top_mean_ami is the mean test AMI of the best {} of {} runs", config.top, config.reps)
    };
    let notes = [ABSENT_BASELINES, protocol.as_str()];
    report.write_table_with_notes("runs.tsv", &table, &notes)?;
    report.write_table_with_notes("summary.tsv", &summary, &notes)?;
    let smallest = (0..config.fractions.len())
        .min_by(|&a, &b| config.fractions[a].total_cmp(&config.fractions[b]))
        .expect("nonempty grid");
    let [a, b] = tops[smallest];
    Ok(Outcome {
        checks: vec![Check::new(
            "affinitynet top-mean AMI exceeds neuralnet at the smallest fraction",
            a > b,
            format!("{} vs {}", num(a), num(b)),
        )],
    })
}

pub fn cluster(config: &ClusterConfig, out: &Path) -> CliResult<Outcome> {
    let report = Report::create(out, echo(config))?;
    let fixed = if config.data.is_fixed() {
        Some(config.data.load(config.seed)?)
    } else {
        None
    };
    let runs = (0..config.reps)
        .into_par_iter()
        .map(|r| -> CliResult<(usize, f64, f64)> {
            let seed = rep_seed(config.seed, r);
            let owned;
            let d = match &fixed {
                Some(d) => d,
                None => {
                    owned = config.data.load(seed)?;
                    &owned
                }
            };
            let truth = labels(d)?;
            let k = config.clusters.unwrap_or_else(|| d.num_classes());
            let (train, test) = data::split(
                d,
                &SplitPlan {
                    train_fraction: config.train_fraction,
                    stratified: true,
                    seed,
                },
            )?;
            let spec = config.model.affinitynet(d.p(), d.num_classes());
            let fit = fit_classifier(&spec, d, &train, &test, &config.train, seed)?;
            let transformed = cosine_spectral_clustering(&fit.hidden, k, seed)?;
            let raw = cosine_spectral_clustering(&d.features, k, seed)?;
            Ok((
                k,
                adjusted_mutual_information(&transformed, truth)?,
                adjusted_mutual_information(&raw, truth)?,
            ))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut table = Table::new(&["rep", "seed", "clusters", "transformed_ami", "raw_ami"]);
    for (r, &(k, t, raw)) in runs.iter().enumerate() {
        table.push(vec![
            r.to_string(),
            rep_seed(config.seed, r).to_string(),
            k.to_string(),
            num(t),
            num(raw),
        ]);
    }
    let t: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let raw: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let wins = runs.iter().filter(|r| r.1 >= r.2).count();
    let mut summary = Table::new(&["key", "value"]);
    summary.push(vec!["mean_transformed_ami".into(), num(mean(&t))]);
    summary.push(vec!["mean_raw_ami".into(), num(mean(&raw))]);
    summary.push(vec!["median_transformed_ami".into(), num(median(&t))]);
    summary.push(vec!["median_raw_ami".into(), num(median(&raw))]);
    summary.push(vec!["reps_transformed_at_least_raw".into(), wins.to_string()]);
    report.write_table("runs.tsv", &table)?;
    report.write_table("summary.tsv", &summary)?;
    Ok(Outcome {
        checks: vec![Check::new(
            "transformed AMI >= raw AMI in at least 4/5 of reps",
            wins >= most(config.reps),
            format!("{wins} of {}", config.reps),
        )],
    })
}

struct SurvivalRun {
    model: f64,
    baseline: Option<f64>,
    logrank: (f64, usize),
    km: Vec<(usize, Vec<affinitynet::metrics::KmPoint>)>,
    history: TrainHistory,
}

pub fn survival(config: &SurvivalConfig, out: &Path) -> CliResult<Outcome> {
    let report = Report::create(out, echo(config))?;
    let fixed = if config.data.is_fixed() {
        Some(config.data.load(config.seed)?)
    } else {
        None
    };
    let runs = (0..config.reps)
        .into_par_iter()
        .map(|r| -> CliResult<SurvivalRun> {
            let seed = rep_seed(config.seed, r);
            let owned;
            let d = match &fixed {
                Some(d) => d,
                None => {
                    owned = config.data.load(seed)?;
                    &owned
                }
            };
            if let Some(&c) = config.baseline_columns.iter().find(|&&c| c >= d.p()) {
                return Err(CliError::Config(format!("baseline column {c} out of range for {} features", d.p())));
            }
            let s = d.survival.as_ref().ok_or_else(|| CliError::Config("dataset has no survival records".into()))?;
            let codes = data::split_three(d.n(), config.train_fraction, config.validation_fraction, seed)?;
            let part = |c: u8| codes.iter().map(|&x| x == c).collect::<Vec<bool>>();
            let (train, validation, test) = (part(0), part(1), part(2));
            let train_config = config.train.with_seed(seed);
            let fit = |spec: &ModelSpec, d: &Dataset<f64>| -> CliResult<(Vec<f64>, TrainHistory)> {
                let td = d.survival_data(&train, Some(&validation), None)?;
                let (params, history) = training::train(spec, &td, &train_config)?;
                let risks = model_forward(spec, &params, &d.features, None)?.output.into_vec();
                Ok((risks, history))
            };
            let c_index = |risks: &[f64]| concordance_index(&masked(risks, &test), &masked(&s.time, &test), &masked(&s.event, &test));
            let spec = config.model.affinitynet(d.p(), 1).with_cox_head();
            let (risks, history) = fit(&spec, d)?;
            let baseline = if config.baseline_columns.is_empty() {
                None
            } else {
                let cols = d.select_columns(&config.baseline_columns);
                let spec = ModelSpec {
                    input_dim: cols.p(),
                    layers: vec![LayerSpec::CoxHead],
                };
                Some(c_index(&fit(&spec, &cols)?.0)?)
            };
            let groups = hazard_group_split(&risks, &config.group_proportions)?;
            Ok(SurvivalRun {
                model: c_index(&risks)?,
                baseline,
                logrank: logrank_statistic(&groups, &s.time, &s.event)?,
                km: kaplan_meier_by_group(&groups, &s.time, &s.event)?,
                history,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = Table::new(&["rep", "seed", "test_c_index", "baseline_test_c_index", "logrank_chi2", "logrank_df", "logrank_p"]);
    let mut km = Table::new(&["rep", "group", "time", "at_risk", "events", "survival"]);
    let mut history = Table::new(&["rep", "epoch", "train_loss", "train_c_index", "validation_c_index"]);
    for (r, run) in runs.iter().enumerate() {
        let (chi2, df) = run.logrank;
        table.push(vec![
            r.to_string(),
            rep_seed(config.seed, r).to_string(),
            num(run.model),
            opt_num(run.baseline),
            num(chi2),
            df.to_string(),
            num(chi_square_sf(chi2, df)),
        ]);
        for (g, points) in &run.km {
            for p in points {
                km.push(vec![
                    r.to_string(),
                    g.to_string(),
                    num(p.time),
                    p.at_risk.to_string(),
                    p.events.to_string(),
                    num(p.survival),
                ]);
            }
        }
        push_history(&mut history, &[r.to_string()], &run.history);
    }
    let model: Vec<f64> = runs.iter().map(|r| r.model).collect();
    let mut summary = Table::new(&["key", "value"]);
    summary.push(vec!["median_test_c_index".into(), num(median(&model))]);
    let mut checks = Vec::new();
    if runs.iter().all(|r| r.baseline.is_some()) {
        let diffs: Vec<f64> = runs.iter().map(|r| r.model - r.baseline.unwrap_or(f64::NAN)).collect();
        let base: Vec<f64> = runs.iter().filter_map(|r| r.baseline).collect();
        summary.push(vec!["median_baseline_test_c_index".into(), num(median(&base))]);
        summary.push(vec!["median_c_index_gain".into(), num(median(&diffs))]);
        checks.push(Check::new(
            "median test c-index gain over the baseline Cox fit >= 0.05",
            median(&diffs) >= 0.05,
            num(median(&diffs)),
        ));
    }
    let positive = runs.iter().filter(|r| r.logrank.0 > 0.0).count();
    summary.push(vec!["reps_with_positive_logrank".into(), positive.to_string()]);
    checks.push(Check::new(
        "log-rank statistic over predicted risk groups > 0 in every rep",
        positive == runs.len(),
        format!("{positive} of {}", runs.len()),
    ));
    report.write_table("runs.tsv", &table)?;
    report.write_table("kaplan_meier.tsv", &km)?;
    report.write_table("history.tsv", &history)?;
    report.write_table("summary.tsv", &summary)?;
    Ok(Outcome { checks })
}

pub fn gradcheck(config: &GradcheckConfig, out: &Path) -> CliResult<Outcome> {
    let report = Report::create(out, echo(config))?;
    let results = gradsuite::gradient_suite(config.reps, config.seed, config.corrupt.as_deref())?;
    let mut table = Table::new(&["check", "instance", "max_rel_error", "passed"]);
    for c in &results {
        table.push(vec![c.name.clone(), c.instance.to_string(), num(c.max_rel_error), c.passed().to_string()]);
    }
    let mut summary = Table::new(&["check", "max_rel_error", "passed"]);
    let mut checks = Vec::new();
    for name in gradsuite::check_names() {
        let worst = results
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max);
        let passed = worst <= GRADIENT_TOLERANCE;
        summary.push(vec![name.clone(), num(worst), passed.to_string()]);
        checks.push(Check::new(&name, passed, num(worst)));
    }
    report.write_table("checks.tsv", &table)?;
    report.write_table("summary.tsv", &summary)?;
    Ok(Outcome { checks })
}
