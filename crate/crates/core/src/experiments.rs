//! Experiment commands. Each returns a [`Report`] holding CSV tables and
//! binary artifacts; nothing is written until [`Report::write`].

use std::path::Path;

use log::{info, warn};

use crate::attack::{cpm_search, random_skew_scaled, AttackOutcome, GridSpec, PoisonSummary};
use crate::color::{fg_bg_contrast, Operator};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{generate_shapes, load_cifar10, load_cifar10_test, partition, LabeledDataset, Sample};
use crate::delta_e::mean_delta_e;
use crate::error::{Error, Result};
use crate::federated::{
    adversarial_ids, build_clients, fit_drift_slope, metrics_table, round_metrics, simulate, AggregatorKind,
    DriftFit, RoundContext, RoundMetrics, RoundOutput,
};
use crate::image::{write_file, Image};
use crate::metrics::{foreground_mask, ssim, top_k_indices};
use crate::model::{Architecture, Model};
use crate::report::{cell, mean, std_dev, Table};
use crate::saliency::{grad_cam, SaliencyMap};
use crate::seed;

/// Output of one command.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub tables: Vec<(String, Table)>,
    /// `(name, value)` pairs, emitted as `<command>_summary.csv`.
    pub summary: Vec<(String, f64)>,
    pub artifacts: Vec<(String, Vec<u8>)>,
    /// Free text printed by the CLI.
    pub text: String,
    command: String,
}

impl Report {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn put(&mut self, name: &str, value: f64) {
        self.summary.push((name.to_string(), value));
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&["metric", "value"]);
        for (k, v) in &self.summary {
            t.push(vec![k.clone(), cell(v)]).expect("two columns");
        }
        t
    }

    /// All CSV outputs by file name, the summary included.
    pub fn csv_files(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.tables.iter().map(|(n, t)| (n.clone(), t.to_csv())).collect();
        if !self.summary.is_empty() {
            out.push((format!("{}_summary.csv", self.command), self.summary_table().to_csv()));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, csv) in self.csv_files() {
            write_file(&dir.join(name), csv.as_bytes())?;
        }
        for (name, bytes) in &self.artifacts {
            write_file(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Shapes => Ok(Prepared {
            train: generate_shapes(d.train_size, d.classes, d.image_size, seed::derive(cfg.seed, &[1]))?,
            test: generate_shapes(d.test_size, d.classes, d.image_size, seed::derive(cfg.seed, &[2]))?,
        }),
        DatasetKind::Cifar10 => {
            let path = d.path.as_deref().ok_or_else(|| Error::Config("cifar10 needs dataset.path".into()))?;
            let train = load_cifar10(path, Some(d.train_size))?;
            let test = load_cifar10_test(path, Some(d.test_size))?;
            if train.is_empty() || test.is_empty() {
                return Err(Error::Empty("CIFAR-10 split"));
            }
            Ok(Prepared { train, test })
        }
    }
}

/// Builds and trains a model; `tag` separates independently trained models.
pub fn train_model(cfg: &ExperimentConfig, arch: Architecture, train: &[Sample], tag: u64) -> Result<Model> {
    let init = Model::build(cfg.model_spec(arch), seed::derive(cfg.seed, &[3, tag]))?;
    let model = init.train(train, &cfg.model.train_config(), seed::derive(cfg.seed, &[4, tag]))?;
    info!("trained {arch:?} model (tag {tag})");
    Ok(model)
}

/// One attacked sample with the quantities the reports need.
#[derive(Clone, Debug)]
pub struct AttackRecord {
    pub label: usize,
    pub outcome: AttackOutcome,
    pub perturbed: Image,
    pub perturbed_prediction: usize,
    pub clean_cam: SaliencyMap,
    pub perturbed_cam: SaliencyMap,
    pub fg_bg_clean: f64,
    pub fg_bg_perturbed: f64,
}

/// Saliency foreground for the contrast vector. A map too flat to split
/// (every pixel above the threshold) falls back to its top-k pixels.
fn contrast_mask(cam: &SaliencyMap, tau: f64) -> Result<Vec<bool>> {
    let fg = foreground_mask(cam, tau)?;
    if fg.covered() < fg.mask.len() {
        return Ok(fg.mask);
    }
    let k = ((tau * fg.mask.len() as f64).round() as usize).max(1);
    let mut mask = vec![false; fg.mask.len()];
    for i in top_k_indices(cam.data(), k) {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn attack_samples(model: &Model, samples: &[Sample], grid: &GridSpec, tau: f64) -> Result<Vec<AttackRecord>> {
    let candidates = grid.candidates()?;
    samples
        .iter()
        .map(|s| {
            let (perturbed, outcome) = cpm_search(model, &s.image, &candidates, grid.order)?;
            let clean_cam = grad_cam(model, &s.image, outcome.predicted)?;
            let perturbed_cam = grad_cam(model, &perturbed, outcome.predicted)?;
            let mask = contrast_mask(&clean_cam, tau)?;
            Ok(AttackRecord {
                label: s.label,
                perturbed_prediction: model.predict_label(&perturbed)?,
                fg_bg_clean: fg_bg_contrast(&s.image, &mask)?.norm(),
                fg_bg_perturbed: fg_bg_contrast(&perturbed, &mask)?.norm(),
                outcome,
                perturbed,
                clean_cam,
                perturbed_cam,
            })
        })
        .collect()
}

pub const BASELINE_COLUMNS: [&str; 17] = [
    "sample_id",
    "label",
    "predicted",
    "perturbed_prediction",
    "candidate",
    "hue",
    "scale_r",
    "scale_g",
    "scale_b",
    "contrast",
    "brightness",
    "ssim",
    "delta_e",
    "feasible",
    "fallback",
    "fg_bg_clean",
    "fg_bg_perturbed",
];

fn baseline_table(records: &[AttackRecord]) -> Table {
    let mut t = Table::new(&BASELINE_COLUMNS);
    for (i, r) in records.iter().enumerate() {
        let o = &r.outcome;
        let p = o.params;
        t.push(vec![
            cell(i),
            cell(r.label),
            cell(o.predicted),
            cell(r.perturbed_prediction),
            cell(o.candidate),
            cell(p.hue),
            cell(p.scale[0]),
            cell(p.scale[1]),
            cell(p.scale[2]),
            cell(p.contrast),
            cell(p.brightness),
            cell(o.ssim),
            cell(o.delta_e),
            cell(o.feasible),
            cell(o.fallback),
            cell(r.fg_bg_clean),
            cell(r.fg_bg_perturbed),
        ])
        .expect("row matches header");
    }
    t
}

fn preserved_pct(records: &[AttackRecord]) -> f64 {
    let kept = records
        .iter()
        .filter(|r| r.perturbed_prediction == r.outcome.predicted)
        .count();
    100.0 * kept as f64 / records.len() as f64
}

/// Single-client attack outside federation: train a clean model, perturb
/// the test set and summarise saliency degradation.
pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let model = train_model(cfg, cfg.model.arch, &data.train.samples, 0)?;
    let records = attack_samples(&model, &data.test.samples, &cfg.attack, cfg.metrics.tau)?;
    let mut report = Report::new("baseline");
    let outcomes: Vec<AttackOutcome> = records.iter().map(|r| r.outcome.clone()).collect();
    let s = PoisonSummary::from_outcomes(&outcomes);
    let ssims: Vec<f64> = outcomes.iter().map(|o| o.ssim).collect();
    report.put("samples", records.len() as f64);
    report.put("clean_accuracy", 100.0 * model.accuracy(&data.test.samples)?);
    report.put("attack_accuracy", preserved_pct(&records));
    report.put("mean_ssim", s.mean_ssim);
    report.put("std_ssim", s.std_ssim);
    report.put("p10_ssim", s.p10_ssim);
    report.put("median_ssim", s.median_ssim);
    report.put(
        "fraction_below_0.7",
        ssims.iter().filter(|&&v| v < 0.7).count() as f64 / ssims.len() as f64,
    );
    report.put("mean_delta_e", s.mean_delta_e);
    report.put("success_pct", 100.0 * s.success_rate);
    report.put("mean_fg_bg_clean", mean(&records.iter().map(|r| r.fg_bg_clean).collect::<Vec<_>>()));
    report.put(
        "mean_fg_bg_perturbed",
        mean(&records.iter().map(|r| r.fg_bg_perturbed).collect::<Vec<_>>()),
    );
    report.tables.push(("baseline_samples.csv".into(), baseline_table(&records)));

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].outcome.ssim.total_cmp(&records[b].outcome.ssim));
    for (rank, &i) in order.iter().take(cfg.metrics.heatmaps).enumerate() {
        let r = &records[i];
        let stem = format!("heatmaps/worst{rank:02}_sample{i:05}");
        report
            .artifacts
            .push((format!("{stem}_clean.ppm"), data.test.samples[i].image.to_ppm()));
        report.artifacts.push((format!("{stem}_perturbed.ppm"), r.perturbed.to_ppm()));
        report.artifacts.push((format!("{stem}_clean_cam.pgm"), r.clean_cam.to_pgm()));
        report
            .artifacts
            .push((format!("{stem}_perturbed_cam.pgm"), r.perturbed_cam.to_pgm()));
    }
    Ok(report)
}

/// Grids for the ablation rows: each operator alone, then the configured
/// grid.
pub fn ablation_grids(grid: &GridSpec) -> Vec<(&'static str, GridSpec)> {
    let single = |op| GridSpec {
        operators: vec![op],
        pairwise: false,
        ..grid.clone()
    };
    vec![
        ("hue", single(Operator::Hue)),
        ("rescale", single(Operator::Rescale)),
        ("jitter", single(Operator::Jitter)),
        ("combined", grid.clone()),
    ]
}

pub const ABLATION_COLUMNS: [&str; 7] = [
    "operator",
    "candidates",
    "samples",
    "mean_ssim",
    "std_ssim",
    "success_pct",
    "attack_accuracy",
];

pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let model = train_model(cfg, cfg.model.arch, &data.train.samples, 0)?;
    let mut table = Table::new(&ABLATION_COLUMNS);
    for (name, grid) in ablation_grids(&cfg.attack) {
        let records = attack_samples(&model, &data.test.samples, &grid, cfg.metrics.tau)?;
        let outcomes: Vec<AttackOutcome> = records.iter().map(|r| r.outcome.clone()).collect();
        let s = PoisonSummary::from_outcomes(&outcomes);
        table.push(vec![
            cell(name),
            cell(grid.candidates()?.len()),
            cell(records.len()),
            cell(s.mean_ssim),
            cell(s.std_ssim),
            cell(100.0 * s.success_rate),
            cell(preserved_pct(&records)),
        ])?;
    }
    let mut report = Report::new("ablation");
    report.tables.push(("ablation.csv".into(), table));
    Ok(report)
}

fn skew_delta_e(samples: &[Sample], seed: u64, range: f64) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let (x, _) = random_skew_scaled(&s.image, seed::derive(seed, &[i as u64]), range);
        total += mean_delta_e(&s.image, &x)?;
    }
    Ok(total / samples.len() as f64)
}

/// Range multiplier whose mean ΔE00 is within `tol` of `target`, found by
/// bisection on `[0, max_range]`. Returns the closest end when out of reach.
pub fn match_skew_range(samples: &[Sample], seed: u64, target: f64, tol: f64, max_range: f64) -> Result<f64> {
    let at_one = skew_delta_e(samples, seed, 1.0)?;
    if (at_one - target).abs() <= tol {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, max_range);
    if skew_delta_e(samples, seed, hi)? < target - tol {
        warn!("random skew cannot reach mean delta E {target} within range {max_range}");
        return Ok(hi);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let d = skew_delta_e(samples, seed, mid)?;
        if (d - target).abs() <= tol {
            return Ok(mid);
        }
        if d < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub const COMPARE_COLUMNS: [&str; 8] = [
    "method",
    "samples",
    "preserved_pct",
    "flips",
    "mean_ssim",
    "std_ssim",
    "mean_delta_e",
    "range_scale",
];

pub const COMPARE_SAMPLE_COLUMNS: [&str; 6] = [
    "sample_id",
    "cpm_ssim",
    "cpm_delta_e",
    "skew_ssim",
    "skew_delta_e",
    "skew_flipped",
];

/// CPM against unconstrained random colour skew on the same samples.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let model = train_model(cfg, cfg.model.arch, &data.train.samples, 0)?;
    let n = cfg.compare.samples.min(data.test.len());
    let samples = &data.test.samples[..n];
    let records = attack_samples(&model, samples, &cfg.attack, cfg.metrics.tau)?;
    let cpm_ssim: Vec<f64> = records.iter().map(|r| r.outcome.ssim).collect();
    let cpm_de: Vec<f64> = records.iter().map(|r| r.outcome.delta_e).collect();
    let skew_seed = seed::derive(cfg.seed, &[5]);
    let range = if cfg.compare.match_delta_e {
        match_skew_range(
            samples,
            skew_seed,
            mean(&cpm_de),
            cfg.compare.delta_e_tolerance,
            cfg.compare.max_range,
        )?
    } else {
        1.0
    };
    let mut per_sample = Table::new(&COMPARE_SAMPLE_COLUMNS);
    let (mut skew_ssim, mut skew_de, mut flips) = (Vec::new(), Vec::new(), 0usize);
    for (i, (s, r)) in samples.iter().zip(&records).enumerate() {
        let (x, _) = random_skew_scaled(&s.image, seed::derive(skew_seed, &[i as u64]), range);
        let class = r.outcome.predicted;
        let flipped = model.predict_label(&x)? != class;
        flips += usize::from(flipped);
        let v = ssim(&r.clean_cam, &grad_cam(&model, &x, class)?)?;
        let de = mean_delta_e(&s.image, &x)?;
        skew_ssim.push(v);
        skew_de.push(de);
        per_sample.push(vec![cell(i), cell(cpm_ssim[i]), cell(cpm_de[i]), cell(v), cell(de), cell(flipped)])?;
    }
    let cpm_flips = records
        .iter()
        .filter(|r| r.perturbed_prediction != r.outcome.predicted)
        .count();
    let mut table = Table::new(&COMPARE_COLUMNS);
    for (method, flips, s, de, scale) in [
        ("cpm", cpm_flips, &cpm_ssim, &cpm_de, f64::NAN),
        ("random_skew", flips, &skew_ssim, &skew_de, range),
    ] {
        table.push(vec![
            cell(method),
            cell(n),
            cell(100.0 * (n - flips) as f64 / n as f64),
            cell(flips),
            cell(mean(s)),
            cell(std_dev(s)),
            cell(mean(de)),
            cell(scale),
        ])?;
    }
    let mut report = Report::new("compare");
    report.tables.push(("compare.csv".into(), table));
    report.tables.push(("compare_samples.csv".into(), per_sample));
    Ok(report)
}

pub const TRANSFER_COLUMNS: [&str; 6] = ["setting", "source", "target", "samples", "preserved_pct", "mean_ssim"];

fn arch_name(a: Architecture) -> &'static str {
    match a {
        Architecture::ArchA => "arch_a",
        Architecture::ArchB => "arch_b",
    }
}

/// CPM samples crafted on the main architecture, evaluated on an
/// independently trained second architecture.
pub fn cmd_transfer(cfg: &ExperimentConfig) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let source = train_model(cfg, cfg.model.arch, &data.train.samples, 0)?;
    let target = train_model(cfg, cfg.model.transfer_arch, &data.train.samples, 1)?;
    let records = attack_samples(&source, &data.test.samples, &cfg.attack, cfg.metrics.tau)?;
    let n = records.len();
    let same_ssim: Vec<f64> = records.iter().map(|r| r.outcome.ssim).collect();
    let (mut kept, mut cross_ssim) = (0usize, Vec::with_capacity(n));
    for (s, r) in data.test.samples.iter().zip(&records) {
        let class = target.predict_label(&s.image)?;
        kept += usize::from(target.predict_label(&r.perturbed)? == class);
        let a = grad_cam(&target, &s.image, class)?;
        let b = grad_cam(&target, &r.perturbed, class)?;
        cross_ssim.push(ssim(&a, &b)?);
    }
    let mut table = Table::new(&TRANSFER_COLUMNS);
    let (src, dst) = (arch_name(cfg.model.arch), arch_name(cfg.model.transfer_arch));
    table.push(vec![
        cell("same_arch"),
        cell(src),
        cell(src),
        cell(n),
        cell(preserved_pct(&records)),
        cell(mean(&same_ssim)),
    ])?;
    table.push(vec![
        cell("cross_arch"),
        cell(src),
        cell(dst),
        cell(n),
        cell(100.0 * kept as f64 / n as f64),
        cell(mean(&cross_ssim)),
    ])?;
    let mut report = Report::new("transfer");
    report.tables.push(("transfer.csv".into(), table));
    Ok(report)
}

/// Client partitions, server root set, probe set and initial model shared
/// by every federated run of one configuration.
#[derive(Clone, Debug)]
pub struct FlSetup {
    pub parts: Vec<Vec<Sample>>,
    pub root: Vec<Sample>,
    pub probe: Vec<Sample>,
    pub test: Vec<Sample>,
    pub init: Model,
}

pub fn fl_setup(cfg: &ExperimentConfig, data: &Prepared) -> Result<FlSetup> {
    let n = data.train.len();
    let root_size = cfg.fl.root_size.min(n.saturating_sub(cfg.fl.clients));
    let pool_idx: Vec<usize> = (0..n - root_size).collect();
    let pool = data.train.subset(&pool_idx);
    let root = data.train.samples[n - root_size..].to_vec();
    let parts = partition(&pool, cfg.fl.clients, cfg.fl.partition, seed::derive(cfg.seed, &[6]))?
        .into_iter()
        .map(|d| d.samples)
        .collect();
    let mut init = Model::build(cfg.model_spec(cfg.model.arch), seed::derive(cfg.seed, &[3, 0]))?;
    if cfg.fl.pretrain_epochs > 0 {
        let pre = crate::model::TrainConfig {
            epochs: cfg.fl.pretrain_epochs,
            ..cfg.model.train_config()
        };
        init = init.train(&pool.samples, &pre, seed::derive(cfg.seed, &[7]))?;
    }
    let probe_n = cfg.metrics.probe_size.min(data.test.len());
    Ok(FlSetup {
        parts,
        root,
        probe: data.test.samples[..probe_n].to_vec(),
        test: data.test.samples.clone(),
        init,
    })
}

/// One federated trajectory at adversarial ratio `ratio`.
pub fn fl_run(
    cfg: &ExperimentConfig,
    setup: &FlSetup,
    ratio: f64,
    aggregator: AggregatorKind,
) -> Result<Vec<RoundOutput>> {
    let mut fl = cfg.fl.clone();
    fl.adversarial_ratio = ratio;
    fl.aggregator = aggregator;
    fl.validate()?;
    let adversaries = adversarial_ids(fl.clients, fl.adversary_count(), seed::derive(cfg.seed, &[8]));
    let clients = build_clients(setup.parts.clone(), &adversaries)?;
    let ctx = RoundContext {
        fl: &fl,
        grid: &cfg.attack,
        root: &setup.root,
        seed: seed::derive(cfg.seed, &[9]),
    };
    info!("federated run: ratio {ratio}, {}, adversaries {adversaries:?}", aggregator.name());
    simulate(&setup.init, &clients, &ctx)
}

/// Metrics of `run` against `twin`, round by round.
pub fn fl_metrics(
    cfg: &ExperimentConfig,
    setup: &FlSetup,
    ratio: f64,
    run: &[RoundOutput],
    twin: &[RoundOutput],
) -> Result<Vec<RoundMetrics>> {
    run.iter()
        .zip(twin)
        .enumerate()
        .map(|(t, (a, b))| {
            round_metrics(
                t as u32 + 1,
                ratio,
                &a.global,
                &b.global,
                &setup.probe,
                &setup.test,
                cfg.metrics.k_fraction,
            )
        })
        .collect()
}

/// Drift fit over `(t, r, Δ_t)`; `None` when every `t·r` is zero.
pub fn drift_fit(metrics: &[RoundMetrics]) -> Option<DriftFit> {
    let series: Vec<(f64, f64, f64)> = metrics
        .iter()
        .map(|m| (f64::from(m.round), m.adversarial_ratio, m.drift))
        .collect();
    fit_drift_slope(&series).ok()
}

pub const POISON_COLUMNS: [&str; 6] = ["round", "client", "mean_ssim", "median_ssim", "success_pct", "mean_delta_e"];

/// Federated attack with its vanilla twin (ratio 0, same seeds).
pub fn cmd_fl(cfg: &ExperimentConfig) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let setup = fl_setup(cfg, &data)?;
    let ratio = cfg.fl.adversarial_ratio;
    let twin = fl_run(cfg, &setup, 0.0, cfg.fl.aggregator)?;
    let run = if ratio == 0.0 {
        twin.clone()
    } else {
        fl_run(cfg, &setup, ratio, cfg.fl.aggregator)?
    };
    let metrics = fl_metrics(cfg, &setup, ratio, &run, &twin)?;
    let mut report = Report::new("fl");
    report.tables.push(("fl_rounds.csv".into(), metrics_table(&metrics)));
    let mut poison = Table::new(&POISON_COLUMNS);
    for (t, out) in run.iter().enumerate() {
        for (client, s) in &out.poison {
            poison.push(vec![
                cell(t + 1),
                cell(client),
                cell(s.mean_ssim),
                cell(s.median_ssim),
                cell(100.0 * s.success_rate),
                cell(s.mean_delta_e),
            ])?;
        }
    }
    report.tables.push(("fl_poison.csv".into(), poison));
    let last = metrics.last().expect("rounds >= 1");
    report.put("rounds", metrics.len() as f64);
    report.put("adversarial_ratio", ratio);
    report.put("final_accuracy", last.accuracy);
    report.put("final_reference_accuracy", last.reference_accuracy);
    report.put("final_fidelity", last.fidelity);
    report.put("final_ssim_gc", last.ssim_gc);
    report.put("final_ssim_gcpp", last.ssim_gcpp);
    report.put("final_peak", last.peak);
    report.put("final_l1", last.l1);
    if let Some(fit) = drift_fit(&metrics) {
        report.put("drift_alpha", fit.alpha);
        report.put("drift_r_squared", fit.r_squared);
    }
    let final_run = &run.last().expect("rounds >= 1").global;
    let final_twin = &twin.last().expect("rounds >= 1").global;
    report
        .artifacts
        .push(("fl_global.cdwt".into(), final_run.weights().to_bytes()));
    report.artifacts.push(("fl_twin.cdwt".into(), final_twin.weights().to_bytes()));
    let dumps = cfg.metrics.heatmaps.min(setup.probe.len());
    for (t, (a, b)) in run.iter().zip(&twin).enumerate() {
        for (i, s) in setup.probe.iter().take(dumps).enumerate() {
            let class = b.global.predict_label(&s.image)?;
            let stem = format!("heatmaps/round{:02}/probe{i:02}", t + 1);
            report
                .artifacts
                .push((format!("{stem}_attacked.pgm"), grad_cam(&a.global, &s.image, class)?.to_pgm()));
            report
                .artifacts
                .push((format!("{stem}_vanilla.pgm"), grad_cam(&b.global, &s.image, class)?.to_pgm()));
        }
    }
    Ok(report)
}

pub const ROBUST_COLUMNS: [&str; 10] = [
    "aggregator",
    "accuracy",
    "reference_accuracy",
    "fidelity",
    "ssim_gc",
    "ssim_gcpp",
    "peak",
    "l1",
    "mean_ssim_gc_rounds",
    "skipped_rounds",
];

/// The federated attack under every aggregator, each against its own
/// vanilla twin.
pub fn cmd_robust(cfg: &ExperimentConfig) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let setup = fl_setup(cfg, &data)?;
    let ratio = cfg.fl.adversarial_ratio;
    let mut table = Table::new(&ROBUST_COLUMNS);
    for agg in AggregatorKind::ALL {
        let twin = fl_run(cfg, &setup, 0.0, agg)?;
        let run = if ratio == 0.0 { twin.clone() } else { fl_run(cfg, &setup, ratio, agg)? };
        let metrics = fl_metrics(cfg, &setup, ratio, &run, &twin)?;
        let last = metrics.last().expect("rounds >= 1");
        let all: Vec<f64> = metrics.iter().map(|m| m.ssim_gc).collect();
        table.push(vec![
            cell(agg.name()),
            cell(last.accuracy),
            cell(last.reference_accuracy),
            cell(last.fidelity),
            cell(last.ssim_gc),
            cell(last.ssim_gcpp),
            cell(last.peak),
            cell(last.l1),
            cell(mean(&all)),
            cell(run.iter().filter(|o| o.skipped).count()),
        ])?;
    }
    let mut report = Report::new("robust");
    report.tables.push(("robust.csv".into(), table));
    Ok(report)
}

/// Dumps the configured train and test sets as PPM files plus labels.
pub fn cmd_gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Report> {
    let data = prepare_data(cfg)?;
    data.train.dump(&dir.join("train"))?;
    data.test.dump(&dir.join("test"))?;
    let mut report = Report::new("gen_data");
    report.put("train_samples", data.train.len() as f64);
    report.put("test_samples", data.test.len() as f64);
    report.text = format!(
        "wrote {} train and {} test samples to {}\n",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(report)
}

const RAMP: &[u8] = b" .:-=+*#%@";

fn ascii(map: &SaliencyMap) -> Vec<String> {
    (0..map.height())
        .map(|y| {
            (0..map.width())
                .map(|x| {
                    let i = ((map.get(y, x) * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1);
                    RAMP[i] as char
                })
                .collect()
        })
        .collect()
}

/// Clean and perturbed Grad-CAM of one test sample, side by side.
pub fn cmd_inspect(cfg: &ExperimentConfig, sample: usize) -> Result<Report> {
    let data = prepare_data(cfg)?;
    let s = data
        .test
        .samples
        .get(sample)
        .ok_or_else(|| Error::invalid(format!("sample {sample} out of range ({} test samples)", data.test.len())))?;
    let model = train_model(cfg, cfg.model.arch, &data.train.samples, 0)?;
    let records = attack_samples(&model, std::slice::from_ref(s), &cfg.attack, cfg.metrics.tau)?;
    let r = &records[0];
    let mut report = Report::new("inspect");
    let o = &r.outcome;
    let mut text = format!(
        "sample {sample}: label {}, predicted {}, ssim {:.4}, delta E {:.3}, params {:?}\nclean{}perturbed\n",
        r.label,
        o.predicted,
        o.ssim,
        o.delta_e,
        o.params,
        " ".repeat(r.clean_cam.width().saturating_sub(4)),
    );
    for (a, b) in ascii(&r.clean_cam).iter().zip(ascii(&r.perturbed_cam)) {
        text.push_str(&format!("{a} {b}\n"));
    }
    report.text = text;
    let stem = format!("inspect/sample{sample:05}");
    report.artifacts.push((format!("{stem}_clean.ppm"), s.image.to_ppm()));
    report.artifacts.push((format!("{stem}_perturbed.ppm"), r.perturbed.to_ppm()));
    report.artifacts.push((format!("{stem}_clean_cam.pgm"), r.clean_cam.to_pgm()));
    report
        .artifacts
        .push((format!("{stem}_perturbed_cam.pgm"), r.perturbed_cam.to_pgm()));
    report.put("ssim", o.ssim);
    report.put("delta_e", o.delta_e);
    Ok(report)
}
