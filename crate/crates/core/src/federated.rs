//! Synchronous federated simulation with benign and colour-poisoning
//! clients, FedAvg and robust aggregation, and saliency-drift metrics.

use log::warn;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::attack::{poison_dataset, GridSpec, PoisonSummary};
use crate::data::{PartitionMode, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{l1_distance, peak_overlap, ssim};
use crate::model::{Model, TrainConfig};
use crate::report::{cell, mean, std_dev, Table};
use crate::saliency::{cam_pair, grad_cam};
use crate::seed;
use crate::weights::ModelWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub data: Vec<Sample>,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    TrimmedMean,
    Median,
    Fltrust,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [
        AggregatorKind::Fedavg,
        AggregatorKind::TrimmedMean,
        AggregatorKind::Median,
        AggregatorKind::Fltrust,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Median => "median",
            AggregatorKind::Fltrust => "fltrust",
        }
    }
}

/// Federation shape and local-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    /// Total clients N.
    pub clients: usize,
    /// Clients selected per round K.
    pub per_round: usize,
    pub local_epochs: u32,
    pub lr: f64,
    pub batch: usize,
    pub rounds: u32,
    /// Fraction r of adversarial clients.
    pub adversarial_ratio: f64,
    pub aggregator: AggregatorKind,
    pub trim_k: usize,
    /// Clean samples held by the server for FLTrust.
    pub root_size: usize,
    pub partition: PartitionMode,
    /// Epochs of clean centralised training that produce the initial model.
    pub pretrain_epochs: u32,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            per_round: 5,
            local_epochs: 1,
            lr: 0.05,
            batch: 32,
            rounds: 20,
            adversarial_ratio: 0.3,
            aggregator: AggregatorKind::Fedavg,
            trim_k: 1,
            root_size: 32,
            partition: PartitionMode::Iid,
            pretrain_epochs: 1,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.per_round == 0 || self.per_round > self.clients {
            return Err(Error::Config(format!(
                "need 1 <= per_round ({}) <= clients ({})",
                self.per_round, self.clients
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.adversarial_ratio) {
            return Err(Error::Config(format!(
                "adversarial_ratio {} outside [0, 1]",
                self.adversarial_ratio
            )));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("lr must be positive and batch nonzero".into()));
        }
        if self.aggregator == AggregatorKind::TrimmedMean && self.per_round <= 2 * self.trim_k {
            return Err(Error::Config(format!(
                "trimmed mean with trim_k={} needs more than {} clients per round",
                self.trim_k,
                2 * self.trim_k
            )));
        }
        if self.aggregator == AggregatorKind::Fltrust && self.root_size == 0 {
            return Err(Error::Config("fltrust needs a nonempty root set".into()));
        }
        Ok(())
    }

    pub fn local_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            lr: self.lr,
            batch: self.batch,
        }
    }

    pub fn adversary_count(&self) -> usize {
        (self.adversarial_ratio * self.clients as f64).round() as usize
    }
}

/// Ids of the adversarial clients: a seeded permutation's prefix, so the
/// set only grows as the ratio grows.
pub fn adversarial_ids(clients: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(&mut seed::rng_for(seed, &[0xAD7]));
    let mut out = ids[..count.min(clients)].to_vec();
    out.sort_unstable();
    out
}

/// Wraps client partitions with roles.
pub fn build_clients(parts: Vec<Vec<Sample>>, adversaries: &[usize]) -> Result<Vec<ClientState>> {
    parts
        .into_iter()
        .enumerate()
        .map(|(id, data)| {
            if data.is_empty() {
                return Err(Error::invalid(format!("client {id} has no data")));
            }
            let role = if adversaries.contains(&id) {
                Role::Adversarial
            } else {
                Role::Benign
            };
            Ok(ClientState { id, role, data })
        })
        .collect()
}

/// `k` distinct client indices for `round`, ascending.
pub fn select_clients(n: usize, k: usize, seed: u64, round: u32) -> Vec<usize> {
    let mut rng = seed::rng_for(seed, &[0x5E1, u64::from(round)]);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

fn check_updates(updates: &[&ModelWeights]) -> Result<()> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    for u in &updates[1..] {
        first.ensure_congruent(u, "client update")?;
    }
    Ok(())
}

/// Sample-count weighted average.
pub fn fedavg(updates: &[(ModelWeights, usize)]) -> Result<ModelWeights> {
    let refs: Vec<&ModelWeights> = updates.iter().map(|(w, _)| w).collect();
    check_updates(&refs)?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::invalid("fedavg needs a positive total sample count"));
    }
    let mut acc = vec![0.0; refs[0].param_count()];
    for (w, n) in updates {
        let scale = *n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(w.flatten()) {
            *a += scale * v;
        }
    }
    refs[0].with_flat(&acc)
}

fn coordinatewise(updates: &[ModelWeights], reduce: impl Fn(&mut [f64]) -> f64) -> Result<ModelWeights> {
    let refs: Vec<&ModelWeights> = updates.iter().collect();
    check_updates(&refs)?;
    let flats: Vec<Vec<f64>> = updates.iter().map(ModelWeights::flatten).collect();
    let mut column = vec![0.0; flats.len()];
    let out: Vec<f64> = (0..flats[0].len())
        .map(|j| {
            for (c, f) in column.iter_mut().zip(&flats) {
                *c = f[j];
            }
            column.sort_by(f64::total_cmp);
            reduce(&mut column)
        })
        .collect();
    updates[0].with_flat(&out)
}

/// Coordinate-wise mean after dropping the `trim_k` smallest and largest
/// client values.
pub fn trimmed_mean(updates: &[ModelWeights], trim_k: usize) -> Result<ModelWeights> {
    if updates.len() <= 2 * trim_k {
        return Err(Error::invalid(format!(
            "trimmed mean with trim_k={trim_k} needs more than {} clients, got {}",
            2 * trim_k,
            updates.len()
        )));
    }
    coordinatewise(updates, |sorted| {
        let kept = &sorted[trim_k..sorted.len() - trim_k];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

/// Coordinate-wise median; the mean of the middle two for even counts.
pub fn median(updates: &[ModelWeights]) -> Result<ModelWeights> {
    coordinatewise(updates, |sorted| {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        }
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// FLTrust aggregate and the per-client trust scores.
#[derive(Clone, Debug, PartialEq)]
pub struct FlTrustOutcome {
    pub weights: ModelWeights,
    pub trust: Vec<f64>,
    /// The server delta had zero norm and the global model was kept.
    pub skipped: bool,
}

/// Trust-weighted aggregation of client deltas against a server delta
/// computed on clean root data. Deltas are taken relative to `global`.
pub fn fltrust(global: &ModelWeights, updates: &[ModelWeights], server: &ModelWeights) -> Result<FlTrustOutcome> {
    let mut refs: Vec<&ModelWeights> = vec![global, server];
    refs.extend(updates);
    check_updates(&refs)?;
    if updates.is_empty() {
        return Err(Error::Empty("client updates"));
    }
    let g = global.flatten();
    let delta = |w: &ModelWeights| -> Vec<f64> { w.flatten().iter().zip(&g).map(|(a, b)| a - b).collect() };
    let ds = delta(server);
    let ns = norm(&ds);
    if ns == 0.0 {
        warn!("fltrust: server update has zero norm, round skipped");
        return Ok(FlTrustOutcome {
            weights: global.clone(),
            trust: vec![0.0; updates.len()],
            skipped: true,
        });
    }
    let mut acc = vec![0.0; g.len()];
    let mut trust = Vec::with_capacity(updates.len());
    for u in updates {
        let d = delta(u);
        let nd = norm(&d);
        let t = if nd == 0.0 { 0.0 } else { (dot(&d, &ds) / (nd * ns)).max(0.0) };
        trust.push(t);
        if t > 0.0 {
            let scale = t * ns / nd;
            for (a, v) in acc.iter_mut().zip(&d) {
                *a += scale * v;
            }
        }
    }
    let total: f64 = trust.iter().sum();
    if total == 0.0 {
        return Ok(FlTrustOutcome {
            weights: global.clone(),
            trust,
            skipped: false,
        });
    }
    let out: Vec<f64> = g.iter().zip(&acc).map(|(w, a)| w + a / total).collect();
    Ok(FlTrustOutcome {
        weights: global.with_flat(&out)?,
        trust,
        skipped: false,
    })
}

/// Everything a round needs besides the model and clients.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub fl: &'a FlConfig,
    pub grid: &'a GridSpec,
    /// Server root set, used by FLTrust.
    pub root: &'a [Sample],
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub global: Model,
    pub selected: Vec<usize>,
    /// Poisoning statistics of the adversarial clients selected.
    pub poison: Vec<(usize, PoisonSummary)>,
    pub skipped: bool,
}

/// Trains one client from `global`; adversaries first poison their data
/// against `global`.
pub fn local_update(
    global: &Model,
    client: &ClientState,
    ctx: &RoundContext,
    round: u32,
) -> Result<(Model, Option<PoisonSummary>)> {
    let seed = seed::derive(ctx.seed, &[0x10C, u64::from(round), client.id as u64]);
    match client.role {
        Role::Benign => Ok((global.train(&client.data, &ctx.fl.local_train(), seed)?, None)),
        Role::Adversarial => {
            let poisoned = poison_dataset(global, &client.data, ctx.grid)?;
            let model = global.train(&poisoned.samples, &ctx.fl.local_train(), seed)?;
            Ok((model, Some(poisoned.summary)))
        }
    }
}

/// Selects clients, trains them locally and aggregates.
pub fn run_round(global: &Model, clients: &[ClientState], ctx: &RoundContext, round: u32) -> Result<RoundOutput> {
    let k = ctx.fl.per_round.min(clients.len());
    if k == 0 {
        return Err(Error::Empty("client selection"));
    }
    let selected = select_clients(clients.len(), k, ctx.seed, round);
    let mut updates = Vec::with_capacity(k);
    let mut poison = Vec::new();
    for &i in &selected {
        let (model, summary) = local_update(global, &clients[i], ctx, round)?;
        if let Some(s) = summary {
            poison.push((clients[i].id, s));
        }
        updates.push((model.into_weights(), clients[i].sample_count()));
    }
    let mut skipped = false;
    let weights = match ctx.fl.aggregator {
        AggregatorKind::Fedavg => fedavg(&updates)?,
        AggregatorKind::TrimmedMean => {
            trimmed_mean(&updates.into_iter().map(|(w, _)| w).collect::<Vec<_>>(), ctx.fl.trim_k)?
        }
        AggregatorKind::Median => median(&updates.into_iter().map(|(w, _)| w).collect::<Vec<_>>())?,
        AggregatorKind::Fltrust => {
            if ctx.root.is_empty() {
                return Err(Error::Empty("fltrust root set"));
            }
            let server_seed = seed::derive(ctx.seed, &[0x5E7, u64::from(round)]);
            let server = global.train(ctx.root, &ctx.fl.local_train(), server_seed)?;
            let ws: Vec<ModelWeights> = updates.into_iter().map(|(w, _)| w).collect();
            let out = fltrust(global.weights(), &ws, server.weights())?;
            skipped = out.skipped;
            out.weights
        }
    };
    Ok(RoundOutput {
        global: global.with_weights(weights)?,
        selected,
        poison,
        skipped,
    })
}

/// Runs `fl.rounds` rounds from `init`; element `t` is the global model
/// after round `t + 1`.
pub fn simulate(init: &Model, clients: &[ClientState], ctx: &RoundContext) -> Result<Vec<RoundOutput>> {
    let mut out: Vec<RoundOutput> = Vec::with_capacity(ctx.fl.rounds as usize);
    for round in 1..=ctx.fl.rounds {
        let current = out.last().map_or(init, |o| &o.global);
        let next = run_round(current, clients, ctx, round)?;
        log::info!(
            "round {round}: selected {:?}, {} adversarial",
            next.selected,
            next.poison.len()
        );
        out.push(next);
    }
    Ok(out)
}

/// Mean of `1 − SSIM` between Grad-CAMs under `reference` and `current`,
/// both for the class `reference` predicts.
pub fn saliency_drift(reference: &Model, current: &Model, probe: &[Image]) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let mut total = 0.0;
    for x in probe {
        let class = reference.predict_label(x)?;
        let a = grad_cam(reference, x, class)?;
        let b = grad_cam(current, x, class)?;
        total += 1.0 - ssim(&a, &b)?;
    }
    Ok(total / probe.len() as f64)
}

/// Least-squares slope of `Δ ≈ α·r·t` through the origin, with the
/// coefficient of determination of that fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftFit {
    pub alpha: f64,
    pub r_squared: f64,
}

/// `series` holds `(t, r, Δ)` points.
pub fn fit_drift_slope(series: &[(f64, f64, f64)]) -> Result<DriftFit> {
    let sxx: f64 = series.iter().map(|(t, r, _)| (t * r) * (t * r)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("drift fit needs a point with t*r > 0"));
    }
    let sxy: f64 = series.iter().map(|(t, r, d)| t * r * d).sum();
    let alpha = sxy / sxx;
    let mean_d = series.iter().map(|p| p.2).sum::<f64>() / series.len() as f64;
    let ss_res: f64 = series.iter().map(|(t, r, d)| (d - alpha * t * r).powi(2)).sum();
    let ss_tot: f64 = series.iter().map(|p| (p.2 - mean_d).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 { 1.0 } else { 0.0 }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(DriftFit { alpha, r_squared })
}

/// Per-round evaluation of a global model against a reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    pub adversarial_ratio: f64,
    /// Clean-test accuracy, percent.
    pub accuracy: f64,
    /// Clean-test accuracy of the reference model, percent.
    pub reference_accuracy: f64,
    /// Test predictions agreeing with the reference model, percent.
    pub fidelity: f64,
    pub ssim_gc: f64,
    pub ssim_gcpp: f64,
    pub ssim_std: f64,
    /// Top-k peak overlap, percent.
    pub peak: f64,
    pub l1: f64,
    /// `1 − ssim_gc`.
    pub drift: f64,
}

/// Compares `model` with `reference` on the probe set (explanations, for
/// the class `reference` predicts) and the test set (accuracy, fidelity).
pub fn round_metrics(
    round: u32,
    adversarial_ratio: f64,
    model: &Model,
    reference: &Model,
    probe: &[Sample],
    test: &[Sample],
    k_fraction: f64,
) -> Result<RoundMetrics> {
    if probe.is_empty() || test.is_empty() {
        return Err(Error::Empty("probe or test set"));
    }
    let (mut correct, mut reference_correct, mut agree) = (0usize, 0usize, 0usize);
    for s in test {
        let p = model.predict_label(&s.image)?;
        let q = reference.predict_label(&s.image)?;
        correct += usize::from(p == s.label);
        reference_correct += usize::from(q == s.label);
        agree += usize::from(p == q);
    }
    let (mut gc, mut gcpp, mut peaks, mut l1s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in probe {
        let class = reference.predict_label(&s.image)?;
        let (ra, rb) = cam_pair(reference, &s.image, class)?;
        let (ma, mb) = cam_pair(model, &s.image, class)?;
        gc.push(ssim(&ra, &ma)?);
        gcpp.push(ssim(&rb, &mb)?);
        peaks.push(peak_overlap(&ra, &ma, k_fraction)?);
        l1s.push(l1_distance(&ra, &ma)?);
    }
    let ssim_gc = mean(&gc);
    Ok(RoundMetrics {
        round,
        adversarial_ratio,
        accuracy: 100.0 * correct as f64 / test.len() as f64,
        reference_accuracy: 100.0 * reference_correct as f64 / test.len() as f64,
        fidelity: 100.0 * agree as f64 / test.len() as f64,
        ssim_gc,
        ssim_gcpp: mean(&gcpp),
        ssim_std: std_dev(&gc),
        peak: mean(&peaks),
        l1: mean(&l1s),
        drift: 1.0 - ssim_gc,
    })
}

pub const ROUND_COLUMNS: [&str; 11] = [
    "round",
    "adversarial_ratio",
    "accuracy",
    "reference_accuracy",
    "fidelity",
    "ssim_gc",
    "ssim_gcpp",
    "ssim_std",
    "peak",
    "l1",
    "drift",
];

pub fn metrics_table(rows: &[RoundMetrics]) -> Table {
    let mut t = Table::new(&ROUND_COLUMNS);
    for m in rows {
        t.push(vec![
            cell(m.round),
            cell(m.adversarial_ratio),
            cell(m.accuracy),
            cell(m.reference_accuracy),
            cell(m.fidelity),
            cell(m.ssim_gc),
            cell(m.ssim_gcpp),
            cell(m.ssim_std),
            cell(m.peak),
            cell(m.l1),
            cell(m.drift),
        ])
        .expect("row matches header");
    }
    t
}
