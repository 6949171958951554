//! Bundle loss, Hungarian matching, Adam and the training loop.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::data::GenerationInstance;
use crate::decoder::PredictionDistribution;
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::layers::ForwardCtx;
use crate::model::{gather, BundleNat};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::par::{self, Parallelism};
use crate::rng::{derive_seed, indexed_rng, stage_rng};

const LOG_CLAMP: f64 = 1e-12;

/// Binary targets over the candidate list: 1 where the candidate is in the
/// bundle.
pub fn candidate_targets(inst: &GenerationInstance) -> Result<Vec<f64>> {
    if let Some(&bad) = inst.bundle.iter().find(|b| !inst.candidates.contains(b)) {
        return Err(Error::Data(format!("bundle item {bad} is not among the candidates")));
    }
    Ok(inst
        .candidates
        .iter()
        .map(|c| if inst.bundle.contains(c) { 1.0 } else { 0.0 })
        .collect())
}

/// Binary cross-entropy of the predicted probabilities on the candidate
/// coordinates, with log arguments clamped at 1e-12.
pub fn bundle_bce_loss(dist: &PredictionDistribution, inst: &GenerationInstance) -> Result<f64> {
    let targets = candidate_targets(inst)?;
    let mut loss = 0.0;
    for (&c, &y) in inst.candidates.iter().zip(&targets) {
        let p = *dist
            .probs
            .get(c)
            .ok_or(Error::Range { what: "item", id: c, size: dist.n_items() })?;
        loss -= y * p.max(LOG_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln();
    }
    Ok(loss)
}

/// Taped form of [`bundle_bce_loss`] on `1×N` logits.
pub fn bundle_bce_var(tape: &mut Tape, logits: Var, inst: &GenerationInstance) -> Result<Var> {
    let targets = candidate_targets(inst)?;
    let z = tape.gather_cols(logits, &inst.candidates)?;
    tape.bce_with_logits(z, &targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `slot_to_item[s]` is the target index matched to slot `s`.
    pub slot_to_item: Vec<usize>,
    pub cost: f64,
}

fn square(cost: &[Vec<f64>]) -> Result<usize> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::Argument("empty cost matrix".into()));
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Argument("cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Argument("cost matrix has non-finite entries".into()));
    }
    Ok(n)
}

/// Shortest-augmenting-path Hungarian method with row/column potentials.
/// Returns `row → column`.
fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(s, &t)| cost[s][t]).sum()
}

/// Minimum-cost bijection from slots (rows) to targets (columns). Among
/// co-optimal assignments the lexicographically smallest `slot_to_item` is
/// returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = square(cost)?;
    let best = total(cost, &solve(cost));
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale * n as f64;

    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for s in 0..n {
        let mut chosen = None;
        for t in (0..n).filter(|&t| !used[t]) {
            let prefix: f64 = fixed.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>() + cost[s][t];
            let rows: Vec<usize> = (s + 1..n).collect();
            let cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != t).collect();
            let rest = if rows.is_empty() {
                0.0
            } else {
                let sub: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect();
                let perm = solve(&sub);
                total(&sub, &perm)
            };
            if prefix + rest <= best + tol {
                chosen = Some(t);
                break;
            }
        }
        // The optimal column always passes; fall back to it defensively.
        let t = chosen.unwrap_or_else(|| solve(cost)[s]);
        used[t] = true;
        fixed.push(t);
    }
    let cost_value = total(cost, &fixed);
    Ok(Assignment { slot_to_item: fixed, cost: cost_value })
}

/// Slot × target cross-entropy costs `−ln p_s[t]` (clamped at 1e-12).
pub fn slot_costs(slot_dists: &Tensor, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (k, n) = slot_dists.dims();
    if targets.len() != k {
        return Err(Error::Argument(format!("{k} slots but {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Range { what: "item", id: bad, size: n });
    }
    Ok((0..k)
        .map(|s| targets.iter().map(|&t| -slot_dists.get(s, t).max(LOG_CLAMP).ln()).collect())
        .collect())
}

/// Order-agnostic cross-entropy: the summed slot cross-entropy under the
/// best slot → target ordering.
pub fn oaxe_slot_loss(slot_dists: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(hungarian_match(&slot_costs(slot_dists, targets)?)?.cost)
}

/// Taped order-agnostic loss on `K×N` slot logits (row-softmaxed). The
/// matching is computed on the current values and held fixed for the
/// gradient.
pub fn oaxe_slot_var(tape: &mut Tape, slot_logits: Var, targets: &[usize]) -> Result<Var> {
    let probs = crate::numerics::softmax_rows(tape.value(slot_logits))?;
    let assignment = hungarian_match(&slot_costs(&probs, targets)?)?;
    let ordered: Vec<usize> = assignment.slot_to_item.iter().map(|&t| targets[t]).collect();
    tape.cross_entropy_rows(slot_logits, &ordered)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, with
/// `weight_decay · θ` added to each gradient first.
pub fn adam_step(store: &mut ParamStore, cfg: AdamConfig) -> Result<()> {
    if !store.has_grads() {
        return Err(Error::State("adam_step without accumulated gradients".into()));
    }
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.iter_mut() {
        let crate::numerics::Param { value, grad, first_moment, second_moment } = p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(first_moment.data_mut())
            .zip(second_moment.data_mut())
        {
            let g = g + cfg.weight_decay * *w;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Instances per update; the loss is averaged over the batch.
    pub batch: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            dropout: 0.0,
            weight_decay: 1e-5,
            epochs: 20,
            batch: 1,
            seed: 0,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean per-instance loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    /// `epoch,loss` lines, epochs numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (e, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l:?}", e + 1);
        }
        s
    }
}

struct InstanceGrad {
    loss: f64,
    grads: crate::numerics::Gradients,
    compat_rows: Option<(Var, Vec<usize>)>,
}

fn instance_gradient(
    model: &BundleNat,
    inst: &GenerationInstance,
    compat: Option<&Tensor>,
    scale: f64,
    mut ctx: ForwardCtx,
) -> Result<InstanceGrad> {
    model.check_instance(inst)?;
    let mut tape = Tape::new();
    let rows = compat.map(|c| tape.input(gather(c, &inst.candidates)));
    let z = model.logits_var(&mut tape, inst, rows, &mut ctx)?;
    let loss = bundle_bce_var(&mut tape, z, inst)?;
    let value = tape.value(loss).item();
    let scaled = tape.scale(loss, scale);
    let grads = tape.backward_grads(scaled)?;
    Ok(InstanceGrad { loss: value, grads, compat_rows: rows.map(|r| (r, inst.candidates.clone())) })
}

/// Accumulates the averaged batch loss gradient into `model.params` and
/// returns the summed (unaveraged) loss.
///
/// The GNN runs once per batch; each instance gets its own tape with the
/// candidates' GNN rows as inputs, and the row gradients are scattered back
/// into one upstream gradient for the GNN tape.
pub fn batch_gradient(
    model: &mut BundleNat,
    batch: &[&GenerationInstance],
    dropout: f64,
    dropout_seed: u64,
    mode: Parallelism,
) -> Result<f64> {
    let mut gnn_tape = Tape::new();
    let compat_var = model.compat_var(&mut gnn_tape)?;
    let compat = compat_var.map(|v| gnn_tape.value(v).clone());
    let scale = 1.0 / batch.len() as f64;
    let results = {
        let model = &*model;
        par::map_range(mode, batch.len(), |i| {
            let ctx = if dropout > 0.0 {
                ForwardCtx::train(dropout, indexed_rng(dropout_seed, "dropout", i as u64))
            } else {
                ForwardCtx::eval()
            };
            instance_gradient(model, batch[i], compat.as_ref(), scale, ctx)
        })
    };

    let mut loss = 0.0;
    let mut upstream = compat.as_ref().map(|c| Tensor::zeros(c.rows(), c.cols()));
    for r in results {
        let r = r?;
        loss += r.loss;
        model.params.accumulate(&r.grads)?;
        if let (Some(up), Some((var, ids))) = (upstream.as_mut(), r.compat_rows) {
            if let Some(g) = r.grads.inputs.get(&var) {
                for (row, &id) in ids.iter().enumerate() {
                    for (a, b) in up.row_slice_mut(id).iter_mut().zip(g.row_slice(row)) {
                        *a += b;
                    }
                }
            }
        }
    }
    if let (Some(var), Some(up)) = (compat_var, upstream) {
        let g = gnn_tape.backward_seeded(var, up)?;
        model.params.accumulate(&g)?;
    }
    Ok(loss)
}

/// Mean candidate BCE over `instances` in evaluation mode.
pub fn mean_loss(model: &BundleNat, instances: &[GenerationInstance], mode: Parallelism) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Argument("no instances".into()));
    }
    let compat = model.compat_table()?;
    let losses = par::map(mode, instances, |inst| -> Result<f64> {
        let mut tape = Tape::new();
        let rows = compat.as_ref().map(|c| tape.constant(gather(c, &inst.candidates)));
        model.check_instance(inst)?;
        let z = model.logits_var(&mut tape, inst, rows, &mut ForwardCtx::eval())?;
        let l = bundle_bce_var(&mut tape, z, inst)?;
        Ok(tape.value(l).item())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / instances.len() as f64)
}

/// Trains `model.params` in place. Preference tables stay frozen.
pub fn train(model: &mut BundleNat, instances: &[GenerationInstance], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Argument("no training instances".into()));
    }
    let adam = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut log = TrainLog { epoch_losses: Vec::with_capacity(cfg.epochs) };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<&GenerationInstance> = instances.iter().collect();
        order.shuffle(&mut indexed_rng(cfg.seed, "epoch-order", epoch as u64));
        let epoch_seed = derive_seed(cfg.seed, &format!("epoch-{epoch}"));
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            model.params.zero_grad();
            let seed = derive_seed(epoch_seed, &format!("batch-{b}"));
            let loss = batch_gradient(model, batch, cfg.dropout, seed, cfg.parallelism)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} in epoch {}; try a learning rate below {}",
                    epoch + 1,
                    cfg.lr
                )));
            }
            total += loss;
            adam_step(&mut model.params, adam)?;
        }
        let mean = total / instances.len() as f64;
        debug!("epoch {} loss {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    model.params.zero_grad();
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lrs: vec![1e-4, 1e-3, 1e-2, 1e-1],
            dropouts: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            weight_decays: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

impl GridSpec {
    pub fn points(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &dropout in &self.dropouts {
                for &weight_decay in &self.weight_decays {
                    out.push(TrainConfig { lr, dropout, weight_decay, ..*base });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: TrainConfig,
    /// Recall@k on the held-out part of the training split; `None` if the
    /// run diverged.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: TrainConfig,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    /// Tab-separated `lr dropout weight_decay recall` table.
    pub fn table(&self) -> String {
        let mut s = String::from("lr\tdropout\tweight_decay\trecall\n");
        for r in &self.rows {
            let recall = r.recall.map_or("diverged".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{}\t{}\t{}\t{recall}", r.config.lr, r.config.dropout, r.config.weight_decay);
        }
        s
    }
}

/// Holds out a seeded 10% of `train` (at least one instance), trains a
/// fresh model per grid point on the rest and keeps the point with the best
/// held-out Recall@k. Earlier grid points win ties.
pub fn grid_search<F>(
    train_set: &[GenerationInstance],
    k: usize,
    grid: &GridSpec,
    base: &TrainConfig,
    make_model: F,
    jobs: Parallelism,
) -> Result<GridResult>
where
    F: Fn() -> Result<BundleNat> + Sync,
{
    let points = grid.points(base);
    if points.is_empty() {
        return Err(Error::Argument("empty hyperparameter grid".into()));
    }
    if train_set.len() < 2 {
        return Err(Error::Argument("grid search needs at least two training instances".into()));
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut stage_rng(base.seed, "grid-holdout"));
    let n_hold = (train_set.len() / 10).max(1);
    let held: Vec<GenerationInstance> = order[..n_hold].iter().map(|&i| train_set[i].clone()).collect();
    let fit: Vec<GenerationInstance> = order[n_hold..].iter().map(|&i| train_set[i].clone()).collect();
    let truth: Vec<Vec<usize>> = held.iter().map(|i| i.bundle.clone()).collect();

    let inner = if jobs.is_parallel() { Parallelism::Sequential } else { base.parallelism };
    let runs = par::map(jobs, &points, |cfg| -> Result<Option<f64>> {
        let mut model = make_model()?;
        let cfg = TrainConfig { parallelism: inner, ..*cfg };
        match train(&mut model, &fit, &cfg) {
            Ok(_) => {}
            Err(Error::Numerical(msg)) => {
                info!("grid point lr={} diverged: {msg}", cfg.lr);
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
        let pred = model.predict_many(&held, k, inner)?;
        Ok(Some(recall_at_k(&pred, &truth, k)?))
    });
    let mut rows = Vec::with_capacity(points.len());
    for (config, run) in points.into_iter().zip(runs) {
        rows.push(GridRow { config, recall: run? });
    }
    let best = rows
        .iter()
        .filter_map(|r| r.recall.map(|v| (v, r.config)))
        .fold(None, |acc: Option<(f64, TrainConfig)>, (v, c)| match acc {
            Some((bv, _)) if bv >= v => acc,
            _ => Some((v, c)),
        })
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Numerical("every grid point diverged".into()))?;
    Ok(GridResult { best, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], s: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if s == cost.len() {
                *best = best.min(acc);
                return;
            }
            for t in 0..cost.len() {
                if !used[t] {
                    used[t] = true;
                    rec(cost, s + 1, used, acc + cost[s][t], best);
                    used[t] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.slot_to_item, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
        let mut diag = vec![vec![1.0; 4]; 4];
        for (i, row) in diag.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let a = hungarian_match(&diag).unwrap();
        assert_eq!(a.slot_to_item, vec![0, 1, 2, 3]);
        assert_eq!(a.cost, 0.0);
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian_match(&[]).is_err());
    }

    #[test]
    fn hungarian_ties_pick_lexicographic_smallest() {
        let a = hungarian_match(&vec![vec![1.0; 3]; 3]).unwrap();
        assert_eq!(a.slot_to_item, vec![0, 1, 2]);
        let a = hungarian_match(&[vec![0.0, 0.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(a.slot_to_item, vec![0, 1]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = stage_rng(1, "hung");
        for _ in 0..100 {
            let cost: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let a = hungarian_match(&cost).unwrap();
            assert_eq!(a.cost, brute_force(&cost));
            let mut seen = a.slot_to_item.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn oaxe_examples() {
        let d = Tensor::from_rows(&[[0.2, 0.5, 0.3]]);
        assert!((oaxe_slot_loss(&d, &[1]).unwrap() - -(0.5f64.ln())).abs() < 1e-15);
        let onehot = Tensor::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(oaxe_slot_loss(&onehot, &[0, 2]).unwrap().abs() < 1e-12);
        assert!(oaxe_slot_loss(&onehot, &[2, 0]).unwrap().abs() < 1e-12);
        assert!(oaxe_slot_loss(&onehot, &[2]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let inst = GenerationInstance { user: 0, candidates: vec![3, 1, 0, 2], bundle: vec![1, 2] };
        let half = PredictionDistribution::from_probs(vec![0.5; 5], &inst.candidates).unwrap();
        assert!((bundle_bce_loss(&half, &inst).unwrap() - 4.0 * 2f64.ln()).abs() < 1e-12);
        let sharp = PredictionDistribution::from_probs(vec![1e-15, 1.0 - 1e-15, 1.0 - 1e-15, 1e-15, 0.5], &inst.candidates).unwrap();
        assert!(bundle_bce_loss(&sharp, &inst).unwrap() < 1e-12);
        let bad = GenerationInstance { bundle: vec![4], ..inst };
        assert!(matches!(bundle_bce_loss(&half, &bad), Err(Error::Data(_))));
    }

    #[test]
    fn bce_matches_scalar_loop_and_taped_form() {
        let mut rng = stage_rng(2, "bce");
        let n = 12;
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let inst = GenerationInstance { user: 0, candidates: vec![7, 2, 9, 0, 5], bundle: vec![9, 0] };
        let dist = PredictionDistribution::from_logits(logits.clone(), &inst.candidates).unwrap();
        let mut oracle = 0.0;
        for &c in &inst.candidates {
            let p = 1.0 / (1.0 + (-logits[c]).exp());
            let y = if inst.bundle.contains(&c) { 1.0 } else { 0.0 };
            oracle += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        assert!((bundle_bce_loss(&dist, &inst).unwrap() - oracle).abs() < 1e-12);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, n, logits).unwrap());
        let l = bundle_bce_var(&mut tape, z, &inst).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_hand_trace() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_rows(&[[1.0, -2.0]])).unwrap();
        store.accumulate_grad("w", &Tensor::from_rows(&[[0.5, -4.0]])).unwrap();
        adam_step(&mut store, AdamConfig::new(0.1, 0.0)).unwrap();
        // m̂ = g, v̂ = g², so each step is lr·g/(|g| + eps).
        let w = store.value("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_fixed_point_and_state_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_rows(&[[1.5]])).unwrap();
        assert!(matches!(adam_step(&mut store, AdamConfig::new(0.1, 0.0)), Err(Error::State(_))));
        store.accumulate_grad("w", &Tensor::from_rows(&[[0.0]])).unwrap();
        adam_step(&mut store, AdamConfig::new(0.1, 0.0)).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn train_log_format() {
        let log = TrainLog { epoch_losses: vec![0.5, 0.25] };
        assert_eq!(log.to_csv(), "1,0.5\n2,0.25\n");
    }

    #[test]
    fn grid_points_cardinality() {
        let g = GridSpec::default();
        assert_eq!(g.points(&TrainConfig::default()).len(), 4 * 5 * 5);
    }
}
