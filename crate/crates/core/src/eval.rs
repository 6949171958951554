//! Bundle metrics, ranking baselines, decoder pass accounting and reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, GenerationInstance};
use crate::decoder::{self, PredictionDistribution};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::BundleNat;
use crate::numerics::Tape;
use crate::par::{self, Parallelism};
use crate::pretrain::{PreferenceEmbeddings, PreferenceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionMode {
    /// `predicted[0] == truth[0]`.
    #[default]
    FirstMatch,
    /// `predicted[0] ∈ truth`.
    Member,
}

impl std::str::FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-match" => Ok(PrecisionMode::FirstMatch),
            "member" => Ok(PrecisionMode::Member),
            other => Err(Error::Argument(format!("unknown precision mode {other:?}"))),
        }
    }
}

fn check_pairs(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Argument("no instances to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.is_empty() || t.is_empty() {
            return Err(Error::Argument("empty bundle".into()));
        }
        if p.len() != t.len() {
            return Err(Error::Argument(format!("predicted size {} vs truth size {}", p.len(), t.len())));
        }
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn precision_at_k(pred: &[Vec<usize>], truth: &[Vec<usize>], mode: PrecisionMode) -> Result<f64> {
    check_pairs(pred, truth)?;
    Ok(mean(
        pred.iter().zip(truth).map(|(p, t)| {
            indicator(match mode {
                PrecisionMode::FirstMatch => p[0] == t[0],
                PrecisionMode::Member => t.contains(&p[0]),
            })
        }),
        pred.len(),
    ))
}

pub fn precision_plus_at_k(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    check_pairs(pred, truth)?;
    Ok(mean(
        pred.iter().zip(truth).map(|(p, t)| indicator(p.iter().any(|x| t.contains(x)))),
        pred.len(),
    ))
}

pub fn recall_at_k(pred: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    check_pairs(pred, truth)?;
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    Ok(mean(
        pred.iter()
            .zip(truth)
            .map(|(p, t)| p.iter().filter(|x| t.contains(x)).count() as f64 / k as f64),
        pred.len(),
    ))
}

/// Top-k of `candidates` by `score`, descending, ties by ascending id.
pub fn top_k_by<F: Fn(usize) -> f64>(candidates: &[usize], k: usize, score: F) -> Result<Vec<usize>> {
    if k == 0 || k > candidates.len() {
        return Err(Error::Argument(format!("k={k} but {} candidates", candidates.len())));
    }
    let mut ranked: Vec<(f64, usize)> = candidates.iter().map(|&c| (score(c), c)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, c)| c).collect())
}

pub trait BundlePredictor: Sync {
    fn name(&self) -> &str;

    fn predict(&self, inst: &GenerationInstance, k: usize) -> Result<Vec<usize>>;

    fn predict_many(&self, instances: &[GenerationInstance], k: usize, mode: Parallelism) -> Result<Vec<Vec<usize>>> {
        par::map(mode, instances, |i| self.predict(i, k)).into_iter().collect()
    }

    /// Decoder passes spent per bundle.
    fn passes_per_bundle(&self, _k: usize) -> usize {
        0
    }
}

/// Most frequent training-bundle members first.
#[derive(Debug, Clone, PartialEq)]
pub struct PopBaseline {
    pub counts: Vec<usize>,
}

impl PopBaseline {
    pub fn fit(train: &[GenerationInstance], n_items: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Argument("POP needs training instances".into()));
        }
        let mut counts = vec![0; n_items];
        for item in train.iter().flat_map(|i| &i.bundle) {
            *counts
                .get_mut(*item)
                .ok_or(Error::Range { what: "item", id: *item, size: n_items })? += 1;
        }
        Ok(PopBaseline { counts })
    }
}

impl BundlePredictor for PopBaseline {
    fn name(&self) -> &str {
        "POP"
    }

    fn predict(&self, inst: &GenerationInstance, k: usize) -> Result<Vec<usize>> {
        top_k_by(&inst.candidates, k, |c| self.counts.get(c).copied().unwrap_or(0) as f64)
    }
}

/// Candidates ranked by the pretrained user·item score.
#[derive(Debug, Clone, PartialEq)]
pub struct BprBaseline {
    pub prefs: PreferenceEmbeddings,
}

impl BundlePredictor for BprBaseline {
    fn name(&self) -> &str {
        "BPR"
    }

    fn predict(&self, inst: &GenerationInstance, k: usize) -> Result<Vec<usize>> {
        if inst.user >= self.prefs.n_users() {
            return Err(Error::Range { what: "user", id: inst.user, size: self.prefs.n_users() });
        }
        if let Some(&bad) = inst.candidates.iter().find(|&&c| c >= self.prefs.n_items()) {
            return Err(Error::Range { what: "item", id: bad, size: self.prefs.n_items() });
        }
        top_k_by(&inst.candidates, k, |c| self.prefs.score(inst.user, c))
    }
}

impl BundlePredictor for BundleNat {
    fn name(&self) -> &str {
        "BundleNAT"
    }

    fn predict(&self, inst: &GenerationInstance, k: usize) -> Result<Vec<usize>> {
        BundleNat::predict(self, inst, k)
    }

    fn predict_many(&self, instances: &[GenerationInstance], k: usize, mode: Parallelism) -> Result<Vec<Vec<usize>>> {
        BundleNat::predict_many(self, instances, k, mode)
    }

    fn passes_per_bundle(&self, _k: usize) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub precision: f64,
    pub precision_plus: f64,
    pub recall: f64,
    pub k: usize,
    pub m: usize,
    pub n_instances: usize,
    pub passes_per_bundle: usize,
}

pub fn evaluate<P: BundlePredictor + ?Sized>(
    predictor: &P,
    instances: &[GenerationInstance],
    k: usize,
    mode: PrecisionMode,
    parallelism: Parallelism,
) -> Result<MethodReport> {
    let pred = predictor.predict_many(instances, k, parallelism)?;
    let truth: Vec<Vec<usize>> = instances.iter().map(|i| i.bundle.clone()).collect();
    Ok(MethodReport {
        method: predictor.name().to_string(),
        precision: precision_at_k(&pred, &truth, mode)?,
        precision_plus: precision_plus_at_k(&pred, &truth)?,
        recall: recall_at_k(&pred, &truth, k)?,
        k,
        m: instances.first().map_or(0, |i| i.candidates.len()),
        n_instances: instances.len(),
        passes_per_bundle: predictor.passes_per_bundle(k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub k: usize,
    pub nat_passes_per_bundle: usize,
    pub autoregressive_passes_per_bundle: usize,
}

/// Autoregressive comparison stub: same encoder output, one decoder pass
/// per emitted item, each pass picking the best remaining candidate.
/// Returns the bundle and the number of decoder passes.
pub fn autoregressive_decode(model: &BundleNat, inst: &GenerationInstance, k: usize) -> Result<(Vec<usize>, usize)> {
    let compat = model.compat_table()?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut passes = 0;
    while chosen.len() < k {
        let mut tape = Tape::new();
        let x_f = model.encode_instance(&mut tape, inst, compat.as_ref())?;
        let z = decoder::decode_logits(&mut tape, &model.params, &model.decoder_shape(), x_f, &mut ForwardCtx::eval())?;
        passes += 1;
        let remaining: Vec<usize> = inst.candidates.iter().copied().filter(|c| !chosen.contains(c)).collect();
        let dist = PredictionDistribution::from_logits(tape.value(z).data().to_vec(), &remaining)?;
        chosen.push(decoder::infer_bundle(&dist, 1)?[0]);
    }
    Ok((chosen, passes))
}

/// Decoder passes per generated bundle for one-shot decoding and for the
/// autoregressive stub, averaged over `instances`.
pub fn latency_account(model: &BundleNat, instances: &[GenerationInstance], ks: &[usize]) -> Result<Vec<LatencyRow>> {
    if instances.is_empty() {
        return Err(Error::Argument("no instances".into()));
    }
    let compat = model.compat_table()?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut nat = 0;
        let mut ar = 0;
        for inst in instances {
            nat += model.decode_with(inst, compat.as_ref(), k)?.passes;
            ar += autoregressive_decode(model, inst, k)?.1;
        }
        rows.push(LatencyRow {
            k,
            nat_passes_per_bundle: nat / instances.len(),
            autoregressive_passes_per_bundle: ar / instances.len(),
        });
    }
    Ok(rows)
}

/// Counts plus an FNV-1a hash of the instance lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub hash: String,
}

impl DatasetFingerprint {
    pub fn of(split: &DatasetSplit) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for inst in split.train.iter().chain(&split.test) {
            for b in inst.to_line().bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        DatasetFingerprint {
            n_users: split.vocab.users,
            n_items: split.vocab.items,
            n_train: split.train.len(),
            n_test: split.test.len(),
            hash: format!("{h:016x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision_mode: PrecisionMode,
    pub methods: Vec<MethodReport>,
    pub latency: Vec<LatencyRow>,
    pub dataset: DatasetFingerprint,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Method × metric table.
    pub fn render_table(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10} {:>10}\n", "method", "P@K", "P+@K", "R@K");
        for m in &self.methods {
            s += &format!("{:<10} {:>10.4} {:>10.4} {:>10.4}\n", m.method, m.precision, m.precision_plus, m.recall);
        }
        s
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
