//! Matrix-factorization preference embeddings trained with the BPR pairwise
//! objective `−ln σ(s_pos − s_neg)`, where `s = e_u · e_v`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Tensor};
use crate::par::{self, Parallelism};
use crate::rng::{indexed_rng, stage_rng};

pub const USER_TABLE: &str = "user_table";
pub const ITEM_TABLE: &str = "item_table";

/// Anything that scores user-item affinity and exposes per-id embeddings.
pub trait PreferenceModel {
    fn user_embedding(&self, user: usize) -> &[f64];
    fn item_embedding(&self, item: usize) -> &[f64];
    fn dim(&self) -> usize;

    fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.user_embedding(user), self.item_embedding(item))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceEmbeddings {
    pub user_table: Tensor,
    pub item_table: Tensor,
}

impl PreferenceModel for PreferenceEmbeddings {
    fn user_embedding(&self, user: usize) -> &[f64] {
        self.user_table.row_slice(user)
    }

    fn item_embedding(&self, item: usize) -> &[f64] {
        self.item_table.row_slice(item)
    }

    fn dim(&self) -> usize {
        self.user_table.cols()
    }
}

impl PreferenceEmbeddings {
    pub fn n_users(&self) -> usize {
        self.user_table.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("pretrain");
        c.insert(USER_TABLE, self.user_table.clone());
        c.insert(ITEM_TABLE, self.item_table.clone());
        c.metadata.insert("d_e".into(), self.dim().to_string());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, expected_dim: Option<usize>) -> Result<Self> {
        let names: Vec<&str> = c.tensors.keys().map(String::as_str).collect();
        if names != [ITEM_TABLE, USER_TABLE] {
            return Err(Error::Format(format!(
                "preference checkpoint must hold exactly {{{ITEM_TABLE}, {USER_TABLE}}}, found {names:?}"
            )));
        }
        let user_table = c.tensors[USER_TABLE].clone();
        let item_table = c.tensors[ITEM_TABLE].clone();
        if user_table.cols() != item_table.cols() {
            return Err(Error::Format("user and item tables differ in width".into()));
        }
        if let Some(d) = expected_dim {
            if user_table.cols() != d {
                return Err(Error::Dimension(format!(
                    "preference embeddings have d_e={}, configuration expects {d}",
                    user_table.cols()
                )));
            }
        }
        Ok(PreferenceEmbeddings { user_table, item_table })
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn import(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, expected_dim)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−ln σ(pos − neg)`, via softplus so large negative margins don't overflow.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    softplus(score_neg - score_pos)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOneOut {
    pub train: Vec<(usize, usize)>,
    /// One held-out (user, item) per user with at least two interactions.
    pub held_out: Vec<(usize, usize)>,
}

pub fn leave_one_out_split(pairs: &[(usize, usize)], seed: u64) -> LeaveOneOut {
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, i) in pairs {
        by_user.entry(u).or_default().push(i);
    }
    let mut train = Vec::with_capacity(pairs.len());
    let mut held_out = Vec::new();
    for (u, items) in by_user {
        let held = if items.len() >= 2 {
            let mut rng = indexed_rng(seed, "leave-one-out", u as u64);
            Some(rng.random_range(0..items.len()))
        } else {
            None
        };
        for (j, &i) in items.iter().enumerate() {
            if Some(j) == held {
                held_out.push((u, i));
            } else {
                train.push((u, i));
            }
        }
    }
    LeaveOneOut { train, held_out }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub negatives_per_positive: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        BprConfig {
            dim: 64,
            epochs: 50,
            lr: 0.05,
            weight_decay: 1e-4,
            negatives_per_positive: 1,
            init_std: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprOutcome {
    pub embeddings: PreferenceEmbeddings,
    /// Mean BPR loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// SGD over (user, positive, sampled negative) triples with L2 decay.
pub fn train_mf_bpr(
    n_users: usize,
    n_items: usize,
    interactions: &[(usize, usize)],
    cfg: &BprConfig,
) -> Result<BprOutcome> {
    if interactions.is_empty() {
        return Err(Error::Data("empty user-item relation".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    if let Some(&(u, i)) = interactions.iter().find(|&&(u, i)| u >= n_users || i >= n_items) {
        return Err(Error::Data(format!("interaction ({u}, {i}) outside {n_users}×{n_items}")));
    }
    let mut rng = stage_rng(cfg.seed, "bpr-init");
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut init = |rows: usize| {
        let data = (0..rows * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
        Tensor::matrix(rows, cfg.dim, data)
    };
    let mut users = init(n_users)?;
    let mut items = init(n_items)?;

    let positives: HashSet<(usize, usize)> = interactions.iter().copied().collect();
    if positives.len() as u64 >= n_users as u64 * n_items as u64 {
        return Err(Error::Data("every user-item pair is positive; no negatives to sample".into()));
    }
    let mut order: Vec<(usize, usize)> = interactions.to_vec();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let d = cfg.dim;
    let mut gu = vec![0.0; d];
    for epoch in 0..cfg.epochs {
        let mut rng = indexed_rng(cfg.seed, "bpr-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(u, pos) in &order {
            for _ in 0..cfg.negatives_per_positive {
                let neg = loop {
                    let j = rng.random_range(0..n_items);
                    if !positives.contains(&(u, j)) {
                        break j;
                    }
                };
                let eu = users.row_slice(u);
                let margin = dot(eu, items.row_slice(pos)) - dot(eu, items.row_slice(neg));
                total += softplus(-margin);
                count += 1;
                // d/d(margin) of -ln σ(margin)
                let coef = sigmoid(-margin);
                for f in 0..d {
                    gu[f] = coef * (items.get(pos, f) - items.get(neg, f)) - cfg.weight_decay * eu[f];
                }
                for f in 0..d {
                    let uf = users.get(u, f);
                    let p = items.get(pos, f);
                    let n = items.get(neg, f);
                    items.set(pos, f, p + cfg.lr * (coef * uf - cfg.weight_decay * p));
                    items.set(neg, f, n + cfg.lr * (-coef * uf - cfg.weight_decay * n));
                }
                for (f, g) in gu.iter().enumerate() {
                    let uf = users.get(u, f);
                    users.set(u, f, uf + cfg.lr * g);
                }
            }
        }
        let mean = total / count as f64;
        if !mean.is_finite() || !users.is_finite() || !items.is_finite() {
            return Err(Error::Numerical(format!(
                "BPR loss became non-finite in epoch {epoch}; try a smaller learning rate than {}",
                cfg.lr
            )));
        }
        log::debug!("bpr epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(BprOutcome {
        embeddings: PreferenceEmbeddings { user_table: users, item_table: items },
        epoch_losses,
    })
}

/// Mean over held-out pairs of the fraction of sampled non-interacted items
/// scored strictly below the positive (ties count one half).
pub fn auc_eval<P: PreferenceModel + Sync>(
    model: &P,
    n_items: usize,
    held_out: &[(usize, usize)],
    known: &HashSet<(usize, usize)>,
    n_neg_samples: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::Argument("no held-out pairs".into()));
    }
    if n_neg_samples == 0 {
        return Err(Error::Argument("need at least one negative sample".into()));
    }
    let per_pair = par::map_range(mode, held_out.len(), |idx| {
        let (u, pos) = held_out[idx];
        let mut rng = indexed_rng(seed, "auc", idx as u64);
        let sp = model.score(u, pos);
        let mut wins = 0.0;
        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < n_neg_samples && attempts < n_neg_samples * 100 {
            attempts += 1;
            let j = rng.random_range(0..n_items);
            if j == pos || known.contains(&(u, j)) {
                continue;
            }
            drawn += 1;
            let sn = model.score(u, j);
            if sn < sp {
                wins += 1.0;
            } else if sn == sp {
                wins += 0.5;
            }
        }
        if drawn == 0 {
            None
        } else {
            Some(wins / drawn as f64)
        }
    });
    let vals: Vec<f64> = per_pair.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(Error::Data("no negatives could be sampled".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
