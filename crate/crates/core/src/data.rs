//! Interaction tables, generation instances and the planted synthetic
//! generator.
//!
//! A generation instance pairs one user with an ordered candidate list of
//! `m` distinct items, `k` of which form the ground-truth bundle. Instances
//! are built per (user, interacted bundle) pair: `k` items are sampled from
//! the bundle, `m − k` negatives are drawn uniformly from the rest of the
//! vocabulary, and the positives are scattered into random candidate slots.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::rng::{indexed_rng, stage_rng, Rng};

pub const INSTANCE_VERSION: &str = "v1";
pub const TRAIN_FILE: &str = "train.inst";
pub const TEST_FILE: &str = "test.inst";
pub const USER_ITEM_FILE: &str = "user_item.tsv";
pub const USER_BUNDLE_FILE: &str = "user_bundle.tsv";
pub const BUNDLE_ITEM_FILE: &str = "bundle_item.tsv";

/// Vocabulary sizes. Ids are contiguous from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocab {
    pub users: usize,
    pub items: usize,
    pub bundles: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionTables {
    pub vocab: Vocab,
    pub user_item: Vec<(usize, usize)>,
    pub user_bundle: Vec<(usize, usize)>,
    pub bundle_item: Vec<(usize, usize)>,
}

fn dedup_pairs(mut pairs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

impl InteractionTables {
    /// Deduplicates, sorts and validates the relations against `vocab`.
    pub fn new(
        vocab: Vocab,
        user_item: Vec<(usize, usize)>,
        user_bundle: Vec<(usize, usize)>,
        bundle_item: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let t = InteractionTables {
            vocab,
            user_item: dedup_pairs(user_item),
            user_bundle: dedup_pairs(user_bundle),
            bundle_item: dedup_pairs(bundle_item),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |pairs: &[(usize, usize)], a: (&'static str, usize), b: (&'static str, usize)| {
            for w in pairs.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::Data(format!("duplicate pair {:?}", w[0])));
                }
            }
            for &(x, y) in pairs {
                if x >= a.1 {
                    return Err(Error::Range { what: a.0, id: x, size: a.1 });
                }
                if y >= b.1 {
                    return Err(Error::Range { what: b.0, id: y, size: b.1 });
                }
            }
            Ok(())
        };
        let v = self.vocab;
        check(&self.user_item, ("user", v.users), ("item", v.items))?;
        check(&self.user_bundle, ("user", v.users), ("bundle", v.bundles))?;
        check(&self.bundle_item, ("bundle", v.bundles), ("item", v.items))
    }

    /// Item lists per bundle id, ascending.
    pub fn bundle_contents(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vocab.bundles];
        for &(b, i) in &self.bundle_item {
            out[b].push(i);
        }
        out
    }

    /// Reads the three two-column TSV relations. With `vocab = None` the
    /// sizes are inferred as max id + 1 over all relations.
    pub fn load(
        user_item: &Path,
        user_bundle: &Path,
        bundle_item: &Path,
        vocab: Option<Vocab>,
    ) -> Result<Self> {
        let ui = read_pairs(user_item)?;
        let ub = read_pairs(user_bundle)?;
        let bi = read_pairs(bundle_item)?;
        let vocab = vocab.unwrap_or_else(|| {
            let max = |it: &mut dyn Iterator<Item = usize>| it.max().map_or(0, |m| m + 1);
            Vocab {
                users: max(&mut ui.iter().chain(&ub).map(|p| p.0)),
                items: max(&mut ui.iter().map(|p| p.1).chain(bi.iter().map(|p| p.1))),
                bundles: max(&mut ub.iter().map(|p| p.1).chain(bi.iter().map(|p| p.0))),
            }
        });
        Self::new(vocab, ui, ub, bi)
    }

    pub fn load_dir(dir: &Path, vocab: Option<Vocab>) -> Result<Self> {
        Self::load(
            &dir.join(USER_ITEM_FILE),
            &dir.join(USER_BUNDLE_FILE),
            &dir.join(BUNDLE_ITEM_FILE),
            vocab,
        )
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pairs(&dir.join(USER_ITEM_FILE), &self.user_item)?;
        write_pairs(&dir.join(USER_BUNDLE_FILE), &self.user_bundle)?;
        write_pairs(&dir.join(BUNDLE_ITEM_FILE), &self.bundle_item)
    }
}

/// Parses tab-separated integer pairs; `#` lines and blank lines are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let mut cols = line.split('\t');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(err(format!("expected two tab-separated columns, got {line:?}")));
        };
        let a = a.trim().parse::<usize>().map_err(|e| err(format!("{a:?}: {e}")))?;
        let b = b.trim().parse::<usize>().map_err(|e| err(format!("{b:?}: {e}")))?;
        out.push((a, b));
    }
    Ok(out)
}

fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut s = String::with_capacity(pairs.len() * 8);
    for (a, b) in pairs {
        let _ = writeln!(s, "{a}\t{b}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GenerationInstance {
    pub user: usize,
    pub candidates: Vec<usize>,
    /// Ground-truth bundle in sampling order; `bundle[0]` is the "first"
    /// item used by first-match precision.
    pub bundle: Vec<usize>,
}

impl GenerationInstance {
    pub fn k(&self) -> usize {
        self.bundle.len()
    }

    pub fn m(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self, vocab: Option<&Vocab>) -> Result<()> {
        let k = self.bundle.len();
        let m = self.candidates.len();
        if k == 0 || k >= m {
            return Err(Error::Data(format!("need 0 < k < m, got k={k} m={m}")));
        }
        let set: HashSet<usize> = self.candidates.iter().copied().collect();
        if set.len() != m {
            return Err(Error::Data("candidates contain duplicates".into()));
        }
        let bset: HashSet<usize> = self.bundle.iter().copied().collect();
        if bset.len() != k {
            return Err(Error::Data("bundle contains duplicates".into()));
        }
        if let Some(b) = self.bundle.iter().find(|b| !set.contains(b)) {
            return Err(Error::Data(format!("bundle item {b} missing from candidates")));
        }
        if let Some(v) = vocab {
            if self.user >= v.users {
                return Err(Error::Range { what: "user", id: self.user, size: v.users });
            }
            if let Some(&i) = self.candidates.iter().find(|&&i| i >= v.items) {
                return Err(Error::Range { what: "item", id: i, size: v.items });
            }
        }
        Ok(())
    }

    /// `u=<int>|c=<int,...>|b=<int,...>`
    pub fn to_line(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!("u={}|c={}|b={}", self.user, join(&self.candidates), join(&self.bundle))
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let mut parts = line.trim().split('|');
        let mut field = |key: &str| -> std::result::Result<&str, String> {
            let p = parts.next().ok_or_else(|| format!("missing field {key}"))?;
            p.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| format!("expected {key}=..., got {p:?}"))
        };
        let user = field("u")?.parse::<usize>().map_err(|e| format!("user: {e}"))?;
        let list = |s: &str| -> std::result::Result<Vec<usize>, String> {
            s.split(',')
                .map(|x| x.parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
                .collect()
        };
        let candidates = list(field("c")?)?;
        let bundle = list(field("b")?)?;
        if parts.next().is_some() {
            return Err("trailing fields".into());
        }
        let inst = GenerationInstance { user, candidates, bundle };
        inst.validate(None).map_err(|e| e.to_string())?;
        Ok(inst)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub emitted: usize,
    /// (user, bundle) pairs whose bundle held fewer than `k` items.
    pub skipped_small: usize,
    /// Sampled size-`k` sets already emitted for the same user.
    pub duplicates: usize,
}

/// Builds one instance per (user, interacted bundle) pair.
///
/// Users are processed independently with per-user derived generators, so
/// the result is identical under either [`Parallelism`] mode.
pub fn build_instances(
    tables: &InteractionTables,
    k: usize,
    m: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<(Vec<GenerationInstance>, BuildStats)> {
    if k == 0 || k >= m {
        return Err(Error::Config(format!("need 0 < k < m, got k={k} m={m}")));
    }
    let n_items = tables.vocab.items;
    if m > n_items {
        return Err(Error::Config(format!(
            "m={m} candidates exceed the {n_items}-item vocabulary ({} negatives unavailable)",
            m - n_items
        )));
    }
    let contents = tables.bundle_contents();
    let mut per_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, b) in &tables.user_bundle {
        per_user.entry(u).or_default().push(b);
    }
    let users: Vec<(usize, Vec<usize>)> = per_user.into_iter().collect();

    let results = par::map(mode, &users, |(user, bundles)| {
        let mut rng = indexed_rng(seed, "instances", *user as u64);
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let mut stats = BuildStats::default();
        let mut out = Vec::new();
        for &b in bundles {
            let items = &contents[b];
            if items.len() < k {
                stats.skipped_small += 1;
                continue;
            }
            let bundle: Vec<usize> = sample(&mut rng, items.len(), k)
                .into_iter()
                .map(|i| items[i])
                .collect();
            let mut key = bundle.clone();
            key.sort_unstable();
            if !seen.insert(key) {
                stats.duplicates += 1;
                continue;
            }
            out.push(make_instance(*user, bundle, m, n_items, &mut rng));
        }
        stats.emitted = out.len();
        (out, stats)
    });

    let mut stats = BuildStats::default();
    let mut all = Vec::new();
    for (inst, s) in results {
        all.extend(inst);
        stats.emitted += s.emitted;
        stats.skipped_small += s.skipped_small;
        stats.duplicates += s.duplicates;
    }
    if stats.skipped_small > 0 {
        log::warn!("skipped {} bundles with fewer than {k} items", stats.skipped_small);
    }
    Ok((all, stats))
}

fn make_instance(user: usize, bundle: Vec<usize>, m: usize, n_items: usize, rng: &mut Rng) -> GenerationInstance {
    let k = bundle.len();
    let mut taken: HashSet<usize> = bundle.iter().copied().collect();
    let mut negatives = Vec::with_capacity(m - k);
    while negatives.len() < m - k {
        let v = rng.random_range(0..n_items);
        if taken.insert(v) {
            negatives.push(v);
        }
    }
    let slots = sample(rng, m, k);
    let mut candidates = vec![usize::MAX; m];
    for (slot, &item) in slots.iter().zip(&bundle) {
        candidates[slot] = item;
    }
    let mut neg = negatives.into_iter();
    for c in candidates.iter_mut().filter(|c| **c == usize::MAX) {
        *c = neg.next().expect("m - k negatives");
    }
    GenerationInstance { user, candidates, bundle }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<GenerationInstance>,
    pub test: Vec<GenerationInstance>,
    pub vocab: Vocab,
    pub k: usize,
    pub m: usize,
}

impl DatasetSplit {
    /// Ground-truth bundles of the training instances.
    pub fn train_bundles(&self) -> Vec<Vec<usize>> {
        self.train.iter().map(|i| i.bundle.clone()).collect()
    }
}

/// Seeded shuffle, then the first `floor(0.8·n)` instances train.
pub fn split_80_20(
    mut instances: Vec<GenerationInstance>,
    vocab: Vocab,
    seed: u64,
) -> Result<DatasetSplit> {
    if instances.len() < 5 {
        return Err(Error::Argument(format!(
            "need at least 5 instances to split, got {}",
            instances.len()
        )));
    }
    let (k, m) = (instances[0].k(), instances[0].m());
    if instances.iter().any(|i| i.k() != k || i.m() != m) {
        return Err(Error::Data("instances disagree on k or m".into()));
    }
    instances.shuffle(&mut stage_rng(seed, "split"));
    let n_train = instances.len() * 4 / 5;
    let test = instances.split_off(n_train);
    Ok(DatasetSplit { train: instances, test, vocab, k, m })
}

fn header(k: usize, m: usize, vocab: &Vocab) -> String {
    format!(
        "#bundlenat-inst {INSTANCE_VERSION} k={k} m={m}\n#vocab users={} items={} bundles={}\n",
        vocab.users, vocab.items, vocab.bundles
    )
}

pub fn write_instance_file(
    path: &Path,
    instances: &[GenerationInstance],
    k: usize,
    m: usize,
    vocab: &Vocab,
) -> Result<()> {
    let mut s = header(k, m, vocab);
    for inst in instances {
        s.push_str(&inst.to_line());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub struct InstanceFile {
    pub k: usize,
    pub m: usize,
    pub vocab: Option<Vocab>,
    pub instances: Vec<GenerationInstance>,
}

pub fn read_instance_file(path: &Path) -> Result<InstanceFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse { file: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty instance file", path.display())))?;
    let mut fields = head.split_whitespace();
    if fields.next() != Some("#bundlenat-inst") {
        return Err(Error::Format(format!("{}: missing #bundlenat-inst header", path.display())));
    }
    match fields.next() {
        Some(INSTANCE_VERSION) => {}
        other => {
            return Err(Error::Format(format!(
                "{}: version {:?}, expected {INSTANCE_VERSION}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut kv = |key: &str| -> Result<usize> {
        fields
            .next()
            .and_then(|f| f.strip_prefix(key))
            .and_then(|f| f.strip_prefix('='))
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| perr(1, format!("header needs {key}=<int>")))
    };
    let k = kv("k")?;
    let m = kv("m")?;
    let mut vocab = None;
    let mut instances = Vec::new();
    for (i, line) in lines {
        if let Some(rest) = line.strip_prefix("#vocab") {
            let mut v = Vocab::default();
            for tok in rest.split_whitespace() {
                let (key, val) = tok
                    .split_once('=')
                    .ok_or_else(|| perr(i + 1, format!("bad vocab field {tok:?}")))?;
                let val: usize = val.parse().map_err(|e| perr(i + 1, format!("{tok:?}: {e}")))?;
                match key {
                    "users" => v.users = val,
                    "items" => v.items = val,
                    "bundles" => v.bundles = val,
                    _ => return Err(perr(i + 1, format!("unknown vocab field {key:?}"))),
                }
            }
            vocab = Some(v);
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let inst = GenerationInstance::parse_line(line).map_err(|msg| perr(i + 1, msg))?;
        if inst.k() != k || inst.m() != m {
            return Err(perr(i + 1, format!("instance has k={} m={}, header says k={k} m={m}", inst.k(), inst.m())));
        }
        if let Some(v) = &vocab {
            inst.validate(Some(v)).map_err(|e| perr(i + 1, e.to_string()))?;
        }
        instances.push(inst);
    }
    Ok(InstanceFile { k, m, vocab, instances })
}

pub fn write_instances(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_instance_file(&dir.join(TRAIN_FILE), &split.train, split.k, split.m, &split.vocab)?;
    write_instance_file(&dir.join(TEST_FILE), &split.test, split.k, split.m, &split.vocab)
}

pub fn read_instances(dir: &Path) -> Result<DatasetSplit> {
    let train_path: PathBuf = dir.join(TRAIN_FILE);
    let train = read_instance_file(&train_path)?;
    let test = read_instance_file(&dir.join(TEST_FILE))?;
    if (train.k, train.m) != (test.k, test.m) {
        return Err(Error::Format("train and test headers disagree on k/m".into()));
    }
    let vocab = train
        .vocab
        .or(test.vocab)
        .ok_or_else(|| Error::Format(format!("{}: missing #vocab line", train_path.display())))?;
    Ok(DatasetSplit {
        train: train.instances,
        test: test.instances,
        vocab,
        k: train.k,
        m: train.m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub bundles_per_user: usize,
    pub k: usize,
    pub m: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Size of the shared bundle pool per cluster.
    pub bundles_per_cluster: usize,
    /// Extra user-item interactions drawn from each preferred cluster.
    pub extra_items_per_cluster: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 500,
            n_clusters: 10,
            bundles_per_user: 5,
            k: 5,
            m: 100,
            noise_rate: 0.05,
            seed: 7,
            bundles_per_cluster: 20,
            extra_items_per_cluster: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedData {
    pub tables: InteractionTables,
    /// Cluster id per item.
    pub cluster_of_item: Vec<usize>,
    /// Preferred clusters per user.
    pub user_clusters: Vec<Vec<usize>>,
}

/// Generates tables whose bundles are drawn from latent item clusters.
///
/// Items are randomly partitioned into equal clusters. Each cluster owns a
/// pool of `bundles_per_cluster` bundles of `k` items sampled inside it, and
/// each bundle item is replaced by a uniform random item with probability
/// `noise_rate`. Every user prefers one or two clusters and interacts with
/// `bundles_per_user` distinct bundles from their pools; the user-item
/// relation is the union of those bundles' items plus
/// `extra_items_per_cluster` further items from each preferred cluster.
pub fn synth_planted(cfg: &SynthConfig) -> Result<PlantedData> {
    let SynthConfig { n_users, n_items, n_clusters, bundles_per_user, k, m, noise_rate, seed, .. } = *cfg;
    if n_clusters == 0 || n_items % n_clusters != 0 {
        return Err(Error::Config(format!("{n_items} items not divisible into {n_clusters} clusters")));
    }
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::Config(format!("noise_rate {noise_rate} outside [0, 1)")));
    }
    let per_cluster = n_items / n_clusters;
    if k == 0 || k > per_cluster {
        return Err(Error::Config(format!("k={k} must be in 1..={per_cluster} (cluster size)")));
    }
    if m <= k || m > n_items {
        return Err(Error::Config(format!("need k < m <= n_items, got k={k} m={m}")));
    }
    if n_users == 0 || bundles_per_user == 0 {
        return Err(Error::Config("need at least one user and one bundle per user".into()));
    }
    if cfg.bundles_per_cluster < bundles_per_user {
        return Err(Error::Config(format!(
            "bundles_per_cluster={} smaller than bundles_per_user={bundles_per_user}",
            cfg.bundles_per_cluster
        )));
    }
    if cfg.extra_items_per_cluster > per_cluster {
        return Err(Error::Config("extra_items_per_cluster exceeds cluster size".into()));
    }

    let mut rng = stage_rng(seed, "synth");
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    let mut cluster_of_item = vec![0; n_items];
    let members: Vec<Vec<usize>> = order
        .chunks(per_cluster)
        .enumerate()
        .map(|(c, chunk)| {
            for &i in chunk {
                cluster_of_item[i] = c;
            }
            let mut v = chunk.to_vec();
            v.sort_unstable();
            v
        })
        .collect();

    let mut bundle_item = Vec::new();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut next_bundle = 0;
    for (c, items) in members.iter().enumerate() {
        for _ in 0..cfg.bundles_per_cluster {
            let mut chosen: Vec<usize> = sample(&mut rng, items.len(), k).into_iter().map(|i| items[i]).collect();
            for slot in 0..k {
                if rng.random::<f64>() < noise_rate {
                    loop {
                        let v = rng.random_range(0..n_items);
                        if !chosen.contains(&v) {
                            chosen[slot] = v;
                            break;
                        }
                    }
                }
            }
            for &i in &chosen {
                bundle_item.push((next_bundle, i));
            }
            pools[c].push(next_bundle);
            next_bundle += 1;
        }
    }

    let mut user_item = Vec::new();
    let mut user_bundle = Vec::new();
    let mut user_clusters = Vec::with_capacity(n_users);
    let contents: BTreeMap<usize, Vec<usize>> = bundle_item.iter().fold(BTreeMap::new(), |mut acc, &(b, i)| {
        acc.entry(b).or_insert_with(Vec::new).push(i);
        acc
    });
    for u in 0..n_users {
        let n_pref = if n_clusters >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
        let prefs = sample(&mut rng, n_clusters, n_pref).into_vec();
        let mut picked = HashSet::new();
        while picked.len() < bundles_per_user {
            let c = prefs[rng.random_range(0..prefs.len())];
            let b = pools[c][rng.random_range(0..pools[c].len())];
            if picked.insert(b) {
                user_bundle.push((u, b));
                user_item.extend(contents[&b].iter().map(|&i| (u, i)));
            }
        }
        for &c in &prefs {
            for i in sample(&mut rng, per_cluster, cfg.extra_items_per_cluster) {
                user_item.push((u, members[c][i]));
            }
        }
        user_clusters.push(prefs);
    }

    let vocab = Vocab { users: n_users, items: n_items, bundles: next_bundle };
    let tables = InteractionTables::new(vocab, user_item, user_bundle, bundle_item)?;
    Ok(PlantedData { tables, cluster_of_item, user_clusters })
}
