//! Interaction ingestion, train/validation/test splitting, noise injection
//! and BPR negative sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from_seed};

/// Bijection between external string IDs and dense 0-based indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from an ordered ID list; fails on duplicates.
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { ids, index })
    }

    /// Returns the dense index for `id`, assigning the next one on first sight.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// De-duplicated implicit-feedback pairs over a fixed user/item universe.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    pub n_users: usize,
    pub n_items: usize,
    pub pairs: Vec<(usize, usize)>,
    pub users: Arc<IdMap>,
    pub items: Arc<IdMap>,
}

impl InteractionSet {
    /// Checks index bounds and uniqueness.
    pub fn new(
        pairs: Vec<(usize, usize)>,
        users: Arc<IdMap>,
        items: Arc<IdMap>,
    ) -> Result<Self> {
        let set = Self {
            n_users: users.len(),
            n_items: items.len(),
            pairs,
            users,
            items,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.pairs.len());
        for &(u, i) in &self.pairs {
            if u >= self.n_users || i >= self.n_items {
                return Err(Error::validation(format!(
                    "pair ({u}, {i}) outside {}x{} universe",
                    self.n_users, self.n_items
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::validation(format!("duplicate pair ({u}, {i})")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same universe, different pairs.
    pub fn with_pairs(&self, pairs: Vec<(usize, usize)>) -> Self {
        Self {
            n_users: self.n_users,
            n_items: self.n_items,
            pairs,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
        }
    }

    /// Sorted item list per user.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut by_user = vec![Vec::new(); self.n_users];
        for &(u, i) in &self.pairs {
            by_user[u].push(i);
        }
        for items in &mut by_user {
            items.sort_unstable();
        }
        by_user
    }

    pub fn pair_set(&self) -> HashSet<(usize, usize)> {
        self.pairs.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::validation(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub format: Format,
    /// Skip the first non-comment line (column headers in raw exports).
    pub skip_header: bool,
}

impl From<Format> for LoadOptions {
    fn from(format: Format) -> Self {
        Self {
            format,
            skip_header: false,
        }
    }
}

pub fn load_interactions(path: &Path, format: Format) -> Result<InteractionSet> {
    load_interactions_with(path, format.into())
}

pub fn load_interactions_with(path: &Path, opts: LoadOptions) -> Result<InteractionSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), opts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses `user<sep>item[<sep>...]` lines. `#` starts a comment line; blank
/// lines are skipped; extra columns are ignored. Dense indices follow
/// first-appearance order.
pub fn parse_interactions<R: Read>(reader: BufReader<R>, opts: LoadOptions) -> Result<InteractionSet> {
    let sep = opts.format.separator();
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut header_pending = opts.skip_header;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let mut cols = trimmed.split(sep).map(str::trim);
        let (user, item) = match (cols.next(), cols.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected at least two columns, got {trimmed:?}"),
                })
            }
        };
        let u = users.intern(user);
        let i = items.intern(item);
        if seen.insert((u, i)) {
            pairs.push((u, i));
        }
    }

    if pairs.is_empty() {
        return Err(Error::validation("no interactions found"));
    }
    InteractionSet::new(pairs, Arc::new(users), Arc::new(items))
}

/// Writes `user_id<TAB>item_id` lines using the original IDs.
pub fn write_interactions(path: &Path, set: &InteractionSet) -> Result<()> {
    let mut out = String::with_capacity(set.len() * 16);
    for &(u, i) in &set.pairs {
        out.push_str(set.users.id(u));
        out.push('\t');
        out.push_str(set.items.id(i));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub noise_ratio: f64,
    pub noise_seed: Option<u64>,
    pub noise_pairs: Vec<(usize, usize)>,
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Per-interaction random split. Validation and test sizes are floored and
/// the remainder goes to train.
pub fn split(data: &InteractionSet, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    if data.is_empty() {
        return Err(Error::validation("cannot split an empty interaction set"));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = data.len();
    let n_val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (ratios[2] * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order = data.pairs.clone();
    order.shuffle(&mut derived_rng(seed, "split", &[]));

    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();

    Ok(SplitDataset {
        train: data.with_pairs(train),
        validation: data.with_pairs(validation),
        test: data.with_pairs(test),
        seed,
        ratios,
        noise_ratio: 0.0,
        noise_seed: None,
        noise_pairs: Vec::new(),
    })
}

/// Adds `floor(ratio * |train|)` uniformly drawn pairs that appear in none of
/// the three sets to the training set only.
pub fn inject_noise(split: &SplitDataset, ratio: f64, seed: u64) -> Result<SplitDataset> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::validation(format!("noise ratio {ratio} outside [0, 0.5]")));
    }
    let count = (ratio * split.train.len() as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Ok(split.clone());
    }

    let n_users = split.train.n_users;
    let n_items = split.train.n_items;
    let mut taken: HashSet<(usize, usize)> = split
        .train
        .pairs
        .iter()
        .chain(&split.validation.pairs)
        .chain(&split.test.pairs)
        .copied()
        .collect();

    let mut rng = derived_rng(seed, "noise", &[]);
    let max_attempts = count.saturating_mul(1000);
    let mut noise = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while noise.len() < count {
        if attempts >= max_attempts {
            return Err(Error::Capacity(format!(
                "could only place {} of {count} noise pairs in {max_attempts} attempts; graph too dense",
                noise.len()
            )));
        }
        attempts += 1;
        let pair = (rng.random_range(0..n_users), rng.random_range(0..n_items));
        if taken.insert(pair) {
            noise.push(pair);
        }
    }

    let mut train = split.train.pairs.clone();
    train.extend_from_slice(&noise);
    train.sort_unstable();

    Ok(SplitDataset {
        train: split.train.with_pairs(train),
        validation: split.validation.clone(),
        test: split.test.clone(),
        noise_ratio: ratio,
        noise_seed: Some(seed),
        noise_pairs: noise,
        ..split.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BprTriple {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// Uniform negative sampler over the items a user never interacted with.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n_items: usize,
    seen: Vec<HashSet<usize>>,
}

impl NegativeSampler {
    pub fn new(train: &InteractionSet) -> Self {
        let mut seen = vec![HashSet::new(); train.n_users];
        for &(u, i) in &train.pairs {
            seen[u].insert(i);
        }
        Self {
            n_items: train.n_items,
            seen,
        }
    }

    pub fn sample(&self, batch: &[(usize, usize)], seed: u64) -> Result<Vec<BprTriple>> {
        let mut rng = rng_from_seed(seed);
        batch
            .iter()
            .map(|&(user, pos_item)| {
                let seen = self
                    .seen
                    .get(user)
                    .ok_or_else(|| Error::validation(format!("user {user} out of range")))?;
                if seen.len() >= self.n_items {
                    return Err(Error::Sampling { user });
                }
                let neg_item = loop {
                    let cand = rng.random_range(0..self.n_items);
                    if !seen.contains(&cand) {
                        break cand;
                    }
                };
                Ok(BprTriple {
                    user,
                    pos_item,
                    neg_item,
                })
            })
            .collect()
    }
}

pub fn sample_negatives(
    train: &InteractionSet,
    batch: &[(usize, usize)],
    seed: u64,
) -> Result<Vec<BprTriple>> {
    NegativeSampler::new(train).sample(batch, seed)
}

/// JSON manifest written next to the split TSVs. The ordered ID lists pin
/// the dense indexing so reloaded splits are index-identical.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub noise_ratio: f64,
    pub noise_seed: Option<u64>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub noise_pairs: Vec<(String, String)>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_split(dir: &Path, split: &SplitDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_interactions(&dir.join(TRAIN_FILE), &split.train)?;
    write_interactions(&dir.join(VALIDATION_FILE), &split.validation)?;
    write_interactions(&dir.join(TEST_FILE), &split.test)?;

    let users = &split.train.users;
    let items = &split.train.items;
    let manifest = SplitManifest {
        seed: split.seed,
        ratios: split.ratios,
        noise_ratio: split.noise_ratio,
        noise_seed: split.noise_seed,
        n_users: split.train.n_users,
        n_items: split.train.n_items,
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        n_test: split.test.len(),
        noise_pairs: split
            .noise_pairs
            .iter()
            .map(|&(u, i)| (users.id(u).to_owned(), items.id(i).to_owned()))
            .collect(),
        user_ids: users.ids().to_vec(),
        item_ids: items.ids().to_vec(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_split(dir: &Path) -> Result<SplitDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let users = Arc::new(IdMap::from_ids(manifest.user_ids.clone())?);
    let items = Arc::new(IdMap::from_ids(manifest.item_ids.clone())?);

    let read = |name: &str| -> Result<InteractionSet> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (u, i) = match (cols.next(), cols.next()) {
                (Some(u), Some(i)) => (u, i),
                _ => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("{name}: expected two columns"),
                    })
                }
            };
            let lookup = |map: &IdMap, id: &str| {
                map.get(id).ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    message: format!("{name}: id {id:?} not in manifest"),
                })
            };
            pairs.push((lookup(&users, u)?, lookup(&items, i)?));
        }
        InteractionSet::new(pairs, Arc::clone(&users), Arc::clone(&items))
    };

    let train = read(TRAIN_FILE)?;
    let validation = read(VALIDATION_FILE)?;
    let test = read(TEST_FILE)?;
    let noise_pairs = manifest
        .noise_pairs
        .iter()
        .map(|(u, i)| {
            Ok((
                users.get(u).ok_or_else(|| Error::validation(format!("noise user {u:?} unknown")))?,
                items.get(i).ok_or_else(|| Error::validation(format!("noise item {i:?} unknown")))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SplitDataset {
        train,
        validation,
        test,
        seed: manifest.seed,
        ratios: manifest.ratios,
        noise_ratio: manifest.noise_ratio,
        noise_seed: manifest.noise_seed,
        noise_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<InteractionSet> {
        parse_interactions(BufReader::new(text.as_bytes()), Format::Tsv.into())
    }

    fn synthetic(n_users: usize, n_items: usize, pairs: Vec<(usize, usize)>) -> InteractionSet {
        let users = IdMap::from_ids((0..n_users).map(|u| format!("u{u}")).collect()).unwrap();
        let items = IdMap::from_ids((0..n_items).map(|i| format!("i{i}")).collect()).unwrap();
        InteractionSet::new(pairs, Arc::new(users), Arc::new(items)).unwrap()
    }

    fn dense_pairs(n_users: usize, n_items: usize, count: usize) -> Vec<(usize, usize)> {
        (0..n_users)
            .flat_map(|u| (0..n_items).map(move |i| (u, i)))
            .take(count)
            .collect()
    }

    #[test]
    fn deduplicates_and_indexes_in_first_appearance_order() {
        let set = parse("a\tx\na\tx\nb\tx\n").unwrap();
        assert_eq!(set.n_users, 2);
        assert_eq!(set.n_items, 1);
        assert_eq!(set.pairs, vec![(0, 0), (1, 0)]);
        assert_eq!(set.users.id(1), "b");
    }

    #[test]
    fn ignores_comments_and_extra_columns() {
        let set = parse("# header\nb\ty\t17\t1234567\n\na\tx\n").unwrap();
        assert_eq!(set.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(set.users.id(0), "b");
    }

    #[test]
    fn csv_and_header_skipping() {
        let opts = LoadOptions {
            format: Format::Csv,
            skip_header: true,
        };
        let set = parse_interactions(BufReader::new("user,item\n1,2\n1,3\n".as_bytes()), opts).unwrap();
        assert_eq!(set.n_users, 1);
        assert_eq!(set.n_items, 2);
    }

    #[test]
    fn one_column_line_is_a_parse_error_with_line_number() {
        match parse("a\tx\na\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(parse("# nothing\n\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions(Path::new("/definitely/not/here.tsv"), Format::Tsv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn split_sizes_follow_floor_then_remainder() {
        let data = synthetic(10, 10, dense_pairs(10, 10, 100));
        let s = split(&data, DEFAULT_RATIOS, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 10, 20));

        let small = synthetic(5, 5, dense_pairs(5, 5, 10));
        let s = split(&small, DEFAULT_RATIOS, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));

        let lastfm_sized = synthetic(400, 400, dense_pairs(400, 400, 92834));
        let s = split(&lastfm_sized, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (64985, 9283, 18566));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let data = synthetic(10, 10, dense_pairs(10, 10, 100));
        let a = split(&data, DEFAULT_RATIOS, 11).unwrap();
        let b = split(&data, DEFAULT_RATIOS, 11).unwrap();
        let c = split(&data, DEFAULT_RATIOS, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.test.pairs, c.test.pairs);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let data = synthetic(10, 10, dense_pairs(10, 10, 100));
        assert!(split(&data, [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn noise_goes_to_train_only() {
        let data = synthetic(20, 20, dense_pairs(20, 20, 143));
        let s = split(&data, DEFAULT_RATIOS, 5).unwrap();
        assert_eq!(s.train.len(), 101);
        let noisy = inject_noise(&s, 0.10, 9).unwrap();
        assert_eq!(noisy.noise_pairs.len(), 10);
        assert_eq!(noisy.train.len(), 111);
        assert_eq!(noisy.validation, s.validation);
        assert_eq!(noisy.test, s.test);

        let original = data.pair_set();
        let train = noisy.train.pair_set();
        for p in &noisy.noise_pairs {
            assert!(!original.contains(p));
            assert!(train.contains(p));
        }
        noisy.train.validate().unwrap();
    }

    #[test]
    fn zero_noise_is_identity() {
        let data = synthetic(10, 10, dense_pairs(10, 10, 50));
        let s = split(&data, DEFAULT_RATIOS, 5).unwrap();
        let same = inject_noise(&s, 0.0, 1).unwrap();
        assert_eq!(same, s);
        assert!(same.noise_pairs.is_empty());
    }

    #[test]
    fn noise_on_saturated_graph_is_capacity_error() {
        let data = synthetic(4, 4, dense_pairs(4, 4, 16));
        let s = split(&data, DEFAULT_RATIOS, 5).unwrap();
        assert!(matches!(inject_noise(&s, 0.5, 1), Err(Error::Capacity(_))));
        assert!(matches!(inject_noise(&s, 0.6, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn negatives_stay_in_support() {
        let train = synthetic(2, 3, vec![(0, 0), (1, 1)]);
        let batch = vec![(0, 0); 500];
        for t in sample_negatives(&train, &batch, 4).unwrap() {
            assert!(t.neg_item == 1 || t.neg_item == 2);
        }
    }

    #[test]
    fn batch_of_2048_gives_2048_triples() {
        let pairs: Vec<(usize, usize)> = (0..64).flat_map(|u| (0..32).map(move |i| (u, (u + i) % 48))).collect();
        let data = synthetic(64, 48, pairs);
        let triples = sample_negatives(&data, &data.pairs, 1).unwrap();
        assert_eq!(triples.len(), 2048);
        let train = data.pair_set();
        for t in triples {
            assert!(train.contains(&(t.user, t.pos_item)));
            assert!(!train.contains(&(t.user, t.neg_item)));
        }
    }

    #[test]
    fn saturated_user_is_a_sampling_error() {
        let train = synthetic(2, 2, vec![(0, 0), (0, 1), (1, 0)]);
        match sample_negatives(&train, &[(1, 0), (0, 0)], 1) {
            Err(Error::Sampling { user }) => assert_eq!(user, 0),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn negative_draws_are_uniform() {
        // 3 candidate items, 1e5 draws: each count within 3 binomial sigmas of n/3.
        let train = synthetic(1, 4, vec![(0, 0)]);
        let n = 100_000usize;
        let batch = vec![(0, 0); n];
        let mut counts = [0usize; 4];
        for t in sample_negatives(&train, &batch, 77).unwrap() {
            counts[t.neg_item] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 3.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "count {c} vs {mean}±{sigma}");
        }
    }

    #[test]
    fn split_roundtrips_through_disk() {
        let data = synthetic(12, 15, dense_pairs(12, 15, 120));
        let s = inject_noise(&split(&data, DEFAULT_RATIOS, 2).unwrap(), 0.2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), &s).unwrap();
        assert_eq!(read_split(dir.path()).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn split_partitions_disjointly(n in 10usize..400, seed in any::<u64>()) {
            let data = synthetic(20, 20, dense_pairs(20, 20, n));
            let s = split(&data, DEFAULT_RATIOS, seed).unwrap();
            let total = s.train.len() + s.validation.len() + s.test.len();
            prop_assert_eq!(total, n);
            let exact = |r: f64| r * n as f64;
            // Floored sets lose < 1 each; train absorbs both remainders.
            let over = s.train.len() as f64 - exact(0.7);
            prop_assert!((-1e-9..2.0).contains(&over));
            prop_assert!((s.validation.len() as f64 - exact(0.1)) > -1.0);
            prop_assert!((s.test.len() as f64 - exact(0.2)) > -1.0);
            let tr = s.train.pair_set();
            let va = s.validation.pair_set();
            let te = s.test.pair_set();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        }
    }
}
