//! Interaction data: indexed click sets, TSV ingestion, train/validation/test
//! splits, and the synthetic exposure/relevance world.

mod persist;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use persist::{
    load_split, load_with_manifest, save_split, write_interactions_tsv, SplitManifest,
    MANIFEST_FILE, TEST_FILE, TRAIN_FILE, VALIDATION_FILE,
};
pub use split::{
    split_preprovided, split_unbiased_protocol, split_with, ProtocolTag, SplitBundle, SplitConfig,
    TestSampling,
};
pub use synthetic::{
    generate_synthetic_world, item_exposure_weights, sample_bernoulli_clicks, sample_clicks,
    sample_relevance_clicks, SyntheticWorld, WorldParams,
};

/// A single observed click `(user, item)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Self { user, item }
    }
}

/// A deduplicated set of clicks over an `m x n` user-item grid, indexed both
/// by user and by item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    m: usize,
    n: usize,
    pairs: Vec<Interaction>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
}

impl InteractionSet {
    /// Builds the set, collapsing duplicates. Pairs are stored sorted by
    /// `(user, item)`.
    pub fn from_pairs(
        m: usize,
        n: usize,
        pairs: impl IntoIterator<Item = Interaction>,
    ) -> Result<Self> {
        let mut pairs: Vec<Interaction> = pairs.into_iter().collect();
        if let Some(bad) = pairs.iter().find(|p| p.user >= m || p.item >= n) {
            return Err(Error::DimensionMismatch(format!(
                "pair ({}, {}) outside {m}x{n} grid",
                bad.user, bad.item
            )));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut by_user = vec![Vec::new(); m];
        let mut by_item = vec![Vec::new(); n];
        for p in &pairs {
            by_user[p.user].push(p.item);
            by_item[p.item].push(p.user);
        }
        // by_user is sorted because pairs are; by_item receives users in
        // ascending order for the same reason.
        Ok(Self {
            m,
            n,
            pairs,
            by_user,
            by_item,
        })
    }

    pub fn empty(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            pairs: Vec::new(),
            by_user: vec![Vec::new(); m],
            by_item: vec![Vec::new(); n],
        }
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[Interaction] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sorted items clicked by `user`.
    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    /// Sorted users who clicked `item`.
    pub fn users_of(&self, item: usize) -> &[usize] {
        &self.by_item[item]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        user < self.m && self.by_user[user].binary_search(&item).is_ok()
    }

    pub fn user_counts(&self) -> Vec<usize> {
        self.by_user.iter().map(Vec::len).collect()
    }

    pub fn item_counts(&self) -> Vec<usize> {
        self.by_item.iter().map(Vec::len).collect()
    }

    /// Training sets must give every user at least one click.
    pub fn ensure_trainable(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty);
        }
        match self.by_user.iter().position(Vec::is_empty) {
            Some(u) => Err(Error::invalid(format!(
                "user {u} has no training interactions"
            ))),
            None => Ok(()),
        }
    }
}

/// Bidirectional map between external string ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ids `"0"`, `"1"`, ... so that string ids and indices coincide.
    pub fn identity(len: usize) -> Self {
        Self::from_ids((0..len).map(|i| i.to_string()).collect()).expect("identity ids are unique")
    }

    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate id `{id}` in mapping")));
            }
        }
        Ok(Self { ids, index })
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
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

    pub fn name(&self, index: usize) -> &str {
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

/// An interaction set together with the id tables that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub interactions: InteractionSet,
    pub users: IdMap,
    pub items: IdMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InteractionFormat {
    /// `<user_id>\t<item_id>` per line.
    #[default]
    TsvPairs,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub format: InteractionFormat,
    /// Accept (and ignore) columns beyond the second, e.g. ratings or timestamps.
    pub lenient: bool,
}

/// Splits one TSV line into `(user, item)`. Returns `None` for blank and
/// comment lines.
fn parse_line<'a>(
    raw: &'a str,
    line_no: usize,
    opts: &LoadOptions,
) -> Result<Option<(&'a str, &'a str)>> {
    let line = raw.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    let ok_count = if opts.lenient {
        fields.len() >= 2
    } else {
        fields.len() == 2
    };
    if !ok_count {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 2 tab-separated fields, found {}", fields.len()),
        });
    }
    let (user, item) = (fields[0].trim(), fields[1].trim());
    if user.is_empty() || item.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: "empty id".into(),
        });
    }
    Ok(Some((user, item)))
}

/// Reads interactions, assigning dense indices in first-appearance order.
pub fn parse_interactions(reader: impl BufRead, opts: &LoadOptions) -> Result<Dataset> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some((u, i)) = parse_line(&line, idx + 1, opts)? {
            let u = users.get_or_insert(u);
            let i = items.get_or_insert(i);
            pairs.push(Interaction::new(u, i));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty);
    }
    let interactions = InteractionSet::from_pairs(users.len(), items.len(), pairs)?;
    Ok(Dataset {
        interactions,
        users,
        items,
    })
}

pub fn load_interactions(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), opts)
}

/// Reads interactions against fixed id tables; unknown ids are an error.
/// Unlike [`parse_interactions`] an empty input is allowed.
pub fn parse_with_maps(
    reader: impl BufRead,
    users: &IdMap,
    items: &IdMap,
    opts: &LoadOptions,
) -> Result<InteractionSet> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some((u, i)) = parse_line(&line, idx + 1, opts)? {
            let lookup = |map: &IdMap, id: &str, kind: &str| {
                map.get(id).ok_or_else(|| Error::Parse {
                    line: idx + 1,
                    message: format!("unknown {kind} id `{id}`"),
                })
            };
            pairs.push(Interaction::new(
                lookup(users, u, "user")?,
                lookup(items, i, "item")?,
            ));
        }
    }
    InteractionSet::from_pairs(users.len(), items.len(), pairs)
}
