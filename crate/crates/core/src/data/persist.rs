//! On-disk layout of a split: `train.tsv`, `validation.tsv`, `test.tsv` with
//! external string ids, plus `manifest.json` holding the seed, fractions,
//! protocol and id tables.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::{ProtocolTag, SplitBundle, TestSampling};
use super::{parse_with_maps, IdMap, InteractionSet, LoadOptions};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_frac: f64,
    pub valid_frac: f64,
    pub protocol_tag: ProtocolTag,
    pub test_sampling: TestSampling,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

pub fn write_interactions_tsv(
    path: impl AsRef<Path>,
    set: &InteractionSet,
    users: &IdMap,
    items: &IdMap,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in set.pairs() {
        writeln!(w, "{}\t{}", users.name(p.user), items.name(p.item))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_split(
    dir: impl AsRef<Path>,
    bundle: &SplitBundle,
    manifest: &SplitManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let users = IdMap::from_ids(manifest.user_ids.clone())?;
    let items = IdMap::from_ids(manifest.item_ids.clone())?;
    if users.len() != bundle.train.num_users() || items.len() != bundle.train.num_items() {
        return Err(Error::DimensionMismatch(
            "manifest id tables do not match split dimensions".into(),
        ));
    }
    write_interactions_tsv(dir.join(TRAIN_FILE), &bundle.train, &users, &items)?;
    write_interactions_tsv(
        dir.join(VALIDATION_FILE),
        &bundle.validation,
        &users,
        &items,
    )?;
    write_interactions_tsv(dir.join(TEST_FILE), &bundle.test, &users, &items)?;
    let f = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(f, manifest)?;
    Ok(())
}

/// Reads an additional interaction file against the id tables of a split.
pub fn load_with_manifest(
    path: impl AsRef<Path>,
    manifest: &SplitManifest,
) -> Result<InteractionSet> {
    let users = IdMap::from_ids(manifest.user_ids.clone())?;
    let items = IdMap::from_ids(manifest.item_ids.clone())?;
    let f = BufReader::new(File::open(path)?);
    parse_with_maps(f, &users, &items, &LoadOptions::default())
}

pub fn load_split(dir: impl AsRef<Path>) -> Result<(SplitBundle, SplitManifest)> {
    let dir = dir.as_ref();
    let manifest: SplitManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    let train = load_with_manifest(dir.join(TRAIN_FILE), &manifest)?;
    let validation = load_with_manifest(dir.join(VALIDATION_FILE), &manifest)?;
    let test = load_with_manifest(dir.join(TEST_FILE), &manifest)?;
    let bundle = SplitBundle {
        train,
        validation,
        test,
        protocol_tag: manifest.protocol_tag,
    };
    Ok((bundle, manifest))
}
