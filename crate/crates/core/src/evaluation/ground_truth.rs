//! Ground-truth loaders for Holidays- and Oxford-style protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_io::{DatasetManifest, GroundTruthKind, GroupsFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub positives: BTreeSet<String>,
    pub junk: BTreeSet<String>,
    /// Drop the query image itself from its ranked list before scoring.
    pub exclude_self: bool,
}

impl GroundTruth {
    pub fn new(query_id: impl Into<String>, positives: BTreeSet<String>, junk: BTreeSet<String>, exclude_self: bool) -> Result<Self> {
        let gt = GroundTruth {
            query_id: query_id.into(),
            positives,
            junk,
            exclude_self,
        };
        if gt.positives.contains(&gt.query_id) {
            return Err(Error::invalid("ground truth", format!("query {} listed as its own positive", gt.query_id)));
        }
        if let Some(x) = gt.positives.intersection(&gt.junk).next() {
            return Err(Error::invalid("ground truth", format!("{x} is both positive and junk for {}", gt.query_id)));
        }
        Ok(gt)
    }
}

/// Reads every `<name>_query.txt` in `dir` together with its `_good`, `_ok`
/// and `_junk` siblings. Query order follows the sorted query file names.
pub fn load_oxford_ground_truth(dir: &Path) -> Result<Vec<GroundTruth>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut query_files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_query.txt")) {
            query_files.push(p);
        }
    }
    query_files.sort();
    if query_files.is_empty() {
        return Err(Error::MissingFiles(vec![dir.join("*_query.txt")]));
    }

    let mut out = Vec::with_capacity(query_files.len());
    for qf in query_files {
        let name = qf.file_name().unwrap().to_str().unwrap();
        let stem = &name[..name.len() - "_query.txt".len()];
        let sibling = |suffix: &str| dir.join(format!("{stem}_{suffix}.txt"));
        let missing: Vec<PathBuf> = ["good", "ok", "junk"]
            .iter()
            .map(|s| sibling(s))
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }

        let query_id = parse_oxford_query(&qf)?;
        let mut positives = read_id_list(&sibling("good"))?;
        positives.extend(read_id_list(&sibling("ok"))?);
        let mut junk = read_id_list(&sibling("junk"))?;
        junk.retain(|j| !positives.contains(j));
        // the query's own image is junk, not a positive
        positives.remove(&query_id);
        junk.insert(query_id.clone());
        out.push(GroundTruth::new(query_id, positives, junk, false)?);
    }
    Ok(out)
}

/// Parses `oxc1_<image> x1 y1 x2 y2`; the box is validated and discarded.
fn parse_oxford_query(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (lineno, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "empty query file".into(),
        })?;
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno + 1,
        reason,
    };
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 5 {
        return Err(parse_err(format!("expected `<image> x1 y1 x2 y2`, got {} fields", tokens.len())));
    }
    for t in &tokens[1..] {
        t.parse::<f64>()
            .map_err(|_| parse_err(format!("bad coordinate {t:?}")))?;
    }
    let id = tokens[0].strip_prefix("oxc1_").unwrap_or(tokens[0]);
    Ok(id.to_string())
}

fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.split_whitespace().count() != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: format!("expected a single image name, got {line:?}"),
            });
        }
        out.insert(line.to_string());
    }
    Ok(out)
}

/// One query per group: the first member queries, the rest are positives.
pub fn holidays_from_groups(groups: &GroupsFile) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::with_capacity(groups.groups.len());
    for g in &groups.groups {
        let Some((query, rest)) = g.members.split_first() else {
            continue;
        };
        if rest.is_empty() {
            log::warn!("group of {query} has no positives; it will be skipped in mAP");
        }
        out.push(GroundTruth::new(
            query.clone(),
            rest.iter().cloned().collect(),
            BTreeSet::new(),
            true,
        )?);
    }
    Ok(out)
}

/// Groups numeric ids by `id / 100` (e.g. `100000`, `100001.jpg` -> group
/// 1000); the smallest id of each group is the query.
pub fn holidays_from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<GroundTruth>> {
    let mut groups: BTreeMap<u64, Vec<(u64, String)>> = BTreeMap::new();
    for id in ids {
        let stem = id.split('.').next().unwrap_or(id);
        let num: u64 = stem.parse().map_err(|_| {
            Error::invalid("holidays id", format!("{id:?} is not numeric; supply an explicit groups file"))
        })?;
        groups.entry(num / 100).or_default().push((num, id.to_string()));
    }
    let groups = GroupsFile {
        groups: groups
            .into_values()
            .map(|mut members| {
                members.sort();
                crate::feature_io::GroupSpec {
                    members: members.into_iter().map(|(_, id)| id).collect(),
                }
            })
            .collect(),
    };
    holidays_from_groups(&groups)
}

/// Holidays ground truth for a manifest: its groups file if one is named,
/// otherwise the id/100 convention over the manifest's image ids.
pub fn load_holidays_ground_truth(manifest: &DatasetManifest) -> Result<Vec<GroundTruth>> {
    match manifest.ground_truth_location() {
        Some(path) => holidays_from_groups(&GroupsFile::load(&path)?),
        None => holidays_from_ids(manifest.image_ids()),
    }
}

/// Ground truth according to the manifest's declared protocol.
pub fn load_ground_truth(manifest: &DatasetManifest) -> Result<Vec<GroundTruth>> {
    match manifest.ground_truth_kind {
        GroundTruthKind::Holidays => load_holidays_ground_truth(manifest),
        GroundTruthKind::Oxford => {
            let dir = manifest
                .ground_truth_location()
                .ok_or_else(|| Error::invalid("manifest", "oxford protocol needs ground_truth_path"))?;
            load_oxford_ground_truth(&dir)
        }
    }
}
