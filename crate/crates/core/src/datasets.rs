//! Rating ingestion, MNAR/MAR splits and processed-dataset archives.
//!
//! Two input layouts are supported: a whitespace-separated integer matrix
//! with zeros for missing cells (one row per user), and delimited
//! `user item rating [...]` triple files whose ids are remapped to dense
//! indices.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{PairSpace, SeededRng, Stream};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RatingFormat {
    AsciiMatrix,
    DelimitedTriples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatingFileSpec {
    pub format: RatingFormat,
    /// Field separator for triple files; `None` splits on whitespace.
    pub delimiter: Option<char>,
    /// Highest rating; ratings live in `1..=scale`.
    pub scale: u8,
    pub zero_means_missing: bool,
    /// Ratings at or above this value count as positives for AUC and NDCG.
    pub positive_threshold: f64,
}

impl Default for RatingFileSpec {
    fn default() -> Self {
        Self {
            format: RatingFormat::AsciiMatrix,
            delimiter: None,
            scale: 5,
            zero_means_missing: true,
            positive_threshold: 4.0,
        }
    }
}

impl RatingFileSpec {
    fn check_value(&self, v: f64) -> std::result::Result<(), String> {
        if v >= 1.0 && v <= self.scale as f64 {
            Ok(())
        } else {
            Err(format!("rating {v} outside 1..={}", self.scale))
        }
    }
}

/// Dense relabeling of raw ids in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    ids: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (k, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), k).is_some() {
                return Err(Error::Format(format!("duplicate id {id:?} in id map")));
            }
        }
        Ok(Self { ids, index })
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&k) = self.index.get(raw) {
            return k;
        }
        self.ids.push(raw.to_string());
        self.index.insert(raw.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, k: usize) -> Option<&str> {
        self.ids.get(k).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn rebuild(&mut self) -> Result<()> {
        *self = Self::from_ids(std::mem::take(&mut self.ids))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatingSet {
    pub n_users: usize,
    pub n_items: usize,
    pub ratings: Vec<Rating>,
    pub users: IdMap,
    pub items: IdMap,
    /// Lines dropped because a later line rated the same pair.
    pub duplicates: usize,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses an ASCII rating matrix. `path` is used only in error messages.
pub fn parse_matrix<R: Read>(reader: R, path: &Path, spec: &RatingFileSpec) -> Result<RatingSet> {
    let mut ratings = Vec::new();
    let mut width: Option<usize> = None;
    let mut n_rows = 0;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = 0;
        for (col, tok) in line.split_whitespace().enumerate() {
            cols += 1;
            let v: i64 = tok
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-integer token {tok:?}")))?;
            if v == 0 && spec.zero_means_missing {
                continue;
            }
            spec.check_value(v as f64).map_err(|m| parse_err(path, lineno, m))?;
            ratings.push(Rating {
                user: n_rows,
                item: col,
                value: v as f64,
            });
        }
        match width {
            None => width = Some(cols),
            Some(w) if w != cols => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("ragged row: {cols} columns, expected {w}"),
                ));
            }
            _ => {}
        }
        n_rows += 1;
    }
    let n_items = width.unwrap_or(0);
    Ok(RatingSet {
        n_users: n_rows,
        n_items,
        ratings,
        users: IdMap::from_ids((0..n_rows).map(|u| u.to_string()).collect())?,
        items: IdMap::from_ids((0..n_items).map(|i| i.to_string()).collect())?,
        duplicates: 0,
    })
}

pub fn load_matrix(path: &Path, spec: &RatingFileSpec) -> Result<RatingSet> {
    parse_matrix(crate::error::open(path)?, path, spec)
}

/// Parses triples into existing id maps, so that several files can share one
/// index space. Duplicate pairs keep the last rating.
pub fn parse_triples_into<R: Read>(
    reader: R,
    path: &Path,
    spec: &RatingFileSpec,
    users: &mut IdMap,
    items: &mut IdMap,
) -> Result<(Vec<Rating>, usize)> {
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ratings: Vec<Rating> = Vec::new();
    let mut duplicates = 0;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = match spec.delimiter {
            Some(d) => trimmed.split(d).map(str::trim).collect(),
            None => trimmed.split_whitespace().collect(),
        };
        if fields.len() < 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected user item rating, got {trimmed:?}"),
            ));
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad rating {:?}", fields[2])))?;
        spec.check_value(value).map_err(|m| parse_err(path, lineno, m))?;
        let r = Rating {
            user: users.intern(fields[0]),
            item: items.intern(fields[1]),
            value,
        };
        match slot.get(&(r.user, r.item)) {
            Some(&at) => {
                ratings[at] = r;
                duplicates += 1;
            }
            None => {
                slot.insert((r.user, r.item), ratings.len());
                ratings.push(r);
            }
        }
    }
    if duplicates > 0 {
        log::warn!("{}: {duplicates} duplicate pairs, kept the last rating", path.display());
    }
    Ok((ratings, duplicates))
}

pub fn load_triples(path: &Path, spec: &RatingFileSpec) -> Result<RatingSet> {
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let (ratings, duplicates) = parse_triples_into(crate::error::open(path)?, path, spec, &mut users, &mut items)?;
    Ok(RatingSet {
        n_users: users.len(),
        n_items: items.len(),
        ratings,
        users,
        items,
        duplicates,
    })
}

/// Loads an MNAR and a MAR file into one shared index space.
pub fn load_pair(mnar: &Path, mar: &Path, spec: &RatingFileSpec) -> Result<(RatingSet, RatingSet)> {
    match spec.format {
        RatingFormat::AsciiMatrix => {
            let a = load_matrix(mnar, spec)?;
            let b = load_matrix(mar, spec)?;
            if (a.n_users, a.n_items) != (b.n_users, b.n_items) {
                return Err(Error::Format(format!(
                    "matrix shapes differ: {}x{} vs {}x{}",
                    a.n_users, a.n_items, b.n_users, b.n_items
                )));
            }
            Ok((a, b))
        }
        RatingFormat::DelimitedTriples => {
            let mut users = IdMap::default();
            let mut items = IdMap::default();
            let (ra, da) = parse_triples_into(crate::error::open(mnar)?, mnar, spec, &mut users, &mut items)?;
            let (rb, db) = parse_triples_into(crate::error::open(mar)?, mar, spec, &mut users, &mut items)?;
            let build = |ratings, duplicates| RatingSet {
                n_users: users.len(),
                n_items: items.len(),
                ratings,
                users: users.clone(),
                items: items.clone(),
                duplicates,
            };
            Ok((build(ra, da), build(rb, db)))
        }
    }
}

pub const SPLIT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub version: u32,
    pub n_users: usize,
    pub n_items: usize,
    pub scale: u8,
    pub positive_threshold: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub train: Vec<Rating>,
    pub val: Vec<Rating>,
    pub test: Vec<Rating>,
    pub users: IdMap,
    pub items: IdMap,
}

impl SplitDataset {
    pub fn space(&self) -> Result<PairSpace> {
        PairSpace::new(self.n_users, self.n_items)
    }

    /// `(r − 1)/(scale − 1)`.
    pub fn scaled(&self, value: f64) -> f64 {
        (value - 1.0) / (self.scale as f64 - 1.0)
    }

    pub fn positive(&self, value: f64) -> bool {
        value >= self.positive_threshold
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut split: SplitDataset = serde_json::from_reader(r)?;
        if split.version != SPLIT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", split.version)));
        }
        split.users.rebuild()?;
        split.items.rebuild()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(crate::error::open(path)?))
    }
}

/// Carves a seeded validation fraction out of the MNAR ratings; the MAR
/// ratings become the test set, minus any pair that also appears in MNAR.
pub fn make_split(
    mnar: &RatingSet,
    mar: &RatingSet,
    spec: &RatingFileSpec,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::config(format!(
            "val_fraction must lie in (0, 0.5), got {val_fraction}"
        )));
    }
    let n_users = mnar.n_users.max(mar.n_users);
    let n_items = mnar.n_items.max(mar.n_items);
    let mut order: Vec<usize> = (0..mnar.ratings.len()).collect();
    order.shuffle(&mut SeededRng::new(seed).stream(Stream::Split, 0));
    let n_val = (mnar.ratings.len() as f64 * val_fraction).round() as usize;
    let val: Vec<Rating> = order[..n_val].iter().map(|&k| mnar.ratings[k]).collect();
    let train: Vec<Rating> = order[n_val..].iter().map(|&k| mnar.ratings[k]).collect();
    let seen: HashSet<(usize, usize)> = mnar.ratings.iter().map(|r| (r.user, r.item)).collect();
    let test: Vec<Rating> = mar
        .ratings
        .iter()
        .filter(|r| !seen.contains(&(r.user, r.item)))
        .copied()
        .collect();
    if test.len() < mar.ratings.len() {
        log::info!(
            "dropped {} MAR pairs also present in MNAR",
            mar.ratings.len() - test.len()
        );
    }
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::empty(format!("empty {name} partition")));
        }
    }
    let users = if mnar.users.len() >= mar.users.len() {
        &mnar.users
    } else {
        &mar.users
    };
    let items = if mnar.items.len() >= mar.items.len() {
        &mnar.items
    } else {
        &mar.items
    };
    Ok(SplitDataset {
        version: SPLIT_VERSION,
        n_users,
        n_items,
        scale: spec.scale,
        positive_threshold: spec.positive_threshold,
        val_fraction,
        seed,
        train,
        val,
        test,
        users: users.clone(),
        items: items.clone(),
    })
}

/// Paths of a rating pair plus how to read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub mnar: PathBuf,
    pub mar: PathBuf,
    #[serde(default)]
    pub spec: RatingFileSpec,
}
