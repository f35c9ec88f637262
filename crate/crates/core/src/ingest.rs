//! Reading user/item data from text files.
//!
//! String identifiers are mapped to dense ids in sorted string order, so the
//! resulting collection depends only on the set of pairs, not on line order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ItemId, UserSets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user<TAB>item` per line.
    PairsTsv,
    /// One document per line; each document is a user, its tokens the items.
    DocsText,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs-tsv" | "tsv" => Ok(InputFormat::PairsTsv),
            "docs-text" | "docs" => Ok(InputFormat::DocsText),
            other => Err(Error::param(format!("unknown input format {other:?}"))),
        }
    }
}

/// User sets together with the original string names of users and items.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sets: UserSets,
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
}

impl Dataset {
    /// Wraps numeric sets, naming users and items by their ids.
    pub fn from_sets(sets: UserSets) -> Self {
        Dataset {
            user_names: (0..sets.num_users()).map(|u| u.to_string()).collect(),
            item_names: (0..sets.num_items()).map(|i| i.to_string()).collect(),
            sets,
        }
    }

    pub fn item_name(&self, item: ItemId) -> &str {
        &self.item_names[item.index()]
    }
}

/// Tokenization rules for [`tokenize_docs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerSpec {
    pub lowercase: bool,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec { lowercase: true }
    }
}

impl TokenizerSpec {
    /// Splits on runs of non-alphanumeric characters, dropping empty tokens.
    pub fn tokens<'a>(&self, line: &'a str) -> impl Iterator<Item = String> + 'a {
        let lowercase = self.lowercase;
        line.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(move |t| if lowercase { t.to_lowercase() } else { t.to_string() })
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Dense ids for a set of names, assigned in sorted order.
fn intern_sorted<'a>(names: impl IntoIterator<Item = &'a str>) -> (HashMap<&'a str, u32>, Vec<String>) {
    let mut sorted: Vec<&str> = names.into_iter().collect();
    sorted.par_sort_unstable();
    sorted.dedup();
    let map = sorted.iter().enumerate().map(|(k, &s)| (s, k as u32)).collect();
    (map, sorted.into_iter().map(str::to_string).collect())
}

/// Parses `user<TAB>item` lines. `source` is only used in error messages.
pub fn parse_pairs_tsv(text: &str, source: &Path) -> Result<Dataset> {
    let mut raw: Vec<(&str, &str)> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: &str| Error::Parse {
            path: source.to_path_buf(),
            line: k + 1,
            message: message.to_string(),
        };
        let (user, item) = line.split_once('\t').ok_or_else(|| fail("expected user<TAB>item"))?;
        if item.contains('\t') {
            return Err(fail("expected exactly two tab-separated fields"));
        }
        if user.is_empty() || item.is_empty() {
            return Err(fail("empty user or item field"));
        }
        raw.push((user, item));
    }

    let (user_ids, user_names) = intern_sorted(raw.iter().map(|p| p.0));
    let (item_ids, item_names) = intern_sorted(raw.iter().map(|p| p.1));
    let mut pairs: Vec<(u32, u32)> = raw.iter().map(|(u, i)| (user_ids[u], item_ids[i])).collect();
    drop(raw);
    pairs.par_sort_unstable();
    pairs.dedup();

    let mut sets = UserSets::with_capacity(user_names.len(), pairs.len());
    let mut start = 0;
    for u in 0..user_names.len() as u32 {
        let end = start + pairs[start..].partition_point(|p| p.0 == u);
        sets.push_user(pairs[start..end].iter().map(|p| ItemId(p.1)));
        start = end;
    }
    sets.reserve_item_space(item_names.len());
    Ok(Dataset {
        sets,
        user_names,
        item_names,
    })
}

pub fn read_pairs_tsv(path: &Path) -> Result<Dataset> {
    parse_pairs_tsv(&read_text(path)?, path)
}

/// One user per line, in line order; empty lines give users with no items.
pub fn parse_docs(text: &str, spec: TokenizerSpec) -> Dataset {
    let docs: Vec<Vec<String>> = text.lines().map(|l| spec.tokens(l).collect()).collect();
    let (item_ids, item_names) = intern_sorted(docs.iter().flatten().map(String::as_str));
    let mut sets = UserSets::with_capacity(docs.len(), docs.iter().map(Vec::len).sum());
    for doc in &docs {
        sets.push_user(doc.iter().map(|t| ItemId(item_ids[t.as_str()])));
    }
    sets.reserve_item_space(item_names.len());
    Dataset {
        user_names: (0..docs.len()).map(|u| u.to_string()).collect(),
        item_names,
        sets,
    }
}

pub fn tokenize_docs(path: &Path, spec: TokenizerSpec) -> Result<Dataset> {
    Ok(parse_docs(&read_text(path)?, spec))
}

pub fn load(path: &Path, format: InputFormat) -> Result<Dataset> {
    match format {
        InputFormat::PairsTsv => read_pairs_tsv(path),
        InputFormat::DocsText => tokenize_docs(path, TokenizerSpec::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes the dataset as `user<TAB>item` lines, users and items in id order.
pub fn write_pairs_tsv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    for (u, items) in data.sets.iter().enumerate() {
        for &i in items {
            writeln!(out, "{}\t{}", data.user_names[u], data.item_name(i)).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Writes one item name per line, in the given order.
pub fn write_items(names: impl IntoIterator<Item = impl AsRef<str>>, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    for n in names {
        writeln!(out, "{}", n.as_ref()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Summary statistics of an input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sources: Vec<PathBuf>,
    pub format: InputFormat,
    pub entries: u64,
    pub users: u64,
    pub items: u64,
}

impl DatasetManifest {
    /// Counts users, items in the observed union, and entries.
    pub fn scan(data: &UserSets, sources: Vec<PathBuf>, format: InputFormat) -> Self {
        DatasetManifest {
            sources,
            format,
            entries: data.num_entries() as u64,
            users: data.num_users() as u64,
            items: data.support_mask().iter().filter(|&&b| b).count() as u64,
        }
    }

    /// Recounts from `data` and fails on any mismatch.
    pub fn check(&self, data: &UserSets) -> Result<()> {
        let fresh = Self::scan(data, self.sources.clone(), self.format);
        if fresh != *self {
            return Err(Error::Invariant(format!(
                "manifest counts {}/{}/{} (entries/users/items) differ from scan {}/{}/{}",
                self.entries, self.users, self.items, fresh.entries, fresh.users, fresh.items
            )));
        }
        Ok(())
    }
}
