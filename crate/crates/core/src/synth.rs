//! Synthetic datasets: the heavy/light gap instance and Zipfian corpora.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ItemId, UserSets};
use crate::rng::{Purpose, RunSeed};

/// The heavy item of [`synth_gap_instance`].
pub const HEAVY_ITEM: ItemId = ItemId(0);

/// `n` users of degree 3: the heavy item 0 plus two distinct light items drawn
/// uniformly from ids `1..=m`.
pub fn synth_gap_instance(n: usize, m: usize, seed: RunSeed) -> Result<UserSets> {
    if n < 1 || m < 2 {
        return Err(Error::param(format!(
            "gap instance needs n >= 1 and m >= 2, got n={n}, m={m}"
        )));
    }
    let key = seed.stream(Purpose::Synthetic);
    let mut out = UserSets::from_parallel(n, |u, buf| {
        let mut rng = key.rng(u as u64);
        buf.push(HEAVY_ITEM);
        buf.extend(index::sample(&mut rng, m, 2).into_iter().map(|k| ItemId(k as u32 + 1)));
    });
    out.reserve_item_space(m + 1);
    Ok(out)
}

/// Users with power-law degrees holding items drawn from a Zipf law over
/// item ranks (item 0 is the most frequent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfCorpus {
    pub users: usize,
    pub items: usize,
    pub item_exponent: f64,
    pub max_degree: usize,
    pub degree_exponent: f64,
}

impl ZipfCorpus {
    /// Named presets with text-like shapes (long user sets over a Zipfian
    /// vocabulary): `dense`, `balanced` and `tall`.
    pub fn preset(name: &str) -> Result<Self> {
        let c = match name {
            "dense" => ZipfCorpus {
                users: 20_000,
                items: 50_000,
                item_exponent: 1.0,
                max_degree: 300,
                degree_exponent: 0.5,
            },
            "balanced" => ZipfCorpus {
                users: 100_000,
                items: 100_000,
                item_exponent: 1.1,
                max_degree: 100,
                degree_exponent: 1.0,
            },
            "tall" => ZipfCorpus {
                users: 200_000,
                items: 150_000,
                item_exponent: 1.0,
                max_degree: 150,
                degree_exponent: 1.2,
            },
            other => return Err(Error::param(format!("unknown corpus preset {other:?}"))),
        };
        Ok(c)
    }

    pub const PRESETS: [&'static str; 3] = ["dense", "balanced", "tall"];

    /// A corpus with roughly `entries` user-item pairs.
    pub fn with_entries(entries: u64) -> Self {
        let mut c = ZipfCorpus {
            users: 1,
            items: ((entries / 10).max(100)) as usize,
            item_exponent: 1.0,
            max_degree: 200,
            degree_exponent: 1.4,
        };
        c.users = ((entries as f64 / c.mean_degree()).ceil() as usize).max(1);
        c
    }

    /// Expected degree before duplicate draws collapse.
    pub fn mean_degree(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 1..=self.max_degree {
            let p = (k as f64).powf(-self.degree_exponent);
            num += k as f64 * p;
            den += p;
        }
        num / den
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.max_degree == 0 || self.items > u32::MAX as usize {
            return Err(Error::param(format!("degenerate corpus shape {self:?}")));
        }
        if !(self.item_exponent > 0.0 && self.degree_exponent > 0.0) {
            return Err(Error::param("Zipf exponents must be > 0"));
        }
        Ok(())
    }

    pub fn generate(&self, seed: RunSeed) -> Result<UserSets> {
        self.validate()?;
        let item_law = Zipf::new(self.items as f64, self.item_exponent).map_err(|e| Error::param(e.to_string()))?;
        let degree_law =
            Zipf::new(self.max_degree as f64, self.degree_exponent).map_err(|e| Error::param(e.to_string()))?;
        let key = seed.stream(Purpose::Synthetic);
        let mut out = UserSets::from_parallel(self.users, |u, buf| {
            let mut rng = key.rng(u as u64);
            let d = (degree_law.sample(&mut rng) as usize).min(self.items);
            // Redraw repeats a bounded number of times; heavy heads can leave
            // a user slightly short of `d`.
            for _ in 0..8 {
                let missing = d - buf.len();
                buf.extend((0..missing).map(|_| ItemId(item_law.sample(&mut rng) as u32 - 1)));
                buf.sort_unstable();
                buf.dedup();
                if buf.len() == d {
                    break;
                }
            }
            if buf.is_empty() {
                buf.push(ItemId(rng.random_range(0..self.items as u32)));
            }
        });
        out.reserve_item_space(self.items);
        Ok(out)
    }
}

impl UserSets {
    /// Builds `n` users in parallel; `fill(u, buf)` appends user `u`'s items
    /// to an empty buffer. Duplicates are removed.
    pub fn from_parallel<F>(n: usize, fill: F) -> UserSets
    where
        F: Fn(usize, &mut Vec<ItemId>) + Sync,
    {
        const CHUNK: usize = 1 << 14;
        let chunks: Vec<(Vec<ItemId>, Vec<u32>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let (mut items, mut lens) = (Vec::new(), Vec::new());
                let mut buf = Vec::new();
                for u in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    buf.clear();
                    fill(u, &mut buf);
                    buf.sort_unstable();
                    buf.dedup();
                    items.extend_from_slice(&buf);
                    lens.push(buf.len() as u32);
                }
                (items, lens)
            })
            .collect();
        let total = chunks.iter().map(|c| c.0.len()).sum();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut items = Vec::with_capacity(total);
        let mut num_items = 0;
        for (chunk_items, lens) in chunks {
            if let Some(m) = chunk_items.iter().max() {
                num_items = num_items.max(m.index() + 1);
            }
            items.extend_from_slice(&chunk_items);
            for l in lens {
                offsets.push(offsets.last().unwrap() + l as usize);
            }
        }
        UserSets::from_parts(offsets, items, num_items)
    }
}
