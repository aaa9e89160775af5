//! Seeded block-structured interaction data.
//!
//! Each block owns a fixed set of "core" items (70% of its items by
//! default) that every user of the block interacts with. One core item per
//! user goes to test and another to validation, so the held-out items are
//! exactly those the user's block-mates consumed. Cross-block pairs are
//! added with probability `noise_p` each, and `extra_noise` adds a further
//! fraction of uniformly drawn pairs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::HarnessError;
use crate::data::write_pairs;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub users_per_block: usize,
    pub items_per_block: usize,
    pub blocks: usize,
    /// Probability of each cross-block user-item pair.
    pub noise_p: f64,
    pub seed: u64,
    pub core_fraction: f64,
    /// Uniform extra train pairs, as a fraction of the train size.
    pub extra_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            users_per_block: 50,
            items_per_block: 50,
            blocks: 2,
            noise_p: 0.05,
            seed: 42,
            core_fraction: 0.7,
            extra_noise: 0.0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), HarnessError> {
        if self.users_per_block == 0 || self.items_per_block == 0 || self.blocks == 0 {
            return Err(HarnessError::Config("users_per_block, items_per_block and blocks must be >= 1".into()));
        }
        for (name, v) in [("noise_p", self.noise_p), ("core_fraction", self.core_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(HarnessError::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.extra_noise >= 0.0 && self.extra_noise.is_finite()) {
            return Err(HarnessError::Config("extra_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.users_per_block * self.blocks
    }

    pub fn num_items(&self) -> usize {
        self.items_per_block * self.blocks
    }

    pub fn block_of_user(&self, u: usize) -> usize {
        u / self.users_per_block
    }

    pub fn block_of_item(&self, i: usize) -> usize {
        i / self.items_per_block
    }
}

/// Generated splits as sorted `(user, item)` index pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

pub fn generate(p: &SynthParams) -> Result<SynthData, HarnessError> {
    p.validate()?;
    let mut rng = SplitMix64::seed_from(p.seed);
    let (m, n) = (p.num_users(), p.num_items());
    let core_size = ((p.core_fraction * p.items_per_block as f64).round() as usize).clamp(1, p.items_per_block);

    let cores: Vec<Vec<usize>> = (0..p.blocks)
        .map(|b| {
            let mut items: Vec<usize> = (b * p.items_per_block..(b + 1) * p.items_per_block).collect();
            items.shuffle(&mut rng);
            items.truncate(core_size);
            items.sort_unstable();
            items
        })
        .collect();

    let mut train = BTreeSet::new();
    let mut validation = BTreeSet::new();
    let mut test = BTreeSet::new();
    for u in 0..m {
        let mut core = cores[p.block_of_user(u)].clone();
        core.shuffle(&mut rng);
        // At least one core item always stays in train.
        let held = (core.len() - 1).min(2);
        if held >= 1 {
            test.insert((u, core[0]));
        }
        if held >= 2 {
            validation.insert((u, core[1]));
        }
        for &i in &core[held..] {
            train.insert((u, i));
        }
        for i in 0..n {
            if p.block_of_item(i) != p.block_of_user(u) && rng.random_bool(p.noise_p) {
                train.insert((u, i));
            }
        }
    }

    let extra = (p.extra_noise * train.len() as f64).round() as usize;
    let free = m * n - train.len() - validation.len() - test.len();
    let mut added = 0;
    while added < extra.min(free) {
        let pair = (rng.random_range(0..m), rng.random_range(0..n));
        if !train.contains(&pair) && !validation.contains(&pair) && !test.contains(&pair) {
            train.insert(pair);
            added += 1;
        }
    }

    // A held-out item nobody trains on cannot be indexed; move it back.
    let trained: BTreeSet<usize> = train.iter().map(|&(_, i)| i).collect();
    for split in [&mut validation, &mut test] {
        let orphans: Vec<(usize, usize)> = split.iter().copied().filter(|(_, i)| !trained.contains(i)).collect();
        for pair in orphans {
            split.remove(&pair);
            train.insert(pair);
        }
    }

    Ok(SynthData {
        train: train.into_iter().collect(),
        validation: validation.into_iter().collect(),
        test: test.into_iter().collect(),
    })
}

fn named(pairs: &[(usize, usize)]) -> Vec<(String, String)> {
    pairs.iter().map(|&(u, i)| (format!("u{u}"), format!("i{i}"))).collect()
}

/// Writes `train.txt`, `val.txt` and `test.txt` under `out_dir`.
pub fn write_synth(out_dir: &Path, p: &SynthParams) -> Result<SynthData, HarnessError> {
    let data = generate(p)?;
    std::fs::create_dir_all(out_dir).map_err(super::io_err(out_dir))?;
    write_pairs(&out_dir.join("train.txt"), &named(&data.train))?;
    write_pairs(&out_dir.join("val.txt"), &named(&data.validation))?;
    write_pairs(&out_dir.join("test.txt"), &named(&data.test))?;
    Ok(data)
}
