//! Datasets shared by the end-to-end acceptance suite.

use std::path::{Path, PathBuf};

use gclrec::data::{read_pairs, stratified_split, write_pairs, InteractionDataset};
use gclrec::harness::{generate, HarnessError, RunConfig, SynthParams};

/// Generates a synthetic dataset in memory.
///
/// Item indices that no train pair uses are dropped so the index space
/// stays dense, matching what ingesting the written files would produce.
pub fn synth_dataset(p: &SynthParams) -> Result<InteractionDataset, HarnessError> {
    let d = generate(p)?;
    let mut used: Vec<usize> = d.train.iter().map(|&(_, i)| i).collect();
    used.sort_unstable();
    used.dedup();
    let remap = |pairs: &[(usize, usize)]| -> Vec<(usize, usize)> {
        pairs.iter().map(|&(u, i)| (u, used.binary_search(&i).expect("trained item"))).collect()
    };
    Ok(InteractionDataset::from_indices(
        p.num_users(),
        used.len(),
        remap(&d.train),
        remap(&d.validation),
        remap(&d.test),
    )?)
}

/// MovieLens-100K ratings: `$GCLREC_ML100K`, else `data/ml-100k/u.data`
/// under the workspace root.
pub fn ml100k_path() -> PathBuf {
    std::env::var_os("GCLREC_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data"))
}

/// Writes a seeded per-user 80/10/10 split of `ratings` into `dir` and
/// returns a default config pointing at it.
pub fn ml100k_config(ratings: &Path, dir: &Path, seed: u64) -> Result<RunConfig, HarnessError> {
    let pairs = read_pairs(ratings)?;
    let split = stratified_split(&pairs, 0.1, 0.1, seed);
    let mut cfg = RunConfig::default();
    for (name, part) in [("train.txt", &split.train), ("val.txt", &split.validation), ("test.txt", &split.test)] {
        write_pairs(&dir.join(name), part)?;
    }
    cfg.train_path = Some(dir.join("train.txt"));
    cfg.val_path = Some(dir.join("val.txt"));
    cfg.test_path = Some(dir.join("test.txt"));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_indices_are_dense_and_warm() {
        let p = SynthParams { users_per_block: 15, items_per_block: 20, noise_p: 0.0, ..SynthParams::default() };
        let ds = synth_dataset(&p).unwrap();
        assert_eq!(ds.num_users(), 30);
        assert!(ds.num_items() < 40, "non-core items have no pairs without noise");
        let trained: std::collections::HashSet<usize> = ds.train().iter().map(|&(_, i)| i).collect();
        assert_eq!(trained.len(), ds.num_items());
    }

    #[test]
    fn split_config_points_at_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let ratings = dir.path().join("ratings");
        let body: String = (0..20).flat_map(|u| (0..10).map(move |i| format!("{u}\t{i}\t5\t0\n"))).collect();
        std::fs::write(&ratings, body).unwrap();
        let cfg = ml100k_config(&ratings, dir.path(), 42).unwrap();
        let ds = gclrec::harness::load_dataset(&cfg).unwrap();
        assert_eq!(ds.train().len() + ds.validation().len() + ds.test().len(), 200);
    }
}
