use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{generate_scene, Sample, SceneConfig};
use crate::error::{Error, Result};
use crate::io::Archive;

pub const MANIFEST: &str = "manifest.tsv";

/// Offset separating validation seeds from training seeds.
const VAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn load(&self, root: &Path) -> Result<Sample> {
        Sample::from_archive(&Archive::read(root.join(&self.path))?)
    }
}

pub fn sample_seed(base: u64, split: Split, index: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => VAL_SEED_OFFSET,
    };
    base.wrapping_add(offset).wrapping_add(index as u64)
}

/// Writes `n_train + n_val` sample archives and a `split<TAB>path<TAB>seed`
/// manifest into `out_dir`; returns the manifest path.
pub fn build_dataset(cfg: &SceneConfig, n_train: usize, n_val: usize, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    if n_train == 0 || n_val == 0 {
        return Err(Error::config("need at least one training and one validation sample"));
    }
    fs::create_dir_all(out_dir)?;
    let entries: Vec<ManifestEntry> = [(Split::Train, n_train), (Split::Val, n_val)]
        .into_iter()
        .flat_map(|(split, n)| {
            (0..n).map(move |i| ManifestEntry {
                split,
                path: PathBuf::from(format!("{split}_{i:05}.btnr")),
                seed: sample_seed(cfg.seed, split, i),
            })
        })
        .collect();
    entries.par_iter().try_for_each(|e| -> Result<()> {
        generate_scene(cfg, e.seed)?.to_archive()?.write(out_dir.join(&e.path))
    })?;
    let manifest: String = entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.split, e.path.display(), e.seed))
        .collect();
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Format(format!("{}:{}: expected split<TAB>path<TAB>seed", path.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let split = match f[0] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(bad()),
            };
            Ok(ManifestEntry {
                split,
                path: PathBuf::from(f[1]),
                seed: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_do_not_collide_across_splits() {
        let train: Vec<u64> = (0..100).map(|i| sample_seed(7, Split::Train, i)).collect();
        assert!((0..100).all(|i| !train.contains(&sample_seed(7, Split::Val, i))));
    }

    #[test]
    fn malformed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "train\ta.btnr\n").unwrap();
        assert!(load_manifest(&p).is_err());
        fs::write(&p, "test\ta.btnr\t1\n").unwrap();
        assert!(load_manifest(&p).is_err());
        fs::write(&p, "val\ta.btnr\t12\n").unwrap();
        assert_eq!(load_manifest(&p).unwrap()[0].seed, 12);
    }
}
