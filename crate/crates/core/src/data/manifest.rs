//! Plain-text dataset manifests: one `image<TAB>mask<TAB>split` record per
//! line, paths relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{DataError, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// Fractions of records assigned to train / val / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const SCENES: Self = Self {
        train: 0.8,
        val: 0.2,
        test: 0.0,
    };
    pub const CHANGE: Self = Self {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };

    /// Record counts for `n` items; whatever rounding leaves over goes to test.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let sum = self.train + self.val + self.test;
        if [self.train, self.val, self.test]
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(DataError::Invalid(format!(
                "split fractions {self:?} must sum to 1"
            )));
        }
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        Ok((train, val, n - train - val))
    }
}

/// Second image of a bitemporal pair stored next to the first:
/// `<name>_t1.ppm` pairs with `<name>_t2.ppm`.
pub fn t2_path(t1: &Path) -> Result<PathBuf> {
    let name = t1
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix("_t1.ppm"))
        .ok_or_else(|| DataError::Invalid(format!("{} is not a `_t1.ppm` file", t1.display())))?;
    Ok(t1.with_file_name(format!("{name}_t2.ppm")))
}

fn mask_for(image_name: &str) -> Option<String> {
    if let Some(stem) = image_name.strip_suffix("_image.ppm") {
        Some(format!("{stem}_mask.pgm"))
    } else {
        image_name
            .strip_suffix("_t1.ppm")
            .map(|stem| format!("{stem}_change.pgm"))
    }
}

impl Manifest {
    /// Enumerates `*_image.ppm` / `*_mask.pgm` scene pairs and
    /// `*_t1.ppm` / `*_t2.ppm` / `*_change.pgm` change pairs in `dir`,
    /// shuffles them with `seed`, and assigns splits.
    pub fn build(dir: &Path, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(|e| DataError::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| mask_for(n).is_some())
            .collect();
        names.sort();
        let mut pairs = Vec::with_capacity(names.len());
        for n in names {
            let mask = mask_for(&n).expect("filtered");
            let image = PathBuf::from(&n);
            for needed in [dir.join(&mask)].into_iter().chain(
                n.ends_with("_t1.ppm")
                    .then(|| dir.join(t2_path(&image).expect("suffix"))),
            ) {
                if !needed.is_file() {
                    return Err(DataError::MissingFile(needed));
                }
            }
            pairs.push((image, PathBuf::from(mask)));
        }
        pairs.shuffle(&mut rng::stream(seed, &[0x5911]));
        let (train, val, _) = fractions.counts(pairs.len())?;
        let records = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (image, mask))| Record {
                image,
                mask,
                split: if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                },
            })
            .collect();
        Ok(Self {
            root: dir.to_path_buf(),
            records,
        })
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.image.display(), r.mask.display(), r.split))
            .collect()
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, mask, split] = fields[..] else {
                return Err(DataError::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    i + 1,
                    fields.len()
                )));
            };
            records.push(Record {
                image: PathBuf::from(image),
                mask: PathBuf::from(mask),
                split: split.parse()?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_tsv()).map_err(|e| DataError::io(&path, e))?;
        Ok(path)
    }

    /// Reads `dir/manifest.tsv` and checks that every referenced file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let m = Self::parse(dir, &text)?;
        for r in &m.records {
            for p in [m.path(&r.image), m.path(&r.mask)] {
                if !p.is_file() {
                    return Err(DataError::MissingFile(p));
                }
            }
        }
        Ok(m)
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// The first `max(1, round(frac * n))` records of a seeded shuffle of
    /// the training split. Smaller fractions give prefixes of larger ones.
    pub fn subsample_train(&self, frac: f64, seed: u64) -> Result<Vec<&Record>> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(DataError::Invalid(format!("fraction {frac} outside (0, 1]")));
        }
        let mut train = self.split(Split::Train);
        if train.is_empty() {
            return Err(DataError::Invalid("training split is empty".into()));
        }
        train.shuffle(&mut rng::stream(seed, &[0xf4ac]));
        let k = ((frac * train.len() as f64).round() as usize).clamp(1, train.len());
        train.truncate(k);
        Ok(train)
    }
}
