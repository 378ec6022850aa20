//! Synthetic datasets, netpbm files and manifests.

pub mod manifest;
pub mod netpbm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::{ImageError, ImageRgb, Mask};
use crate::rng;

pub use manifest::{t2_path, Manifest, Record, Split, SplitFractions, MANIFEST_FILE};
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use synth::{synth_cd_pair, synth_scene, CdConfig, CdPair, Scene, SceneConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))
}

/// Writes `num` scenes as `sNNNN_image.ppm` / `sNNNN_mask.pgm` plus a
/// manifest. Scene `i` draws from its own stream of `seed`.
pub fn write_scene_dataset(dir: &Path, num: usize, cfg: &SceneConfig, seed: u64) -> Result<Manifest> {
    create_dir(dir)?;
    for i in 0..num {
        let s = synth_scene(&mut rng::stream(seed, &[i as u64]), cfg)?;
        write_ppm(&s.image, &dir.join(format!("s{i:04}_image.ppm")))?;
        write_pgm(&s.mask, &dir.join(format!("s{i:04}_mask.pgm")))?;
    }
    let m = Manifest::build(dir, SplitFractions::SCENES, seed)?;
    m.save()?;
    Ok(m)
}

/// Writes `num` change pairs as `pNNNN_t1.ppm`, `pNNNN_t2.ppm` and
/// `pNNNN_change.pgm` plus a manifest (image column = t1, mask = change).
pub fn write_cd_dataset(dir: &Path, num: usize, cfg: &CdConfig, seed: u64) -> Result<Manifest> {
    create_dir(dir)?;
    for i in 0..num {
        let p = synth_cd_pair(&mut rng::stream(seed, &[i as u64]), cfg)?;
        write_ppm(&p.image_t1, &dir.join(format!("p{i:04}_t1.ppm")))?;
        write_ppm(&p.image_t2, &dir.join(format!("p{i:04}_t2.ppm")))?;
        write_pgm(&p.change, &dir.join(format!("p{i:04}_change.pgm")))?;
    }
    let m = Manifest::build(dir, SplitFractions::CHANGE, seed)?;
    m.save()?;
    Ok(m)
}

pub fn load_scenes(m: &Manifest, records: &[&Record]) -> Result<(Vec<ImageRgb>, Vec<Mask>)> {
    let mut images = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    for r in records {
        let img = read_ppm(&m.path(&r.image))?;
        let mask = read_pgm(&m.path(&r.mask))?;
        mask.same_size(img.height(), img.width())?;
        images.push(img);
        masks.push(mask);
    }
    Ok((images, masks))
}

pub fn load_cd_pairs(m: &Manifest, records: &[&Record]) -> Result<Vec<CdPair>> {
    records
        .iter()
        .map(|r| {
            let t1 = m.path(&r.image);
            let image_t1 = read_ppm(&t1)?;
            let image_t2 = read_ppm(&t2_path(&t1)?)?;
            let change = read_pgm(&m.path(&r.mask))?;
            image_t2.same_size(image_t1.height(), image_t1.width())?;
            change.same_size(image_t1.height(), image_t1.width())?;
            Ok(CdPair {
                image_t1,
                image_t2,
                change,
            })
        })
        .collect()
}
