//! Run directories, field resolution and file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{init_field_net, train_flow, VelocityField};
use crate::harness::config::{ExperimentConfig, FieldSource};
use crate::special_math::{stream_key, RngStream};
use crate::tensor_nn::{net_to_bytes, read_net};

/// `<package version>+<git describe>` at build time, or the bare package
/// version outside a git checkout.
pub const VERSION: &str = env!("SCHEDRL_VERSION");

pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";
pub const FIELDS_DIR: &str = "fields";

pub(crate) const FIELD_TAG: u64 = 0xF1E1D;

/// Creates the output directory and records the resolved config and the
/// build version in it.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    write_atomic(&dir.join(VERSION_FILE), format!("{VERSION}\n").as_bytes())?;
    Ok(dir)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Identifies everything a trained field depends on.
fn field_fingerprint(cfg: &ExperimentConfig, index: usize) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        seed: u64,
        index: usize,
        target: &'a crate::flow::TargetSpec,
        flow: &'a crate::flow::FlowTrainConfig,
    }
    let key = Key { seed: cfg.seed, index, target: &cfg.targets[index].distribution, flow: &cfg.flow };
    let text = toml::to_string(&key).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn field_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    let base = dir.join(FIELDS_DIR);
    (
        base.join(format!("target-{index}.bin")),
        base.join(format!("target-{index}.key")),
        base.join(format!("target-{index}-loss.csv")),
    )
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Trains the field for target `index` and stores it under `dir`.
pub fn train_field(cfg: &ExperimentConfig, index: usize, dir: &Path) -> Result<VelocityField> {
    let target = &cfg.targets[index].distribution;
    let mut rng = RngStream::new(stream_key(cfg.seed, &[FIELD_TAG, index as u64]), 0);
    let mut net = init_field_net(target.dim(), &cfg.flow.hidden, &mut rng)?;
    log::info!("training field for target {index} ({} components)", target.complexity());
    let curve = train_flow(&mut net, target, &cfg.flow, &mut rng)?;
    let (bin, key, loss) = field_paths(dir, index);
    fs::create_dir_all(dir.join(FIELDS_DIR))?;
    write_atomic(&bin, &net_to_bytes(&net))?;
    write_atomic(&key, field_fingerprint(cfg, index)?.as_bytes())?;
    let rows: Vec<LossRow> = curve.into_iter().enumerate().map(|(step, loss)| LossRow { step, loss }).collect();
    write_csv_rows(&loss, &rows)?;
    VelocityField::learned(net)
}

fn load_net(path: &Path) -> Result<crate::tensor_nn::DenseNet> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_net(std::io::BufReader::new(f))
}

/// One field per target. Trained fields are reused from `dir` when their
/// stored fingerprint matches the current config, and trained otherwise.
pub fn resolve_fields(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<VelocityField>> {
    cfg.targets
        .iter()
        .enumerate()
        .map(|(i, t)| match &t.field {
            FieldSource::Oracle => VelocityField::oracle(t.distribution.clone()),
            FieldSource::Checkpoint(p) => {
                let field = VelocityField::learned(load_net(p)?)?;
                if field.dim() != t.distribution.dim() {
                    return Err(Error::Checkpoint(format!("{} does not match target {i}", p.display())));
                }
                Ok(field)
            }
            FieldSource::Train => {
                let (bin, key, _) = field_paths(dir, i);
                let stored = fs::read_to_string(&key).ok();
                if stored.as_deref() == Some(field_fingerprint(cfg, i)?.as_str()) && bin.exists() {
                    VelocityField::learned(load_net(&bin)?)
                } else {
                    train_field(cfg, i, dir)
                }
            }
        })
        .collect()
}
