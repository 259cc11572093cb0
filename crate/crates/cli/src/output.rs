use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

/// Writes `contents` to a temporary sibling and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Everything needed to regenerate a run's outputs.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub code_version: &'a str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Writes `manifest.json` for training commands and `<command>_manifest.json`
/// otherwise, so analysis runs never replace a training manifest.
pub fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    seeds: Vec<u64>,
    extra: Option<serde_json::Value>,
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        command,
        code_version: CODE_VERSION,
        config_hash: cfg.hash()?,
        seeds,
        config: cfg,
        extra,
    };
    let name = match command {
        "train" | "sweep-sigma" => "manifest.json".to_string(),
        other => format!("{other}_manifest.json"),
    };
    let path = out.join(name);
    write_json(&path, &manifest)?;
    Ok(path)
}
