//! Atomic file output and typed readers for stage artifacts.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::PipelineError;

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    std::fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::parse(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::parse(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::parse(path, e))?;
    write_atomic(path, &bytes)
}

/// Writes a directory by filling a temp sibling and swapping it in.
pub fn replace_dir(
    dir: &Path,
    fill: impl FnOnce(&Path) -> std::io::Result<()>,
) -> Result<(), PipelineError> {
    let tmp = temp_sibling(dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| PipelineError::io(&tmp, e))?;
    }
    fill(&tmp).map_err(|e| PipelineError::io(&tmp, e))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| PipelineError::io(dir, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::parse(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::parse(path, e))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| PipelineError::parse(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_writes_leave_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.csv");
        write_csv(&p, [(1, 0.1f64), (2, 1.0 / 3.0)]).unwrap();
        let back: Vec<(u32, f64)> = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&p)
            .unwrap()
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back, vec![(1, 0.1), (2, 1.0 / 3.0)]);
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);

        let d = dir.path().join("data");
        replace_dir(&d, |t| std::fs::create_dir_all(t).and_then(|_| std::fs::write(t.join("x"), "1"))).unwrap();
        replace_dir(&d, |t| std::fs::create_dir_all(t).and_then(|_| std::fs::write(t.join("y"), "2"))).unwrap();
        assert!(!d.join("x").exists() && d.join("y").exists());
    }
}
