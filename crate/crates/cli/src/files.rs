//! Output-directory handling, JSON writing and hashing.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = dir.is_file()
            || fs::read_dir(dir)
                .map_err(|e| CliError::io(dir, e))?
                .next()
                .is_some();
        if non_empty && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
        if non_empty {
            if dir.is_file() {
                fs::remove_file(dir).map_err(|e| CliError::io(dir, e))?;
            } else {
                fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Refuse to replace an existing file unless `force`, and create parents.
pub fn prepare_file(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::OutputExists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Every regular file under `root`, as sorted `/`-separated relative paths.
pub fn list_files(root: &Path) -> CliResult<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
        for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let path: PathBuf = entry.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walked under root");
                let parts: Vec<String> = rel
                    .iter()
                    .map(|c| c.to_string_lossy().into_owned())
                    .collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        prepare_dir(&dir, false).unwrap();
        prepare_dir(&dir, false).unwrap();
        write_text(&dir.join("a.txt"), "x").unwrap();
        assert!(matches!(
            prepare_dir(&dir, false),
            Err(CliError::OutputExists(_))
        ));
        prepare_dir(&dir, true).unwrap();
        assert!(list_files(&dir).unwrap().is_empty());
    }

    #[test]
    fn sha256_of_known_string() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("abc");
        write_text(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn lists_nested_files_sorted() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("b")).unwrap();
        write_text(&tmp.path().join("b/z.json"), "").unwrap();
        write_text(&tmp.path().join("a.csv"), "").unwrap();
        assert_eq!(list_files(tmp.path()).unwrap(), vec!["a.csv", "b/z.json"]);
    }
}
