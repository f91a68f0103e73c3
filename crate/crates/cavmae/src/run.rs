//! Run-directory management: config hashing, directory naming, atomic file
//! writes. Every command writes all artifacts under
//! `<runs_root>/<command>-<hash>-s<seed>/`, with the hash taken over the
//! canonical resolved config, so identical invocations map to identical
//! directories and overwrite their own outputs deterministically.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Hex SHA-256 over `command\n` + canonical config, truncated to 12 chars.
pub fn config_hash(command: &str, canonical: &str) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(canonical.as_bytes());
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

/// The directory all artifacts of this invocation go to (not yet created).
pub fn run_dir(runs_root: &Path, cfg: &ExperimentConfig) -> Result<(String, PathBuf)> {
    let hash = config_hash(&cfg.command, &cfg.canonical_lines());
    let seed = cfg.seed()?;
    let dir = runs_root.join(format!("{}-{hash}-s{seed}", cfg.command));
    Ok((hash, dir))
}

/// Writes via a temporary sibling and an atomic rename; creates parents.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .ok_or_else(|| CliError::runtime(format!("path '{}' has no parent", path.display())))?;
    std::fs::create_dir_all(parent)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::runtime(format!("path '{}' has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash("pretrain", "epochs=1\nseed=0\n");
        let b = config_hash("pretrain", "epochs=1\nseed=0\n");
        let c = config_hash("pretrain", "epochs=2\nseed=0\n");
        let d = config_hash("finetune", "epochs=1\nseed=0\n");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn run_dir_name_contains_command_hash_and_seed() {
        let cfg = ExperimentConfig::resolve(
            "pretrain",
            &[],
            None,
            &[("seed".to_string(), "42".to_string())],
        )
        .unwrap();
        let (hash, dir) = run_dir(Path::new("/tmp/x"), &cfg).unwrap();
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("pretrain-"));
        assert!(name.contains(&hash));
        assert!(name.ends_with("-s42"));
    }

    #[test]
    fn atomic_write_creates_parents_and_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/file.txt");
        atomic_write(&path, b"one").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"one");
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // no temp files left behind
        let entries: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(entries, vec!["file.txt"]);
    }
}
