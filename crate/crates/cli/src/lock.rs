//! Advisory directory locks: one writer per artifact directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Create `<dir>/.lock` exclusively; an existing lock means another
    /// process is writing this directory.
    pub fn acquire(dir: &Path) -> anyhow::Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            anyhow::anyhow!("output directory {dir:?} is locked ({e}); remove {path:?} if stale")
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_writer_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }
}
