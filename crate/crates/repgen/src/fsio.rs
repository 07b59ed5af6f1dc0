//! Small file-system helpers.

use std::fs;
use std::io;
use std::path::Path;

/// Writes a file atomically: write to a sibling temp file, then rename.
pub fn atomic_write(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp = file_name.to_os_string();
    tmp.push(".tmp");
    let tmp_path = match dir {
        Some(d) => d.join(&tmp),
        None => tmp.into(),
    };
    fs::write(&tmp_path, contents)?;
    fs::rename(&tmp_path, path)
}
