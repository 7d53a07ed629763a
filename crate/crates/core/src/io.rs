//! Atomic file output: write to a temporary file next to the target, then rename.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_atomic_str(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, |w| Ok(w.write_all(contents.as_bytes())?))
}
