//! Checkpoint archive: a zip file holding `manifest.txt` (entry names in
//! order, one per line) plus one file per named blob. Entries are stored
//! uncompressed with a fixed timestamp so identical contents produce
//! byte-identical archives.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.txt";

fn options() -> SimpleFileOptions {
    SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644)
}

/// Write named blobs in order. Names must be unique and newline-free.
pub fn write_archive(path: impl AsRef<Path>, entries: &[(String, Vec<u8>)]) -> Result<()> {
    for (name, _) in entries {
        if name.is_empty() || name.contains('\n') || name == MANIFEST {
            return Err(Error::Format(format!("invalid archive entry name {name:?}")));
        }
    }
    let file = File::create(path)?;
    let mut zip = ZipWriter::new(file);
    let manifest: String = entries
        .iter()
        .map(|(name, _)| format!("{name}\n"))
        .collect();
    zip.start_file(MANIFEST, options())
        .map_err(zip_err)?;
    zip.write_all(manifest.as_bytes())?;
    for (name, blob) in entries {
        zip.start_file(name, options()).map_err(zip_err)?;
        zip.write_all(blob)?;
    }
    zip.finish().map_err(zip_err)?;
    Ok(())
}

/// Read blobs back in manifest order.
pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<u8>)>> {
    let file = File::open(&path)?;
    let mut zip = ZipArchive::new(file).map_err(zip_err)?;
    let manifest = {
        let mut entry = zip
            .by_name(MANIFEST)
            .map_err(|_| Error::Format("archive is missing manifest.txt".into()))?;
        let mut s = String::new();
        entry.read_to_string(&mut s)?;
        s
    };
    let mut out = Vec::new();
    for name in manifest.lines().filter(|l| !l.is_empty()) {
        let mut entry = zip.by_name(name).map_err(|_| {
            Error::Format(format!("archive entry {name:?} listed in manifest but missing"))
        })?;
        let mut blob = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut blob)?;
        out.push((name.to_string(), blob));
    }
    Ok(out)
}

fn zip_err(e: zip::result::ZipError) -> Error {
    Error::Format(format!("zip: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_order_and_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.zip");
        let entries = vec![
            ("b.weight".to_string(), vec![1u8, 2, 3]),
            ("a.bias".to_string(), vec![9u8; 100]),
        ];
        write_archive(&path, &entries).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn identical_contents_identical_bytes() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.zip");
        let p2 = dir.path().join("b.zip");
        let entries = vec![("x".to_string(), vec![42u8; 17])];
        write_archive(&p1, &entries).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(30));
        write_archive(&p2, &entries).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.zip");
        std::fs::write(&path, b"PK\x05\x06not really").unwrap();
        assert!(read_archive(&path).is_err());
    }
}
