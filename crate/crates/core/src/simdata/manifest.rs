use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 3] = ["filename", "count", "mask_filename"];

/// One image; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub count: u32,
    pub mask_filename: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].filename)
    }

    pub fn mask_path(&self, i: usize) -> Option<PathBuf> {
        self.entries[i]
            .mask_filename
            .as_ref()
            .map(|m| self.root.join(m))
    }

    /// Indices of entries that carry a mask.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.entries[i].mask_filename.is_some())
            .collect()
    }
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::invalid(format!("manifest {}: {other:?}", path.display())),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for e in entries {
        let count = e.count.to_string();
        w.write_record([
            e.filename.as_str(),
            count.as_str(),
            e.mask_filename.as_deref().unwrap_or(""),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bad = |line: u64, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut entries = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
            match e.into_kind() {
                csv::ErrorKind::Io(e) => Error::io(path, e),
                other => bad(line, format!("{other:?}")),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if i == 0 {
            if rec.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
                return Err(bad(
                    line,
                    format!("header must be `{}`", MANIFEST_HEADER.join(",")),
                ));
            }
            continue;
        }
        if rec.len() != 3 {
            return Err(bad(line, format!("expected 3 fields, found {}", rec.len())));
        }
        if rec[0].is_empty() {
            return Err(bad(line, "empty filename".into()));
        }
        let count: u32 = rec[1].trim().parse().map_err(|_| {
            bad(
                line,
                format!("count `{}` is not a non-negative integer", &rec[1]),
            )
        })?;
        entries.push(ManifestEntry {
            filename: rec[0].to_string(),
            count,
            mask_filename: (!rec[2].is_empty()).then(|| rec[2].to_string()),
        });
    }
    Ok(Manifest {
        entries,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}
