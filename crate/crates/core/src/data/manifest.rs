use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grade::GradeLabel;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 2] = ["id_code", "diagnosis"];
pub const DEFAULT_IMAGE_EXT: &str = "png";

/// One labelled fundus photograph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub grade: GradeLabel,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, image_path: impl Into<PathBuf>, grade: GradeLabel) -> Result<Self> {
        let id = id.into();
        let image_path = image_path.into();
        if id.is_empty() {
            return Err(Error::InvalidArgument("record id is empty".into()));
        }
        if image_path.as_os_str().is_empty() {
            return Err(Error::InvalidArgument(format!("record {id}: image path is empty")));
        }
        Ok(ImageRecord { id, image_path, grade })
    }
}

/// Reads an `id_code,diagnosis` manifest, resolving images as `<images_dir>/<id_code>.png`.
pub fn load_manifest(manifest_path: &Path, images_dir: &Path) -> Result<Vec<ImageRecord>> {
    load_manifest_with_ext(manifest_path, images_dir, DEFAULT_IMAGE_EXT)
}

pub fn load_manifest_with_ext(manifest_path: &Path, images_dir: &Path, image_ext: &str) -> Result<Vec<ImageRecord>> {
    let mut reader = open_csv(manifest_path)?;
    let header = headers(&mut reader, manifest_path)?;
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest {
            path: manifest_path.to_path_buf(),
            message: format!("expected header `id_code,diagnosis`, found `{}`", header.join(",")),
        });
    }

    let ext = image_ext.trim_start_matches('.');
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row_err = |message: String| Error::ManifestRow {
            path: manifest_path.to_path_buf(),
            row: line,
            message,
        };
        let row = row.map_err(|e| row_err(e.to_string()))?;
        if row.len() != 2 {
            return Err(row_err(format!("expected 2 fields, found {}", row.len())));
        }
        let id = row[0].trim();
        if id.is_empty() {
            return Err(row_err("empty id_code".into()));
        }
        let diagnosis: i64 = row[1]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("diagnosis `{}` is not an integer", &row[1])))?;
        let grade = GradeLabel::new(diagnosis)
            .map_err(|_| row_err(format!("diagnosis {diagnosis} outside 0..=4 (id_code {id})")))?;
        if !seen.insert(id.to_string()) {
            return Err(row_err(format!("duplicate id_code `{id}`")));
        }
        records.push(ImageRecord {
            id: id.to_string(),
            image_path: images_dir.join(format!("{id}.{ext}")),
            grade,
        });
    }
    Ok(records)
}

/// Reads the `id_code` column of a manifest whose `diagnosis` column is optional.
/// Used for inference on unlabelled images.
pub fn load_ids(manifest_path: &Path) -> Result<Vec<String>> {
    let mut reader = open_csv(manifest_path)?;
    let header = headers(&mut reader, manifest_path)?;
    if header.first().map(String::as_str) != Some("id_code") {
        return Err(Error::Manifest {
            path: manifest_path.to_path_buf(),
            message: "first column must be `id_code`".into(),
        });
    }
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::ManifestRow {
            path: manifest_path.to_path_buf(),
            row: i + 2,
            message: e.to_string(),
        })?;
        let id = row.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(Error::ManifestRow {
                path: manifest_path.to_path_buf(),
                row: i + 2,
                message: format!("empty or duplicate id_code `{id}`"),
            });
        }
        ids.push(id);
    }
    Ok(ids)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([r.id.as_str(), &r.grade.value().to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

pub(crate) fn headers(reader: &mut csv::Reader<std::fs::File>, path: &Path) -> Result<Vec<String>> {
    let h = reader.headers().map_err(|e| csv_err(path, e))?;
    Ok(h.iter()
        .map(|s| s.trim_start_matches('\u{feff}').trim().to_string())
        .collect())
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn manifest(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn header_only_gives_empty_list() {
        let f = manifest("id_code,diagnosis\n");
        assert!(load_manifest(f.path(), Path::new("imgs")).unwrap().is_empty());
    }

    #[test]
    fn rows_resolve_to_png_paths_in_order() {
        let f = manifest("id_code,diagnosis\nb2,3\na1,0\n");
        let recs = load_manifest(f.path(), Path::new("imgs")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "b2");
        assert_eq!(recs[0].image_path, Path::new("imgs/b2.png"));
        assert_eq!(recs[0].grade.value(), 3);
        assert_eq!(recs[1].id, "a1");

        let jpg = load_manifest_with_ext(f.path(), Path::new("imgs"), ".jpg").unwrap();
        assert_eq!(jpg[1].image_path, Path::new("imgs/a1.jpg"));
    }

    #[test]
    fn out_of_range_diagnosis_names_row() {
        let f = manifest("id_code,diagnosis\nok,1\nbad,7\n");
        let err = load_manifest(f.path(), Path::new("i")).unwrap_err();
        match &err {
            Error::ManifestRow { row, message, .. } => {
                assert_eq!(*row, 3);
                assert!(message.contains("bad"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_rows_rejected() {
        let dup = manifest("id_code,diagnosis\nx,1\nx,2\n");
        assert!(matches!(
            load_manifest(dup.path(), Path::new("i")),
            Err(Error::ManifestRow { row: 3, .. })
        ));
        let nonint = manifest("id_code,diagnosis\nx,one\n");
        assert!(load_manifest(nonint.path(), Path::new("i")).is_err());
        let header = manifest("id,grade\nx,1\n");
        assert!(matches!(
            load_manifest(header.path(), Path::new("i")),
            Err(Error::Manifest { .. })
        ));
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.csv"), Path::new("i")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ids_without_diagnosis() {
        let f = manifest("id_code\nq1\nq2\n");
        assert_eq!(load_ids(f.path()).unwrap(), vec!["q1", "q2"]);
    }
}
