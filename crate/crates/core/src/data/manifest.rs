use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{histogram, Grade, NUM_GRADES};

pub const MANIFEST_HEADER: [&str; 5] = ["image_id", "filepath", "grade", "patient_id", "source"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub filepath: String,
    pub grade: Grade,
    pub patient_id: Option<String>,
    pub source: String,
}

/// Records with unique `image_id`s.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image_id {:?}", r.image_id)));
            }
        }
        Ok(Manifest { records })
    }

    /// Records that may repeat ids, as produced by oversampling.
    pub fn with_duplicates(records: Vec<ImageRecord>) -> Self {
        Manifest { records }
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn histogram(&self) -> [usize; NUM_GRADES] {
        histogram(self.records.iter().map(|r| &r.grade))
    }

    pub fn grades(&self) -> Vec<Grade> {
        self.records.iter().map(|r| r.grade).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.image_id.as_str()).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = super::super::io::read_to_string(path)?;
    parse_manifest(&text, &path.display().to_string())
}

/// Like [`load_manifest`] but accepts repeated ids (oversampled training sets).
pub fn load_resampled_manifest(path: &Path) -> Result<Manifest> {
    let text = super::super::io::read_to_string(path)?;
    parse_manifest_inner(&text, &path.display().to_string(), true)
}

/// Parse manifest CSV text; `origin` names the source in diagnostics.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Manifest> {
    parse_manifest_inner(text, origin, false)
}

fn parse_manifest_inner(text: &str, origin: &str, allow_duplicates: bool) -> Result<Manifest> {
    let err = |line: u64, message: String| Error::Manifest {
        path: origin.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_HEADER {
        let missing: Vec<_> = MANIFEST_HEADER
            .iter()
            .filter(|h| !got.contains(h))
            .collect();
        return Err(err(
            1,
            if missing.is_empty() {
                format!("header must be {}", MANIFEST_HEADER.join(","))
            } else {
                format!("missing column(s) {missing:?}; header must be {}", MANIFEST_HEADER.join(","))
            },
        ));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != MANIFEST_HEADER.len() {
            return Err(err(
                line,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let image_id = row[0].to_string();
        if image_id.is_empty() {
            return Err(err(line, "empty image_id".into()));
        }
        let grade = row[2]
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(|g| Grade::new(g).ok())
            .ok_or_else(|| err(line, format!("grade {:?} is not an integer in 0..=4", &row[2])))?;
        if !seen.insert(image_id.clone()) && !allow_duplicates {
            return Err(err(line, format!("duplicate image_id {image_id:?}")));
        }
        let patient = row[3].trim();
        records.push(ImageRecord {
            image_id,
            filepath: row[1].to_string(),
            grade,
            patient_id: (!patient.is_empty()).then(|| patient.to_string()),
            source: row[4].to_string(),
        });
    }
    Ok(Manifest { records })
}

pub fn manifest_to_csv(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        w.write_record([
            r.image_id.as_str(),
            r.filepath.as_str(),
            &r.grade.to_string(),
            r.patient_id.as_deref().unwrap_or(""),
            r.source.as_str(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv flush: {e}")))
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    super::super::io::write_bytes(path, &manifest_to_csv(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIVE: &str = "image_id,filepath,grade,patient_id,source
a,img/a.png,0,p1,APTOS
b,img/b.png,1,,APTOS
c,img/c.png,2,p2,Messidor-2
d,img/d.png,3,,APTOS
e,img/e.png,4,p3,Messidor-2
";

    #[test]
    fn parses_one_per_grade() {
        let m = parse_manifest(FIVE, "five.csv").unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.histogram(), [1; 5]);
        assert_eq!(m.records()[1].patient_id, None);
        assert_eq!(m.records()[2].patient_id.as_deref(), Some("p2"));
    }

    #[test]
    fn bad_grade_names_the_line() {
        let text = FIVE.replace("d,img/d.png,3", "d,img/d.png,7");
        let e = parse_manifest(&text, "m.csv").unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 5, .. }), "{e}");
        assert!(e.to_string().contains("\"7\""));
    }

    #[test]
    fn duplicate_id_names_the_line() {
        let text = FIVE.replace("e,img/e.png", "a,img/e.png");
        let e = parse_manifest(&text, "m.csv").unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 6, .. }), "{e}");
    }

    #[test]
    fn missing_column() {
        let e = parse_manifest("image_id,filepath,grade,source\na,b,0,x\n", "m.csv").unwrap_err();
        assert!(e.to_string().contains("patient_id"), "{e}");
    }

    #[test]
    fn csv_round_trip() {
        let m = parse_manifest(FIVE, "five.csv").unwrap();
        let bytes = manifest_to_csv(m.records()).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), FIVE);
    }
}
