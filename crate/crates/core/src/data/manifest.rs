//! JSON-lines dataset manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schema::AttributeSchema;
use crate::error::{MmflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Consumer,
    Shop,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Consumer => "consumer",
            Domain::Shop => "shop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl std::str::FromStr for Split {
    type Err = MmflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(MmflError::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Bounding box in pixels: x, y, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub f32, pub f32, pub f32, pub f32);

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_path: String,
    pub pid: u64,
    pub domain: Domain,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl ImageRecord {
    /// Resolves `image_path` against the manifest's directory when relative.
    pub fn resolve_path(&self, root: &Path) -> PathBuf {
        let p = Path::new(&self.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }
}

/// Parses manifest text; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str, schema: &AttributeSchema) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(line).map_err(|e| MmflError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(attrs) = &record.attributes {
            schema
                .check_labels(attrs)
                .map_err(|e| MmflError::Schema(format!("line {}: {e}", i + 1)))?;
        }
        records.push(record);
    }
    check_query_coverage(&records)?;
    Ok(records)
}

pub fn load_manifest(path: &Path, schema: &AttributeSchema) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(|e| MmflError::io(path, e))?;
    parse_manifest(&text, schema)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| MmflError::io(path, e))?;
    file.write_all(&out).map_err(|e| MmflError::io(path, e))
}

/// Every query pid must have at least one shop-domain gallery image.
fn check_query_coverage(records: &[ImageRecord]) -> Result<()> {
    let gallery: BTreeSet<u64> = records
        .iter()
        .filter(|r| r.split == Split::Gallery && r.domain == Domain::Shop)
        .map(|r| r.pid)
        .collect();
    if let Some(r) = records
        .iter()
        .find(|r| r.split == Split::Query && !gallery.contains(&r.pid))
    {
        return Err(MmflError::Schema(format!(
            "query pid {} has no shop gallery image ({})",
            r.pid, r.image_path
        )));
    }
    Ok(())
}

pub fn filter_split(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(path: &str, pid: u64, domain: &str, split: &str) -> String {
        format!(r#"{{"image_path":"{path}","pid":{pid},"domain":"{domain}","split":"{split}"}}"#)
    }

    #[test]
    fn order_preserved() {
        let text = [
            line("a.png", 3, "consumer", "train"),
            line("b.png", 1, "shop", "train"),
            line("c.png", 2, "shop", "gallery"),
        ]
        .join("\n");
        let recs = parse_manifest(&text, &AttributeSchema::default()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|r| r.image_path.as_str()).collect::<Vec<_>>(),
            ["a.png", "b.png", "c.png"]
        );
        assert_eq!(recs[1].domain, Domain::Shop);
    }

    #[test]
    fn out_of_range_attribute_is_schema_error() {
        let text = r#"{"image_path":"a.png","pid":0,"domain":"shop","split":"train","attributes":{"Collar":9}}"#;
        let err = parse_manifest(text, &AttributeSchema::default()).unwrap_err();
        assert!(matches!(err, MmflError::Schema(_)), "{err}");
    }

    #[test]
    fn empty_manifest() {
        assert!(parse_manifest("", &AttributeSchema::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\nnot json", line("a.png", 0, "shop", "train"));
        match parse_manifest(&text, &AttributeSchema::default()) {
            Err(MmflError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = r#"{"image_path":"a.png","pid":0,"domain":"shop","split":"train","extra":1}"#;
        assert!(matches!(
            parse_manifest(text, &AttributeSchema::default()),
            Err(MmflError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn query_without_gallery_rejected() {
        let text = [
            line("q.png", 5, "consumer", "query"),
            line("g.png", 6, "shop", "gallery"),
        ]
        .join("\n");
        assert!(parse_manifest(&text, &AttributeSchema::default()).is_err());
    }

    #[test]
    fn bbox_and_attributes_roundtrip() {
        let text = r#"{"image_path":"a.png","pid":7,"domain":"consumer","split":"train","attributes":{"Fabric":5},"bbox":[1.0,2.0,30.0,40.0]}"#;
        let recs = parse_manifest(text, &AttributeSchema::default()).unwrap();
        assert_eq!(recs[0].bbox, Some(BBox(1.0, 2.0, 30.0, 40.0)));
        let back = serde_json::to_string(&recs[0]).unwrap();
        assert_eq!(back, text);
    }
}
