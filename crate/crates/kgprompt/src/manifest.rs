//! Dataset manifests: the CSV contract naming each image's label, subject,
//! attack type and split, plus loading and feature encoding.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderBackend, EncoderOutput, ImageTensor};
use crate::error::{Error, Result};

/// The exact header every manifest must carry.
pub const MANIFEST_HEADER: &str = "path,label,subject,attack_type,split";

/// Ground-truth class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Mask,
}

impl Label {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "real" => Ok(Label::Real),
            "mask" => Ok(Label::Mask),
            other => Err(Error::MalformedFile(format!(
                "label must be `real` or `mask`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Mask => "mask",
        })
    }
}

/// Which protocol side a sample belongs to; `Auto` defers to the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Auto,
}

impl Split {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "auto" => Ok(Split::Auto),
            other => Err(Error::MalformedFile(format!(
                "split must be train, dev, test or auto, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Auto => "auto",
        })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Label,
    pub subject: String,
    pub attack_type: String,
    pub split: Split,
}

/// Parses manifest CSV text; `base` resolves relative image paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedFile(format!("manifest header: {e}")))?;
    let expected: Vec<&str> = MANIFEST_HEADER.split(',').collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::MalformedFile(format!(
            "manifest header must be `{MANIFEST_HEADER}`, got `{}`",
            got.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::MalformedFile(format!("manifest row {index}: {e}")))?;
        let line = index + 2;
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let raw_path = field(0);
        if raw_path.is_empty() {
            return Err(Error::MalformedFile(format!("line {line}: empty path")));
        }
        let label = Label::parse(&field(1))
            .map_err(|e| Error::MalformedFile(format!("line {line}: {e}")))?;
        let subject = field(2);
        if subject.is_empty() {
            return Err(Error::MalformedFile(format!("line {line}: empty subject")));
        }
        let attack_type = field(3);
        match label {
            Label::Mask if attack_type.is_empty() => {
                return Err(Error::MalformedFile(format!(
                    "line {line}: mask rows need an attack_type"
                )));
            }
            Label::Real if !attack_type.is_empty() => {
                return Err(Error::MalformedFile(format!(
                    "line {line}: real rows must leave attack_type empty"
                )));
            }
            _ => {}
        }
        let split = Split::parse(&field(4))
            .map_err(|e| Error::MalformedFile(format!("line {line}: {e}")))?;
        let path = PathBuf::from(&raw_path);
        let path = if path.is_absolute() {
            path
        } else {
            base.join(path)
        };
        rows.push(ManifestRow {
            path,
            label,
            subject,
            attack_type,
            split,
        });
    }
    if rows.is_empty() {
        return Err(Error::MalformedFile("manifest has no rows".into()));
    }
    Ok(rows)
}

/// Reads a manifest file; image paths resolve against the manifest's dir.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Serializes rows back to manifest CSV (paths written as given).
pub fn render_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.path.display(),
            row.label,
            row.subject,
            row.attack_type,
            row.split
        ));
    }
    out
}

/// A manifest row with its image encoded into frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub path: PathBuf,
    pub label: Label,
    pub subject: String,
    pub attack_type: String,
    pub split: Split,
    pub features: EncoderOutput,
}

/// Loads and encodes every manifest image with the frozen backend.
pub fn encode_manifest(
    rows: &[ManifestRow],
    backend: &EncoderBackend,
) -> Result<Vec<EncodedSample>> {
    rows.iter()
        .map(|row| {
            let img = ImageTensor::from_png(&row.path)?;
            let features = encode(&img, backend)?;
            Ok(EncodedSample {
                path: row.path.clone(),
                label: row.label,
                subject: row.subject.clone(),
                attack_type: row.attack_type.clone(),
                split: row.split,
                features,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "path,label,subject,attack_type,split\n\
        a.png,real,s1,,train\n\
        b.png,mask,s1,resin,train\n\
        c.png,real,s2,,test\n";

    #[test]
    fn parses_valid_manifest() {
        let rows = parse_manifest(GOOD, Path::new("/data")).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].path, Path::new("/data/a.png"));
        assert_eq!(rows[0].label, Label::Real);
        assert_eq!(rows[1].attack_type, "resin");
        assert_eq!(rows[2].split, Split::Test);
    }

    #[test]
    fn absolute_paths_stay_absolute() {
        let text = "path,label,subject,attack_type,split\n/abs/x.png,real,s1,,auto\n";
        let rows = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(rows[0].path, Path::new("/abs/x.png"));
        assert_eq!(rows[0].split, Split::Auto);
    }

    #[test]
    fn rejects_wrong_header() {
        let text = "file,label,subject,attack_type,split\na.png,real,s1,,train\n";
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(
            matches!(err, Error::MalformedFile(ref m) if m.contains("header")),
            "got {err:?}"
        );
    }

    #[test]
    fn rejects_unknown_label_and_split() {
        let bad_label = "path,label,subject,attack_type,split\na.png,photo,s1,,train\n";
        let err = parse_manifest(bad_label, Path::new(".")).unwrap_err();
        assert!(
            matches!(err, Error::MalformedFile(ref m) if m.contains("label")),
            "got {err:?}"
        );

        let bad_split = "path,label,subject,attack_type,split\na.png,real,s1,,val\n";
        let err = parse_manifest(bad_split, Path::new(".")).unwrap_err();
        assert!(
            matches!(err, Error::MalformedFile(ref m) if m.contains("split")),
            "got {err:?}"
        );
    }

    #[test]
    fn rejects_mask_without_attack_type() {
        let text = "path,label,subject,attack_type,split\na.png,mask,s1,,train\n";
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(
            matches!(err, Error::MalformedFile(ref m) if m.contains("attack_type")),
            "got {err:?}"
        );
    }

    #[test]
    fn rejects_real_with_attack_type() {
        let text = "path,label,subject,attack_type,split\na.png,real,s1,resin,train\n";
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::MalformedFile(_)), "got {err:?}");
    }

    #[test]
    fn rejects_empty_manifest_and_missing_fields() {
        let empty = "path,label,subject,attack_type,split\n";
        assert!(parse_manifest(empty, Path::new(".")).is_err());

        let no_subject = "path,label,subject,attack_type,split\na.png,real,,,train\n";
        let err = parse_manifest(no_subject, Path::new(".")).unwrap_err();
        assert!(
            matches!(err, Error::MalformedFile(ref m) if m.contains("subject")),
            "got {err:?}"
        );
    }

    #[test]
    fn render_round_trips() {
        let rows = parse_manifest(GOOD, Path::new("")).unwrap();
        let text = render_manifest(&rows);
        let reparsed = parse_manifest(&text, Path::new("")).unwrap();
        assert_eq!(rows, reparsed);
    }

    #[test]
    fn load_manifest_resolves_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("data");
        std::fs::create_dir(&sub).unwrap();
        let manifest = sub.join("index.csv");
        std::fs::write(&manifest, GOOD).unwrap();
        let rows = load_manifest(&manifest).unwrap();
        assert_eq!(rows[0].path, sub.join("a.png"));
    }

    #[test]
    fn encode_manifest_reports_missing_image() {
        let rows = vec![ManifestRow {
            path: PathBuf::from("/nonexistent/x.png"),
            label: Label::Real,
            subject: "s1".into(),
            attack_type: String::new(),
            split: Split::Train,
        }];
        let backend = EncoderBackend::Toy(crate::encoder::ToyEncoder::new(4, 2, 0));
        assert!(encode_manifest(&rows, &backend).is_err());
    }

    #[test]
    fn encode_manifest_produces_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        image::RgbImage::from_pixel(8, 8, image::Rgb([100, 150, 200]))
            .save(&path)
            .unwrap();
        let rows = vec![ManifestRow {
            path: path.clone(),
            label: Label::Mask,
            subject: "s1".into(),
            attack_type: "resin".into(),
            split: Split::Test,
        }];
        let backend = EncoderBackend::Toy(crate::encoder::ToyEncoder::new(4, 2, 0));
        let encoded = encode_manifest(&rows, &backend).unwrap();
        assert_eq!(encoded.len(), 1);
        assert_eq!(encoded[0].features.patches.nrows(), 4);
        assert_eq!(encoded[0].features.global.len(), 4);
    }
}
