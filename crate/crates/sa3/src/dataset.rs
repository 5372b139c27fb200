//! On-disk layout of one split:
//!
//! ```text
//! <dir>/manifest.json       class names, seed, split, record list
//! <dir>/annotations.jsonl   one object per record, same order
//! <dir>/images/<id>.ppm
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sa3_core::aiam::{DomainLabel, ImageLabelVector};
use sa3_core::detector::{Bbox, GtInstance};
use sa3_core::synth::{DatasetManifest, SceneRecord, Split};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    class_names: Vec<String>,
    seed: u64,
    split: String,
    annotations: String,
    records: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image_id: String,
    domain: String,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    image_labels: Vec<u8>,
}

fn image_path(id: &str) -> String {
    format!("{IMAGES_DIR}/{id}.ppm")
}

fn parse_domain(s: &str) -> Option<DomainLabel> {
    match s {
        "source" => Some(DomainLabel::Source),
        "target" => Some(DomainLabel::Target),
        _ => None,
    }
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        _ => None,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    create_dir(&dir.join(IMAGES_DIR))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut ann = BufWriter::new(file);
    for r in &manifest.records {
        if r.image_id.is_empty() || r.image_id.contains(['/', '\\']) {
            return Err(Error::validation("image_id", format!("{:?} cannot name a file", r.image_id)));
        }
        ppm::write(&dir.join(image_path(&r.image_id)), r.width, r.height, &r.pixels)?;
        let line = AnnotationLine {
            image_id: r.image_id.clone(),
            domain: r.domain.as_str().to_string(),
            boxes: r.instances.iter().map(|g| g.bbox.to_array()).collect(),
            classes: r.instances.iter().map(|g| g.class_id).collect(),
            image_labels: r.image_labels.0.iter().map(|&b| b as u8).collect(),
        };
        let json = serde_json::to_string(&line).expect("annotation serializes");
        writeln!(ann, "{json}").map_err(|e| Error::io(&ann_path, e))?;
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))?;

    let mf = ManifestFile {
        format_version: FORMAT_VERSION,
        class_names: manifest.class_names.clone(),
        seed: manifest.seed,
        split: manifest.split.as_str().to_string(),
        annotations: ANNOTATIONS_FILE.to_string(),
        records: manifest.records.iter().map(|r| image_path(&r.image_id)).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&mf).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mf: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Parse { path: mpath.clone(), line: 0, message };
    if mf.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", mf.format_version)));
    }
    let split = parse_split(&mf.split).ok_or_else(|| bad(format!("unknown split {:?}", mf.split)))?;
    let classes = mf.class_names.len();

    let apath = dir.join(&mf.annotations);
    let file = fs::File::open(&apath).map_err(|e| Error::io(&apath, e))?;
    let mut records = Vec::with_capacity(mf.records.len());
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&apath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let perr = |message: String| Error::Parse { path: apath.clone(), line: lineno, message };
        let a: AnnotationLine = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        records.push(to_record(a, classes, dir).map_err(|m| match m {
            RecordError::Invalid(m) => perr(m),
            RecordError::Asset(e) => e,
        })?);
    }

    let listed: Vec<PathBuf> = mf.records.iter().map(PathBuf::from).collect();
    let found: Vec<PathBuf> = records.iter().map(|r| PathBuf::from(image_path(&r.image_id))).collect();
    if listed != found {
        return Err(bad("record list does not match the annotation file".into()));
    }
    Ok(DatasetManifest { class_names: mf.class_names, seed: mf.seed, split, records })
}

enum RecordError {
    Invalid(String),
    Asset(Error),
}

fn to_record(a: AnnotationLine, classes: usize, dir: &Path) -> std::result::Result<SceneRecord, RecordError> {
    use RecordError::Invalid;
    let domain = parse_domain(&a.domain).ok_or_else(|| Invalid(format!("unknown domain {:?}", a.domain)))?;
    if a.boxes.len() != a.classes.len() {
        return Err(Invalid(format!("{} boxes but {} classes", a.boxes.len(), a.classes.len())));
    }
    if a.image_labels.len() != classes || a.image_labels.iter().any(|&v| v > 1) {
        return Err(Invalid(format!("image_labels must be {classes} flags of 0 or 1")));
    }
    let mut instances = Vec::with_capacity(a.boxes.len());
    for (b, &class_id) in a.boxes.iter().zip(&a.classes) {
        let bbox = Bbox::new(b[0], b[1], b[2], b[3])
            .map_err(|_| Invalid(format!("box {b:?} needs x1 < x2 and y1 < y2")))?;
        if class_id >= classes {
            return Err(Invalid(format!("class {class_id} out of range for {classes} classes")));
        }
        instances.push(GtInstance { bbox, class_id });
    }
    let image_labels = ImageLabelVector(a.image_labels.iter().map(|&v| v == 1).collect());
    if domain == DomainLabel::Source {
        let implied = ImageLabelVector::from_classes(classes, a.classes.iter().copied());
        if implied != image_labels {
            return Err(Invalid("image_labels disagree with the instance classes".into()));
        }
    }
    let img = ppm::read(&dir.join(image_path(&a.image_id))).map_err(RecordError::Asset)?;
    for g in &instances {
        if g.bbox.x2 > img.width as f64 || g.bbox.y2 > img.height as f64 || g.bbox.x1 < 0.0 || g.bbox.y1 < 0.0 {
            return Err(Invalid(format!("box {:?} leaves the {}×{} image", g.bbox.to_array(), img.width, img.height)));
        }
    }
    Ok(SceneRecord {
        image_id: a.image_id,
        domain,
        width: img.width,
        height: img.height,
        pixels: img.pixels,
        instances,
        image_labels,
    })
}

/// Train and test splits under `root/train` and `root/test`.
pub fn write_benchmark(train: &DatasetManifest, test: &DatasetManifest, root: &Path) -> Result<()> {
    write_dataset(train, &root.join("train"))?;
    write_dataset(test, &root.join("test"))
}

/// Accepts either a split directory or a root holding `train/` and `test/`;
/// returns the requested split.
pub fn read_split(path: &Path, split: Split) -> Result<DatasetManifest> {
    if path.join(MANIFEST_FILE).is_file() {
        let m = read_dataset(path)?;
        if m.split != split {
            return Err(Error::validation(
                "data",
                format!("{} holds the {} split, expected {}", path.display(), m.split.as_str(), split.as_str()),
            ));
        }
        return Ok(m);
    }
    read_dataset(&path.join(split.as_str()))
}
