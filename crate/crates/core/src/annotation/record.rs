//! On-disk formats: line-delimited description records and the plain-text
//! scene table.
//!
//! Record file: UTF-8, one JSON object per line with fields
//! `description_id`, `scene_id`, `text` (tagged form), and optional
//! `sentence_target_ids`.
//!
//! Scene file: a header line `# scene <id> points=<n>` followed by one
//! point per line, `x y z r g b label`, where `label` is a non-negative
//! instance ID or `-` for unlabeled points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{Scene, ScenePoint};

use super::{parse_tagged_text, serialize_tagged_text, AnnotatedDescription, PhraseTarget};

pub type SceneMap = BTreeMap<String, Scene>;

/// One line of the record file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordLine {
    pub description_id: String,
    pub scene_id: String,
    /// Tagged interchange text, `[phrase](id,id)` form.
    pub text: String,
    /// Present on sentence-level (joint-training) records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_target_ids: Option<BTreeSet<u32>>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    FileUnwritable {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("malformed scene file {path} at line {line}: {message}")]
    MalformedScene {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// A per-record problem found while loading; data, not a fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetViolation {
    /// 1-based line number in the record file.
    pub line: usize,
    pub description_id: Option<String>,
    pub message: String,
}

/// Parse every line of a record file without any scene cross-checks.
pub fn load_records(path: &Path) -> Result<(Vec<AnnotatedDescription>, Vec<DatasetViolation>), DatasetError> {
    load_dataset(path, None)
}

/// Load a record file, optionally cross-checking phrase targets against the
/// given scenes. Violations are collected, not thrown, so a partly bad
/// dataset is still inspectable; only an unreadable file is a hard error.
pub fn load_dataset(
    path: &Path,
    scenes: Option<&SceneMap>,
) -> Result<(Vec<AnnotatedDescription>, Vec<DatasetViolation>), DatasetError> {
    let raw = fs::read_to_string(path).map_err(|source| DatasetError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;

    let mut descriptions = Vec::new();
    let mut violations = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();

    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecordLine = match serde_json::from_str(line) {
            Ok(record) => record,
            Err(err) => {
                violations.push(DatasetViolation {
                    line: line_no,
                    description_id: None,
                    message: format!("malformed record: {err}"),
                });
                continue;
            }
        };
        let (tokens, mut phrases) = match parse_tagged_text(&record.text) {
            Ok(parsed) => parsed,
            Err(err) => {
                violations.push(DatasetViolation {
                    line: line_no,
                    description_id: Some(record.description_id.clone()),
                    message: format!("tagged text: {err}"),
                });
                continue;
            }
        };
        if let Some(ids) = &record.sentence_target_ids {
            if ids.is_empty() {
                violations.push(DatasetViolation {
                    line: line_no,
                    description_id: Some(record.description_id.clone()),
                    message: "sentence_target_ids is empty".into(),
                });
            } else {
                phrases.push(PhraseTarget::sentence_level(tokens.len(), ids.clone()));
            }
        }
        let desc = AnnotatedDescription {
            description_id: record.description_id.clone(),
            scene_id: record.scene_id.clone(),
            tokens,
            phrases,
        };
        for problem in desc.validate() {
            violations.push(DatasetViolation {
                line: line_no,
                description_id: Some(desc.description_id.clone()),
                message: problem,
            });
        }
        if !seen_ids.insert(desc.description_id.clone()) {
            violations.push(DatasetViolation {
                line: line_no,
                description_id: Some(desc.description_id.clone()),
                message: "duplicate description_id".into(),
            });
        }
        if let Some(scenes) = scenes {
            match scenes.get(&desc.scene_id) {
                None => violations.push(DatasetViolation {
                    line: line_no,
                    description_id: Some(desc.description_id.clone()),
                    message: format!("unknown scene {}", desc.scene_id),
                }),
                Some(scene) => {
                    let present = scene.instance_ids();
                    for phrase in &desc.phrases {
                        for id in &phrase.target_ids {
                            if !present.contains(id) {
                                violations.push(DatasetViolation {
                                    line: line_no,
                                    description_id: Some(desc.description_id.clone()),
                                    message: format!(
                                        "target instance {id} not present in scene {}",
                                        desc.scene_id
                                    ),
                                });
                            }
                        }
                    }
                }
            }
        }
        descriptions.push(desc);
    }
    Ok((descriptions, violations))
}

/// Write descriptions as a record file, one JSON object per line.
pub fn save_records(descs: &[AnnotatedDescription], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for desc in descs {
        let record = RecordLine {
            description_id: desc.description_id.clone(),
            scene_id: desc.scene_id.clone(),
            text: serialize_tagged_text(desc),
            sentence_target_ids: desc.sentence_phrase().map(|p| p.target_ids.clone()),
        };
        let line = serde_json::to_string(&record).expect("record serialization is infallible");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DatasetError::FileUnwritable {
        path: path.display().to_string(),
        source,
    })
}

/// Write a scene table.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    let _ = writeln!(out, "# scene {} points={}", scene.scene_id, scene.len());
    for (point, label) in scene.points.iter().zip(&scene.instance_labels) {
        let label = label.map_or_else(|| "-".to_string(), |id| id.to_string());
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {label}",
            point.position[0],
            point.position[1],
            point.position[2],
            point.color[0],
            point.color[1],
            point.color[2],
        );
    }
    fs::write(path, out).map_err(|source| DatasetError::FileUnwritable {
        path: path.display().to_string(),
        source,
    })
}

/// Read one scene table.
pub fn load_scene(path: &Path) -> Result<Scene, DatasetError> {
    let raw = fs::read_to_string(path).map_err(|source| DatasetError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;
    let malformed = |line: usize, message: String| DatasetError::MalformedScene {
        path: path.display().to_string(),
        line,
        message,
    };

    let mut lines = raw.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header".into()))?;
    let header_parts: Vec<&str> = header.split_whitespace().collect();
    let scene_id = match header_parts.as_slice() {
        ["#", "scene", id, _points] => (*id).to_string(),
        _ => return Err(malformed(1, format!("bad header {header:?}"))),
    };

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(malformed(line_no, format!("expected 7 fields, got {}", fields.len())));
        }
        let mut values = [0.0f64; 6];
        for (slot, field) in values.iter_mut().zip(&fields[..6]) {
            *slot = field
                .parse()
                .map_err(|e| malformed(line_no, format!("bad number {field:?}: {e}")))?;
        }
        let label = match fields[6] {
            "-" => None,
            text => Some(
                text.parse::<u32>()
                    .map_err(|e| malformed(line_no, format!("bad label {text:?}: {e}")))?,
            ),
        };
        points.push(ScenePoint {
            position: [values[0], values[1], values[2]],
            color: [values[3], values[4], values[5]],
        });
        labels.push(label);
    }
    Ok(Scene::new(scene_id, points, labels))
}

/// Load every `*.scene` file in a directory, keyed by scene ID.
pub fn load_scene_dir(dir: &Path) -> Result<SceneMap, DatasetError> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::FileUnreadable {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "scene"))
        .collect();
    paths.sort();
    let mut scenes = SceneMap::new();
    for path in paths {
        let scene = load_scene(&path)?;
        scenes.insert(scene.scene_id.clone(), scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn toy_scene(id: &str, labels: &[Option<u32>]) -> Scene {
        let points = (0..labels.len())
            .map(|i| ScenePoint {
                position: [i as f64 * 0.1, 0.0, 0.25],
                color: [0.1, 0.2, 0.3],
            })
            .collect();
        Scene::new(id, points, labels.to_vec())
    }

    #[test]
    fn scene_file_roundtrips() {
        let dir = TempDir::new().unwrap();
        let scene = toy_scene("kitchen", &[Some(1), None, Some(2)]);
        let path = dir.path().join("kitchen.scene");
        save_scene(&scene, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), scene);
    }

    #[test]
    fn record_file_roundtrips_including_sentence_targets() {
        let dir = TempDir::new().unwrap();
        let (tokens, mut phrases) = parse_tagged_text("see [the chair](2)").unwrap();
        phrases.push(PhraseTarget::sentence_level(tokens.len(), [2].into()));
        let desc = AnnotatedDescription {
            description_id: "d0".into(),
            scene_id: "kitchen".into(),
            tokens,
            phrases,
        };
        let path = dir.path().join("records.jsonl");
        save_records(std::slice::from_ref(&desc), &path).unwrap();
        let (loaded, violations) = load_records(&path).unwrap();
        assert!(violations.is_empty(), "{violations:?}");
        assert_eq!(loaded, vec![desc]);
    }

    #[test]
    fn unknown_scene_is_a_violation_not_an_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("records.jsonl");
        std::fs::write(
            &path,
            r#"{"description_id":"d0","scene_id":"nowhere","text":"see [the chair](2)"}"#,
        )
        .unwrap();
        let scenes = SceneMap::new();
        let (descs, violations) = load_dataset(&path, Some(&scenes)).unwrap();
        assert_eq!(descs.len(), 1);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("unknown scene"));
    }

    #[test]
    fn missing_target_instance_is_a_violation() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("records.jsonl");
        std::fs::write(
            &path,
            r#"{"description_id":"d0","scene_id":"kitchen","text":"see [the chair](7)"}"#,
        )
        .unwrap();
        let mut scenes = SceneMap::new();
        scenes.insert("kitchen".into(), toy_scene("kitchen", &[Some(1)]));
        let (_, violations) = load_dataset(&path, Some(&scenes)).unwrap();
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("target instance 7"));
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("records.jsonl");
        std::fs::write(&path, "").unwrap();
        let (descs, violations) = load_records(&path).unwrap();
        assert!(descs.is_empty());
        assert!(violations.is_empty());
    }

    #[test]
    fn malformed_line_is_collected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("records.jsonl");
        std::fs::write(&path, "{not json\n").unwrap();
        let (descs, violations) = load_records(&path).unwrap();
        assert!(descs.is_empty());
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].line, 1);
    }

    #[test]
    fn unreadable_file_is_a_hard_error() {
        let err = load_records(Path::new("/definitely/not/here.jsonl")).unwrap_err();
        assert!(matches!(err, DatasetError::FileUnreadable { .. }));
    }

    #[test]
    fn scene_dir_loader_collects_by_id() {
        let dir = TempDir::new().unwrap();
        for id in ["a", "b"] {
            let scene = toy_scene(id, &[Some(0)]);
            save_scene(&scene, &dir.path().join(format!("{id}.scene"))).unwrap();
        }
        let scenes = load_scene_dir(dir.path()).unwrap();
        assert_eq!(scenes.len(), 2);
        assert!(scenes.contains_key("a") && scenes.contains_key("b"));
    }
}
