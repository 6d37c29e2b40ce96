use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    Normal,
    Anomaly,
    Unknown,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Anomaly => "anomaly",
            Condition::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = AsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Condition::Normal),
            "anomaly" => Ok(Condition::Anomaly),
            "unknown" => Ok(Condition::Unknown),
            _ => Err(AsdError::Config(format!("unknown condition {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClipMeta {
    pub path: PathBuf,
    pub machine_type: String,
    pub machine_id: String,
    pub condition: Condition,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanWarning {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanReport {
    pub clips: Vec<ClipMeta>,
    pub warnings: Vec<ScanWarning>,
}

impl ScanReport {
    pub fn machine_types(&self) -> Vec<String> {
        let mut v: Vec<String> = self.clips.iter().map(|c| c.machine_type.clone()).collect();
        v.dedup();
        v
    }

    pub fn select(&self, machine_type: &str, split: Split) -> Vec<&ClipMeta> {
        self.clips
            .iter()
            .filter(|c| c.split == split && c.machine_type.eq_ignore_ascii_case(machine_type))
            .collect()
    }

    /// Sorted machine IDs seen in the training split of `machine_type`.
    pub fn id_vocabulary(&self, machine_type: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .select(machine_type, Split::Train)
            .into_iter()
            .map(|c| c.machine_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

const KNOWN_TYPES: [&str; 6] = ["Fan", "Pump", "Slider", "Valve", "ToyCar", "ToyConveyor"];

/// Maps a directory name to a machine type. The six DCASE types match
/// case-insensitively; any other name is kept verbatim as a synthetic type.
pub fn canonical_machine_type(dir: &str) -> String {
    KNOWN_TYPES
        .iter()
        .find(|t| t.eq_ignore_ascii_case(dir))
        .map(|t| t.to_string())
        .unwrap_or_else(|| dir.to_string())
}

/// Parses `{normal|anomaly}_id_XX_NNNNNNNN.wav` into condition and machine
/// ID. Unlabelled `id_XX_NNNNNNNN.wav` names give `Condition::Unknown`.
pub fn parse_clip_name(name: &str) -> Option<(Condition, String)> {
    let stem = name.strip_suffix(".wav")?;
    let parts: Vec<&str> = stem.split('_').collect();
    let (condition, rest) = match parts.as_slice() {
        ["normal", rest @ ..] => (Condition::Normal, rest),
        ["anomaly", rest @ ..] => (Condition::Anomaly, rest),
        rest => (Condition::Unknown, rest),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    match rest {
        ["id", id, num] if digits(id) && digits(num) => Some((condition, format!("id_{id}"))),
        _ => None,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| AsdError::io(dir, e))? {
        let entry = entry.map_err(|e| AsdError::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Walks `<root>/<machine_type>/{train,test}/*.wav` in lexicographic order.
/// Unparseable names and anomalies in a train split become warnings.
pub fn scan_corpus(root: &Path) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(AsdError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut report = ScanReport::default();
    for type_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let machine_type = canonical_machine_type(&type_dir.file_name().unwrap().to_string_lossy());
        for split in [Split::Train, Split::Test] {
            let dir = type_dir.join(split.as_str());
            if !dir.is_dir() {
                continue;
            }
            for path in sorted_entries(&dir)? {
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                if !name.ends_with(".wav") {
                    continue;
                }
                let warn = |reason: &str| ScanWarning {
                    path: path.clone(),
                    reason: reason.to_string(),
                };
                match parse_clip_name(&name) {
                    None => report.warnings.push(warn("filename does not match {normal|anomaly}_id_XX_NNNNNNNN.wav")),
                    Some((Condition::Anomaly, _)) if split == Split::Train => {
                        report.warnings.push(warn("anomalous clip in a train split"))
                    }
                    Some((condition, machine_id)) => report.clips.push(ClipMeta {
                        path,
                        machine_type: machine_type.clone(),
                        machine_id,
                        condition,
                        split,
                    }),
                }
            }
        }
    }
    for w in &report.warnings {
        log::warn!("skipping {}: {}", w.path.display(), w.reason);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }

    #[test]
    fn parses_dcase_names() {
        assert_eq!(
            parse_clip_name("normal_id_02_00000042.wav"),
            Some((Condition::Normal, "id_02".to_string()))
        );
        assert_eq!(
            parse_clip_name("anomaly_id_06_00000001.wav"),
            Some((Condition::Anomaly, "id_06".to_string()))
        );
        assert_eq!(parse_clip_name("id_01_00000003.wav"), Some((Condition::Unknown, "id_01".to_string())));
        assert_eq!(parse_clip_name("normal_id_xx_00000001.wav"), None);
        assert_eq!(parse_clip_name("normal_02_00000001.wav"), None);
        assert_eq!(parse_clip_name("normal_id_02_00000042.flac"), None);
    }

    #[test]
    fn scan_orders_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch(&root.join("valve/test/anomaly_id_06_00000001.wav"));
        touch(&root.join("fan/train/normal_id_02_00000042.wav"));
        touch(&root.join("fan/train/normal_id_00_00000001.wav"));
        touch(&root.join("fan/train/readme.wav"));
        touch(&root.join("fan/train/anomaly_id_00_00000009.wav"));
        touch(&root.join(".cache/train/normal_id_00_00000001.wav"));
        let report = scan_corpus(root).unwrap();
        let got: Vec<(String, String, Condition, Split)> = report
            .clips
            .iter()
            .map(|c| (c.machine_type.clone(), c.machine_id.clone(), c.condition, c.split))
            .collect();
        assert_eq!(
            got,
            vec![
                ("Fan".into(), "id_00".into(), Condition::Normal, Split::Train),
                ("Fan".into(), "id_02".into(), Condition::Normal, Split::Train),
                ("Valve".into(), "id_06".into(), Condition::Anomaly, Split::Test),
            ]
        );
        assert_eq!(report.warnings.len(), 2);
        assert!(report.clips.iter().all(|c| !(c.split == Split::Train && c.condition == Condition::Anomaly)));
        assert_eq!(report.id_vocabulary("fan"), vec!["id_00", "id_02"]);
    }

    #[test]
    fn empty_directory_scans_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_corpus(dir.path()).unwrap().clips.is_empty());
        assert!(scan_corpus(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn toy_types_keep_dcase_spelling() {
        assert_eq!(canonical_machine_type("ToyCar"), "ToyCar");
        assert_eq!(canonical_machine_type("toyconveyor"), "ToyConveyor");
        assert_eq!(canonical_machine_type("synth"), "synth");
    }
}
