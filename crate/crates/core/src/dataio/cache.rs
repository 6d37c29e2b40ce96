use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::corpus::ClipMeta;
use super::wav::read_wav;
use crate::dsp::{read_feature_cache, write_feature_cache, DspConfig, FeatureClip, Featurizer};
use crate::error::{AsdError, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Hex SHA-256 of the front-end configuration.
pub fn config_hash(config: &DspConfig) -> String {
    let json = serde_json::to_string(config).expect("DspConfig serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub computed: usize,
    pub reused: usize,
}

fn relative_key(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Feature cache directory with its manifest (`path,cache_file,config_hash`).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub dir: PathBuf,
    pub hash: String,
    entries: BTreeMap<String, String>,
}

impl FeatureCache {
    /// Opens `dir` for `config`. Manifest rows written under a different
    /// configuration hash are dropped.
    pub fn open(dir: &Path, config: &DspConfig) -> Result<Self> {
        let hash = config_hash(config);
        let mut entries = BTreeMap::new();
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.is_file() {
            let mut reader = csv::Reader::from_path(&manifest)?;
            let mut stale = 0usize;
            for row in reader.records() {
                let row = row?;
                let (path, file, h) = (&row[0], &row[1], &row[2]);
                if h == hash {
                    entries.insert(path.to_string(), file.to_string());
                } else {
                    stale += 1;
                }
            }
            if stale > 0 {
                log::warn!("{stale} cached clips were built with a different front-end configuration; recomputing");
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            hash,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn cached_file(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(|f| self.dir.join(f)).filter(|p| p.is_file())
    }

    /// Cached features for `clip`, or freshly computed ones on a miss.
    pub fn load(&self, root: &Path, clip: &ClipMeta, featurizer: &Featurizer) -> Result<FeatureClip> {
        match self.cached_file(&relative_key(root, &clip.path)) {
            Some(file) => read_feature_cache(&file),
            None => featurizer.featurize(&read_wav(&clip.path)?.samples),
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_NAME);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["path", "cache_file", "config_hash"])?;
        for (k, f) in &self.entries {
            w.write_record([k.as_str(), f.as_str(), self.hash.as_str()])?;
        }
        w.flush().map_err(|e| AsdError::io(&path, e))
    }
}

/// Featurizes every clip not already cached under the current configuration
/// hash and rewrites the manifest. A rerun with an unchanged configuration
/// computes nothing.
pub fn cache_features(root: &Path, clips: &[ClipMeta], featurizer: &Featurizer, dir: &Path) -> Result<CacheReport> {
    fs::create_dir_all(dir).map_err(|e| AsdError::io(dir, e))?;
    let mut cache = FeatureCache::open(dir, &featurizer.config)?;
    let mut report = CacheReport::default();
    let wanted: Vec<String> = clips.iter().map(|c| relative_key(root, &c.path)).collect();
    for (clip, key) in clips.iter().zip(&wanted) {
        if cache.cached_file(key).is_some() {
            report.reused += 1;
            continue;
        }
        let file = Path::new(key).with_extension("asdf").to_string_lossy().to_string();
        let target = dir.join(&file);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| AsdError::io(parent, e))?;
        }
        let features = featurizer.featurize(&read_wav(&clip.path)?.samples)?;
        write_feature_cache(&target, &features)?;
        cache.entries.insert(key.clone(), file);
        report.computed += 1;
    }
    cache.entries.retain(|k, _| wanted.contains(k));
    cache.write_manifest()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{scan_corpus, write_synth_corpus, IdProfile, SynthSpec};

    fn corpus(dir: &Path) -> Vec<ClipMeta> {
        let spec = SynthSpec {
            num_ids: 1,
            profiles: vec![IdProfile::default_for(0)],
            train_clips_per_id: 2,
            test_normal_per_id: 1,
            test_anomaly_per_id: 0,
            duration_s: 0.5,
            ..SynthSpec::default()
        };
        write_synth_corpus(&spec, dir).unwrap();
        scan_corpus(dir).unwrap().clips
    }

    #[test]
    fn rerun_is_a_no_op_and_config_change_recomputes() {
        let corpus_dir = tempfile::tempdir().unwrap();
        let cache_dir = tempfile::tempdir().unwrap();
        let clips = corpus(corpus_dir.path());
        let fz = Featurizer::new(DspConfig::default()).unwrap();
        let first = cache_features(corpus_dir.path(), &clips, &fz, cache_dir.path()).unwrap();
        assert_eq!(first, CacheReport { computed: 3, reused: 0 });
        let second = cache_features(corpus_dir.path(), &clips, &fz, cache_dir.path()).unwrap();
        assert_eq!(second, CacheReport { computed: 0, reused: 3 });

        let manifest = fs::read_to_string(cache_dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest.lines().count(), 1 + clips.len());

        let other = Featurizer::new(DspConfig { n_mels: 64, ..DspConfig::default() }).unwrap();
        let third = cache_features(corpus_dir.path(), &clips, &other, cache_dir.path()).unwrap();
        assert_eq!(third, CacheReport { computed: 3, reused: 0 });
    }

    #[test]
    fn cached_load_matches_direct_featurization() {
        let corpus_dir = tempfile::tempdir().unwrap();
        let cache_dir = tempfile::tempdir().unwrap();
        let clips = corpus(corpus_dir.path());
        let fz = Featurizer::new(DspConfig::default()).unwrap();
        let cold = FeatureCache::open(cache_dir.path(), &fz.config).unwrap();
        assert!(cold.is_empty());
        let direct = cold.load(corpus_dir.path(), &clips[0], &fz).unwrap();
        cache_features(corpus_dir.path(), &clips, &fz, cache_dir.path()).unwrap();
        let warm = FeatureCache::open(cache_dir.path(), &fz.config).unwrap();
        assert_eq!(warm.len(), 3);
        assert_eq!(warm.load(corpus_dir.path(), &clips[0], &fz).unwrap(), direct);
    }

    #[test]
    fn hash_depends_on_config() {
        let a = config_hash(&DspConfig::default());
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&DspConfig::default()));
        assert_ne!(a, config_hash(&DspConfig { hop: 256, ..DspConfig::default() }));
    }
}
