//! Corpus ingestion: WAV I/O, DCASE-layout scanning, the synthetic machine
//! generator and the feature cache.

mod cache;
mod corpus;
mod synth;
mod wav;

pub use cache::{cache_features, config_hash, CacheReport, FeatureCache, MANIFEST_NAME};
pub use corpus::{
    canonical_machine_type, parse_clip_name, scan_corpus, ClipMeta, Condition, ScanReport, ScanWarning, Split,
};
pub use synth::{
    clip_seed, synth_clip, synth_clip_with_span, write_synth_corpus, AnomalyKind, IdProfile, SynthSpec,
};
pub use wav::{read_wav, write_wav, AudioClip};
