//! End-to-end self-training orchestration: teacher training, pseudolabeling,
//! dataset merging under a multiplier policy, student training, run
//! manifests, and multi-seed sweeps.
//!
//! Stages run sequentially; every artifact is persisted with a content hash
//! so a rerun under the same config is byte-identical.

use std::io;
use std::path::{Path, PathBuf};

pub mod records;
pub mod run;
pub mod stages;

pub use records::{
    canonical_jsonl, hash_jsonl, DatasetManifest, FamilyTag, GenerationMeta, Provenance,
    RecordError, VQARecord, GENERATED_FAMILY,
};
pub use run::{
    collect_run_summaries, run_seltda, sweep, ArtifactRef, CorpusConfig, EvalBundle, EvalConfig,
    PretrainConfig, RunConfig, RunManifest, RunStatus, StageTiming, SweepOutcome,
};
pub use stages::{
    answering_examples, generation_examples, merge_datasets, pseudolabel_pool, train_student,
    train_teacher, AugmentationPolicy, ImageSource, PipelineError, PseudolabelStats,
};

/// Writes bytes to `path` via a temp file in the same directory followed by
/// a rename, so readers never observe a half-written artifact. Parent
/// directories are created as needed.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let mut tmp: PathBuf = path.to_path_buf();
    let mut name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?
        .to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
