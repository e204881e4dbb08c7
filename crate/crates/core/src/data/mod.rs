//! Dataset and model persistence, the synthetic corpus generator, and
//! label error rate scoring.

mod checkpoint;
mod frames;
mod per;
mod synth;
mod text;

pub use checkpoint::{check_compatible, checkpoint_bytes, load_checkpoint, save_checkpoint};
pub use frames::{read_frames, write_frames, FRAMES_MAGIC, FRAMES_VERSION};
pub use per::{edit_distance, per, CorpusPer};
pub use synth::{gen_synthetic, synthesize, SynthConfig, SynthCorpus, SynthUtterance};
pub use text::{
    load_dataset, read_collapse_map, read_labels, read_manifest, read_vocab, write_labels,
    write_manifest, write_vocab, CollapseMap, Manifest, ManifestEntry, Utterance,
};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not valid UTF-8"))
}
