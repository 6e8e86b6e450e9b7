//! On-disk data model: fact sets (JSONL), per-image embedding blocks
//! (`.tlge`), and manifests binding the two.

mod block;
mod facts;
mod manifest;

pub use block::{
    decode_embeddings, encode_embeddings, load_embeddings, read_embedding_header,
    save_embeddings, BlockHeader, EmbeddingBlock, FORMAT_VERSION, MAGIC,
};
pub use facts::{load_facts, load_facts_with_lines, parse_facts, FactSet, Label};
pub use manifest::{
    build_manifest, Dataset, DatasetManifest, ManifestBuild, ManifestEntry, Sample,
    EMBEDDING_EXT,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
