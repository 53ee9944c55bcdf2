//! Parameter checkpoints: a directory of FLT1 files plus a text manifest.
//!
//! ```text
//! kind fla
//! channels 4
//! param fla.linear_w.weight fla.linear_w.weight.flt1
//! param fla.gamma fla.gamma.flt1
//! ```
//!
//! Kinds with a spatial branch also carry a `reduction <r>` line. Lines
//! starting with `#` are comments.

use std::collections::BTreeMap;
use std::path::Path;

use super::{BlockKind, BlockParams};
use crate::error::{Error, Result};
use crate::tensor::{read_file, write_file, DType, Rng};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &BlockParams, dtype: DType) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "# non-local block checkpoint\nkind {}\nchannels {}\n",
        params.kind(),
        params.channels()
    );
    if let Some(r) = params.reduction() {
        manifest.push_str(&format!("reduction {r}\n"));
    }
    for (name, tensor) in params.named_tensors()? {
        let file = format!("{name}.flt1");
        write_file(dir.join(&file), &tensor, dtype)?;
        manifest.push_str(&format!("param {name} {file}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<BlockParams> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;

    let mut kind = None;
    let mut channels = None;
    let mut reduction = None;
    let mut files = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Checkpoint(format!("manifest line {}: cannot parse `{line}`", lineno + 1));
        match fields.as_slice() {
            ["kind", k] => kind = Some(k.parse::<BlockKind>()?),
            ["channels", c] => channels = Some(c.parse::<usize>().map_err(|_| bad())?),
            ["reduction", r] => reduction = Some(r.parse::<usize>().map_err(|_| bad())?),
            ["param", name, file] => {
                if files.insert(name.to_string(), file.to_string()).is_some() {
                    return Err(Error::Checkpoint(format!("parameter `{name}` listed twice")));
                }
            }
            _ => return Err(bad()),
        }
    }
    let kind = kind.ok_or_else(|| Error::Checkpoint("manifest has no kind line".into()))?;
    let channels = channels.ok_or_else(|| Error::Checkpoint("manifest has no channels line".into()))?;
    if kind.uses_spatial_projections() && reduction.is_none() {
        return Err(Error::Checkpoint(format!("{kind} manifest needs a reduction line")));
    }
    let template = BlockParams::init(kind, channels, reduction.unwrap_or(1), &mut Rng::new(0))?;

    let mut tensors = Vec::new();
    for (name, _) in template.named_tensors()? {
        let file = files
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing parameter `{name}`")))?;
        tensors.push(read_file(dir.join(file))?.0);
    }
    if let Some(extra) = files.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter `{extra}` for {kind}")));
    }
    template.with_tensors(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_kind() {
        let mut rng = Rng::new(4);
        for kind in BlockKind::ALL {
            let dir = tempfile::tempdir().unwrap();
            let p = BlockParams::random(kind, 4, 2, &mut rng).unwrap();
            save_checkpoint(dir.path(), &p, DType::F64).unwrap();
            assert_eq!(load_checkpoint(dir.path()).unwrap(), p);
        }
    }

    #[test]
    fn manifest_names_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = BlockParams::init(BlockKind::Fla, 2, 1, &mut Rng::new(0)).unwrap();
        save_checkpoint(dir.path(), &p, DType::F32).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("kind fla\n"));
        assert!(text.contains("param fla.linear_w.weight fla.linear_w.weight.flt1\n"));
        assert!(text.contains("param fla.gamma fla.gamma.flt1\n"));
    }

    #[test]
    fn rejects_incomplete_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let p = BlockParams::init(BlockKind::SpatialNl, 4, 2, &mut Rng::new(0)).unwrap();
        save_checkpoint(dir.path(), &p, DType::F64).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();

        std::fs::write(&path, text.replace("reduction 2\n", "")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());

        let missing: String = text.lines().filter(|l| !l.contains("spatial_nl.gamma")).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, missing).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());

        std::fs::write(&path, format!("{text}param bogus bogus.flt1\n")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());

        std::fs::write(&path, format!("{text}garbage\n")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
