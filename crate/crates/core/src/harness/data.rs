use std::fs;
use std::path::Path;

use super::{HarnessError, Result};
use crate::synth::{load_clip, save_clip, VideoClip};

pub const CLIP_EXTENSION: &str = "clip";

/// Every `*.clip` file in `dir`, sorted by name; ids are the file stems.
pub fn load_clip_dir(dir: &Path) -> Result<Vec<(String, VideoClip)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == CLIP_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::Data(format!("no .{CLIP_EXTENSION} files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let clip = load_clip(p).map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))?;
            Ok((id, clip))
        })
        .collect()
}

pub fn save_clip_dir(dir: &Path, clips: &[(String, VideoClip)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, clip) in clips {
        save_clip(&dir.join(format!("{id}.{CLIP_EXTENSION}")), clip)?;
    }
    Ok(())
}
