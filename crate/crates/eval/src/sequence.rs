//! Sequence directories: `img/` with numbered frames and a
//! `groundtruth_rect.txt` of 1-based corner-form `x,y,w,h` lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mttrack_core::image::Image;
use mttrack_core::{BBox, Error, Result};

pub const GT_FILE: &str = "groundtruth_rect.txt";
pub const IMG_DIR: &str = "img";
const FRAME_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// A frame on disk or already decoded.
#[derive(Debug, Clone)]
pub enum Frame {
    Path(PathBuf),
    Image(Arc<Image>),
}

impl Frame {
    pub fn load(&self) -> Result<Arc<Image>> {
        match self {
            Frame::Path(p) => Ok(Arc::new(Image::load(p)?)),
            Frame::Image(img) => Ok(Arc::clone(img)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub gt: Vec<BBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Vec<Frame>, gt: Vec<BBox>) -> Result<Self> {
        let name = name.into();
        if frames.len() != gt.len() {
            return Err(Error::Format(format!(
                "sequence {name}: {} frames but {} ground-truth lines",
                frames.len(),
                gt.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::Format(format!("sequence {name} has fewer than 2 frames")));
        }
        Ok(Self {
            name,
            frames,
            gt,
            attributes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Decodes every frame.
    pub fn images(&self) -> Result<Vec<Arc<Image>>> {
        self.frames.iter().map(Frame::load).collect()
    }
}

/// Parses ground-truth or result text: one `x,y,w,h` line per frame,
/// separated by commas, tabs or spaces; blank lines are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: String| Error::Format(format!("line {}: {why}: {line:?}", i + 1));
        let vals = line
            .split([',', '\t', ' '])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let [x, y, w, h] = vals[..] else {
            return Err(bad(format!("expected 4 values, got {}", vals.len())));
        };
        out.push(BBox::from_corner(x - 1.0, y - 1.0, w, h).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

/// Inverse of [`parse_boxes`], comma separated.
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_corner();
        writeln!(s, "{},{},{},{}", x + 1.0, y + 1.0, w, h).expect("write to string");
    }
    s
}

fn frame_number(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !FRAME_EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

/// Loads a sequence directory; frames are ordered by their number.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let gt = parse_boxes(&std::fs::read_to_string(dir.join(GT_FILE))?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(GT_FILE).display())))?;
    let mut frames: Vec<(u64, PathBuf)> = std::fs::read_dir(dir.join(IMG_DIR))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| frame_number(&p).map(|n| (n, p)))
        .collect();
    frames.sort();
    Sequence::new(name, frames.into_iter().map(|(_, p)| Frame::Path(p)).collect(), gt)
}

/// Loads every sequence directory (one containing a ground-truth file) under
/// `root`, sorted by name.
pub fn load_sequences(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GT_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Writes a sequence in directory form with PNG frames named `0001.png`...
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMG_DIR);
    std::fs::create_dir_all(&img_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.load()?.save(&img_dir.join(format!("{:04}.png", i + 1)))?;
    }
    std::fs::write(dir.join(GT_FILE), format_boxes(&seq.gt))?;
    Ok(())
}
