//! On-disk sequence layout: `000001.ppm` frames plus `groundtruth.txt`
//! (one `x,y,w,h` line per frame, top-left pixel coordinates) and an
//! optional `occlusions.txt` sidecar with `frame,coverage` lines.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::TrackRow;

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
    /// Coverage per frame from the occlusion sidecar (0.0 when absent).
    pub occlusion: Vec<f64>,
}

pub fn frame_file_name(index_one_based: usize) -> String {
    format!("{index_one_based:06}.ppm")
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let boxes = read_groundtruth(&dir.join("groundtruth.txt"))?;
    let mut frames = Vec::with_capacity(boxes.len());
    for i in 1..=boxes.len() {
        let path = dir.join(frame_file_name(i));
        if !path.exists() {
            return Err(Error::format(format!(
                "sequence {name}: groundtruth has {} lines but frame {} is missing",
                boxes.len(),
                path.display()
            )));
        }
        frames.push(Image::read_ppm(&path)?);
    }
    let mut occlusion = vec![0.0; frames.len()];
    let occ_path = dir.join("occlusions.txt");
    if occ_path.exists() {
        for line in std::fs::read_to_string(&occ_path)?.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (f, c) = line
                .split_once(',')
                .ok_or_else(|| Error::format(format!("bad occlusion line '{line}'")))?;
            let fi: usize = f
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("bad occlusion frame '{f}'")))?;
            let cov: f64 = c
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("bad occlusion coverage '{c}'")))?;
            if fi >= 1 && fi <= occlusion.len() {
                occlusion[fi - 1] = cov;
            }
        }
    }
    Ok(LoadedSequence {
        name,
        frames,
        boxes,
        occlusion,
    })
}

/// Directories under `root` that contain a `groundtruth.txt`.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("groundtruth.txt").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(format!(
            "no sequences (directories with groundtruth.txt) under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::format(format!(
                "{}:{}: expected x,y,w,h got '{line}'",
                path.display(),
                i + 1
            )));
        }
        let vals: Vec<f64> = parts
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad number '{p}' in groundtruth")))
            })
            .collect::<Result<_>>()?;
        boxes.push(BBox::from_tlwh(vals[0], vals[1], vals[2], vals[3])?);
    }
    if boxes.is_empty() {
        return Err(Error::format(format!("{} holds no boxes", path.display())));
    }
    Ok(boxes)
}

pub fn write_groundtruth(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        let (x, y, w, h) = b.tlwh();
        out.push_str(&format!("{x:.2},{y:.2},{w:.2},{h:.2}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Result rows: `frame_index,x,y,w,h,Q` with top-left coordinates.
pub fn write_results(path: &Path, rows: &[TrackRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for row in rows {
        let (x, y, w, h) = row.bbox.tlwh();
        writeln!(
            file,
            "{},{x:.4},{y:.4},{w:.4},{h:.4},{:.6}",
            row.frame, row.quality
        )?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<TrackRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(Error::format(format!(
                "{}:{}: expected frame,x,y,w,h,Q got '{line}'",
                path.display(),
                i + 1
            )));
        }
        let frame: usize = parts[0]
            .parse()
            .map_err(|_| Error::format(format!("bad frame index '{}'", parts[0])))?;
        let nums: Vec<f64> = parts[1..]
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad number '{p}' in results")))
            })
            .collect::<Result<_>>()?;
        rows.push(TrackRow {
            frame,
            bbox: BBox::from_tlwh(nums[0], nums[1], nums[2], nums[3])?,
            quality: nums[4],
        });
    }
    Ok(rows)
}
