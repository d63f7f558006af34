//! Keypoint heatmaps: normalization, center location, Gaussian refinement
//! and merging into the supervision target for the spatial attention mask.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Default spread control for refined heatmaps (both axes).
pub const DEFAULT_GAMMA: f64 = 14.0;

/// Row-major 2-D grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape {
                op: "grid",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Three regions tracked per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Face = 0,
    LeftHand = 1,
    RightHand = 2,
}

/// Per-frame pixel centers of face, left hand and right hand. `x` indexes
/// rows (`0..height`), `y` indexes columns (`0..width`).
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTrack {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<[(f64, f64); 3]>,
}

impl KeypointTrack {
    pub fn new(height: usize, width: usize, frames: Vec<[(f64, f64); 3]>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::invalid(format!("frame size {height}x{width} too small")));
        }
        let (hmax, wmax) = ((height - 1) as f64, (width - 1) as f64);
        for (t, f) in frames.iter().enumerate() {
            for &(x, y) in f {
                if !(0.0..=hmax).contains(&x) || !(0.0..=wmax).contains(&y) {
                    return Err(Error::invalid(format!(
                        "keypoint ({x}, {y}) at frame {t} outside {height}x{width}"
                    )));
                }
            }
        }
        Ok(KeypointTrack {
            height,
            width,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keeps only the listed frames, in the given order.
    pub fn select(&self, keep: &[usize]) -> Self {
        KeypointTrack {
            height: self.height,
            width: self.width,
            frames: keep.iter().map(|&i| self.frames[i]).collect(),
        }
    }
}

/// Gaussian-like target around one center.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedHeatmap {
    pub grid: Grid,
    pub gamma_x: f64,
    pub gamma_y: f64,
}

/// Min-max normalization to `[0, 1]`.
pub fn normalize_heatmap(raw: &Grid) -> Result<Grid> {
    let lo = raw.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateHeatmap);
    }
    let span = hi - lo;
    let data = raw.data.iter().map(|v| (v - lo) / span).collect();
    Grid::new(raw.rows, raw.cols, data)
}

/// Argmax position normalized by `(rows-1, cols-1)`; ties go to the first
/// cell in row-major order.
pub fn locate_center(h: &Grid) -> Result<(f64, f64)> {
    if h.rows < 2 || h.cols < 2 {
        return Err(Error::invalid(format!(
            "heatmap {}x{} too small to locate a center",
            h.rows, h.cols
        )));
    }
    let (best, _) = h
        .data
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let (r, c) = (best / h.cols, best % h.cols);
    Ok((r as f64 / (h.rows - 1) as f64, c as f64 / (h.cols - 1) as f64))
}

/// Gaussian bump on a `rows×cols` grid centered at the normalized `center`,
/// with per-axis spread `rows/gamma_x` and `cols/gamma_y` cells.
pub fn refine_heatmap(
    center: (f64, f64),
    rows: usize,
    cols: usize,
    gamma_x: f64,
    gamma_y: f64,
) -> Result<RefinedHeatmap> {
    if rows < 2 || cols < 2 {
        return Err(Error::invalid(format!("target grid {rows}x{cols} too small")));
    }
    if !(gamma_x > 0.0 && gamma_y > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    let cx = center.0 * (rows - 1) as f64;
    let cy = center.1 * (cols - 1) as f64;
    let sx = rows as f64 / gamma_x;
    let sy = cols as f64 / gamma_y;
    let mut data = Vec::with_capacity(rows * cols);
    for a in 0..rows {
        for b in 0..cols {
            let dx = (a as f64 - cx) / sx;
            let dy = (b as f64 - cy) / sy;
            data.push((-0.5 * (dx * dx + dy * dy)).exp());
        }
    }
    Ok(RefinedHeatmap {
        grid: Grid::new(rows, cols, data)?,
        gamma_x,
        gamma_y,
    })
}

/// Elementwise maximum over any number of same-shaped grids.
pub fn merge_heatmaps(grids: &[&Grid]) -> Result<Grid> {
    let first = grids.first().ok_or_else(|| Error::invalid("merge of no heatmaps"))?;
    let mut out = (*first).clone();
    for g in &grids[1..] {
        if (g.rows, g.cols) != (out.rows, out.cols) {
            return Err(Error::Shape {
                op: "merge_heatmaps",
                lhs: vec![out.rows, out.cols],
                rhs: vec![g.rows, g.cols],
            });
        }
        out.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a = a.max(b));
    }
    Ok(out)
}

/// Merged refined target for frame `t`, built directly from known centers.
pub fn keypoints_to_target(
    track: &KeypointTrack,
    t: usize,
    rows: usize,
    cols: usize,
    gamma_x: f64,
    gamma_y: f64,
) -> Result<Grid> {
    let frame = track
        .frames
        .get(t)
        .ok_or_else(|| Error::invalid(format!("frame {t} out of range")))?;
    let (hn, wn) = ((track.height - 1) as f64, (track.width - 1) as f64);
    let parts = frame
        .iter()
        .map(|&(x, y)| refine_heatmap((x / hn, y / wn), rows, cols, gamma_x, gamma_y))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Grid> = parts.iter().map(|p| &p.grid).collect();
    merge_heatmaps(&refs)
}

/// Targets for every frame of a track, concatenated as `T×rows×cols`.
pub fn track_targets(track: &KeypointTrack, rows: usize, cols: usize, gamma: (f64, f64)) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(track.len() * rows * cols);
    for t in 0..track.len() {
        out.extend(keypoints_to_target(track, t, rows, cols, gamma.0, gamma.1)?.data);
    }
    Ok(out)
}

const CSV_HEADER: &str = "frame_index,face_x,face_y,lh_x,lh_y,rh_x,rh_y";

pub fn keypoints_to_csv(track: &KeypointTrack) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (t, f) in track.frames.iter().enumerate() {
        let _ = write!(s, "{t}");
        for (x, y) in f {
            let _ = write!(s, ",{x},{y}");
        }
        s.push('\n');
    }
    s
}

pub fn keypoints_from_csv(text: &str, height: usize, width: usize, path: &Path) -> Result<KeypointTrack> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::format(path, "missing keypoint CSV header")),
    }
    let mut frames = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 7 {
            return Err(Error::format(path, format!("line {}: expected 7 columns", n + 2)));
        }
        let idx: usize = cols[0]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad frame index", n + 2)))?;
        if idx != frames.len() {
            return Err(Error::format(path, format!("line {}: frame index {idx} out of order", n + 2)));
        }
        let mut v = [0.0; 6];
        for (slot, c) in v.iter_mut().zip(&cols[1..]) {
            *slot = c
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number {c:?}", n + 2)))?;
        }
        frames.push([(v[0], v[1]), (v[2], v[3]), (v[4], v[5])]);
    }
    KeypointTrack::new(height, width, frames).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_keypoints(path: &Path, track: &KeypointTrack) -> Result<()> {
    std::fs::write(path, keypoints_to_csv(track)).map_err(|e| Error::io(path, e))
}

pub fn read_keypoints(path: &Path, height: usize, width: usize) -> Result<KeypointTrack> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    keypoints_from_csv(&text, height, width, path)
}
