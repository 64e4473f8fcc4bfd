//! Mid-slice outlines and the seed voxels derived from them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mhd;
use crate::volume::{Geometry, LEFT_KIDNEY, RIGHT_KIDNEY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Right,
    Left,
}

impl Target {
    pub fn class_id(self) -> u8 {
        match self {
            Target::Right => RIGHT_KIDNEY,
            Target::Left => LEFT_KIDNEY,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Right => "right",
            Target::Left => "left",
        }
    }

    pub fn parse(s: &str) -> Option<Target> {
        match s {
            "right" => Some(Target::Right),
            "left" => Some(Target::Left),
            _ => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-disk annotation: `{"target": "right", "slice_z": 31, "polygon": [[x, y], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub target: Target,
    pub slice_z: i64,
    pub polygon: Vec<[f64; 2]>,
}

impl AnnotationDoc {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Annotation(format!("malformed annotation JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("annotation serializes")
    }
}

/// A filled binary mask over one axial slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl SliceMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[x + self.width * y]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection, touching and collinear overlap included.
pub(crate) fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Checks vertex count, finiteness and simplicity of a closed polygon.
pub fn validate_polygon(polygon: &[[f64; 2]]) -> Result<()> {
    let n = polygon.len();
    if n < 3 {
        return Err(Error::Annotation(format!("polygon needs at least 3 vertices, got {n}")));
    }
    if polygon.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Annotation("polygon vertices must be finite".into()));
    }
    let edge = |i: usize| (polygon[i], polygon[(i + 1) % n]);
    for i in 0..n {
        let (a, b) = edge(i);
        if a == b {
            return Err(Error::Annotation(format!("polygon has a zero-length edge at vertex {i}")));
        }
    }
    for i in 0..n {
        let (a, b) = edge(i);
        for j in (i + 1)..n {
            let (c, d) = edge(j);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared endpoint is expected; a fold-back along the same line is not.
                let (shared, other_ij, other_j) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                let folds = orient(other_ij, shared, other_j) == 0.0
                    && (on_segment(shared, other_ij, other_j) || on_segment(shared, other_j, other_ij));
                if folds {
                    return Err(Error::Annotation(format!(
                        "polygon is not simple: edges {i} and {j} overlap"
                    )));
                }
            } else if segments_intersect(a, b, c, d) {
                return Err(Error::Annotation(format!(
                    "polygon is not simple: edges {i} and {j} intersect"
                )));
            }
        }
    }
    Ok(())
}

/// Fills the pixels whose centers lie inside `polygon` under the even-odd rule.
///
/// Pixel `(i, j)` has its center at `(i, j)`. Centers exactly on an edge
/// follow the top-left convention: left and top edges are inside, right and
/// bottom edges are outside.
pub fn rasterize_polygon(polygon: &[[f64; 2]], width: usize, height: usize) -> Result<SliceMask> {
    validate_polygon(polygon)?;
    let n = polygon.len();
    let mut bits = vec![false; width * height];
    let mut crossings = Vec::with_capacity(n);
    for row in 0..height {
        let py = row as f64;
        crossings.clear();
        for i in 0..n {
            let [xi, yi] = polygon[i];
            let [xj, yj] = polygon[(i + 1) % n];
            if (yi > py) != (yj > py) {
                crossings.push(xi + (py - yi) * (xj - xi) / (yj - yi));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            let start = span[0].ceil().max(0.0);
            // Right end is exclusive.
            let end = span[1].ceil().min(width as f64);
            let mut x = start;
            while x < end {
                bits[x as usize + width * row] = true;
                x += 1.0;
            }
        }
    }
    Ok(SliceMask { width, height, bits })
}

/// A validated outline together with its rasterized mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedAnnotation {
    pub target: Target,
    pub slice_z: usize,
    pub polygon: Vec<[f64; 2]>,
    pub mask: SliceMask,
}

impl SeedAnnotation {
    pub fn from_doc(doc: &AnnotationDoc, geometry: &Geometry) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        if doc.slice_z < 0 || doc.slice_z as usize >= nz {
            return Err(Error::Annotation(format!(
                "slice_z {} is outside the volume (0..{nz})",
                doc.slice_z
            )));
        }
        for (i, v) in doc.polygon.iter().enumerate() {
            if v[0] < -1.0 || v[0] > nx as f64 || v[1] < -1.0 || v[1] > ny as f64 {
                return Err(Error::Annotation(format!(
                    "vertex {i} ({}, {}) lies outside the {nx}x{ny} slice",
                    v[0], v[1]
                )));
            }
        }
        let mask = rasterize_polygon(&doc.polygon, nx, ny)?;
        if mask.count() == 0 {
            return Err(Error::Annotation("polygon encloses no pixel centers".into()));
        }
        Ok(SeedAnnotation {
            target: doc.target,
            slice_z: doc.slice_z as usize,
            polygon: doc.polygon.clone(),
            mask,
        })
    }

    pub fn to_doc(&self) -> AnnotationDoc {
        AnnotationDoc {
            target: self.target,
            slice_z: self.slice_z as i64,
            polygon: self.polygon.clone(),
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            target: self.target,
            voxels: self.mask.iter_set().map(|(x, y)| [x, y, self.slice_z]).collect(),
        }
    }
}

/// Seed voxels for one kidney.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub target: Target,
    pub voxels: Vec<[usize; 3]>,
}

impl Seeds {
    /// Inclusive voxel bounding box `(min, max)`.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let first = *self.voxels.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn linear_indices(&self, geometry: &Geometry) -> Vec<usize> {
        self.voxels.iter().map(|&[x, y, z]| geometry.index(x, y, z)).collect()
    }
}

/// Loads seeds from either an annotation JSON or a binary `.mhd` mask.
pub fn load_seeds(path: &Path, target: Target, geometry: &Geometry) -> Result<Seeds> {
    let is_mhd = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mhd"));
    if is_mhd {
        let mask = mhd::read_mhd(path)?;
        mask.geometry().ensure_congruent(geometry, "seed mask vs CT")?;
        let voxels: Vec<[usize; 3]> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| geometry.coords(i))
            .collect();
        if voxels.is_empty() {
            return Err(Error::Annotation(format!("seed mask {} is empty", path.display())));
        }
        return Ok(Seeds { target, voxels });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc = AnnotationDoc::from_json(&bytes)?;
    if doc.target != target {
        return Err(Error::Annotation(format!(
            "{} is annotated as `{}` but was supplied for `{target}`",
            path.display(),
            doc.target
        )));
    }
    Ok(SeedAnnotation::from_doc(&doc, geometry)?.seeds())
}
