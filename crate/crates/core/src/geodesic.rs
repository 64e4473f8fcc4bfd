//! Intensity-weighted geodesic distance on the voxel lattice.
//!
//! The cost of stepping between neighbouring voxels `p` and `q` is
//!
//! ```text
//! sqrt(|pos(q) - pos(p)|^2 + gamma^2 * (I(q) - I(p))^2 * s^2)
//! ```
//!
//! where positions are in millimeters and `s` is the mean voxel spacing, so
//! the intensity term is expressed in millimeter-equivalents. Distances are
//! exact shortest-path lengths over the 6- or 26-connected graph, computed
//! with a binary-heap Dijkstra.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ChannelKind, Geometry, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets in a fixed order.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodesicParams {
    pub gamma: f64,
    pub connectivity: Connectivity,
    /// Distance in millimeters mapped to 1.0 by [`normalize_distance`].
    pub d_cap: f64,
}

impl Default for GeodesicParams {
    fn default() -> Self {
        GeodesicParams {
            gamma: 1.0,
            connectivity: Connectivity::TwentySix,
            d_cap: 300.0,
        }
    }
}

impl GeodesicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.d_cap > 0.0 && self.d_cap.is_finite()) {
            return Err(Error::Parameter(format!("d_cap must be > 0, got {}", self.d_cap)));
        }
        Ok(())
    }
}

/// Cost of one lattice step with squared physical length `step_sq` (mm^2)
/// and intensity change `delta_i`.
#[inline]
pub fn edge_cost(step_sq: f64, delta_i: f64, gamma: f64, mean_spacing: f64) -> f64 {
    let w = gamma * delta_i * mean_spacing;
    (step_sq + w * w).sqrt()
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance; index breaks ties deterministically.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Distances in millimeters from the nearest seed to every voxel.
///
/// `seeds` are linear voxel indices. `intensity` should already be
/// normalized to `[0, 1]` so that `gamma` is scanner independent.
pub fn geodesic_transform(intensity: &Volume3, seeds: &[usize], params: &GeodesicParams) -> Result<Volume3> {
    params.validate()?;
    let geometry = *intensity.geometry();
    if seeds.is_empty() {
        return Err(Error::Parameter("geodesic transform needs at least one seed".into()));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= geometry.len()) {
        return Err(Error::Parameter(format!("seed index {bad} is out of bounds")));
    }
    if intensity.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("intensity volume contains non-finite values".into()));
    }
    let dist = dijkstra(&geometry, intensity.data(), seeds, params);
    Volume3::new(geometry, dist, ChannelKind::Generic)
}

fn dijkstra(geometry: &Geometry, intensity: &[f64], seeds: &[usize], params: &GeodesicParams) -> Vec<f64> {
    let [nx, ny, nz] = geometry.dims;
    let sbar = geometry.mean_spacing();
    let gamma = params.gamma;
    let steps: Vec<([i64; 3], isize, f64)> = params
        .connectivity
        .offsets()
        .into_iter()
        .map(|o| {
            let linear = o[0] as isize + nx as isize * (o[1] as isize + ny as isize * o[2] as isize);
            let sq: f64 = (0..3).map(|a| (o[a] as f64 * geometry.spacing[a]).powi(2)).sum();
            (o, linear, sq)
        })
        .collect();

    let mut dist = vec![f64::INFINITY; geometry.len()];
    let mut done = vec![false; geometry.len()];
    let mut heap = BinaryHeap::with_capacity(seeds.len() * 2);
    for &s in seeds {
        if dist[s] != 0.0 {
            dist[s] = 0.0;
            heap.push(Entry { dist: 0.0, index: s });
        }
    }

    while let Some(Entry { dist: d, index }) = heap.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        let [x, y, z] = geometry.coords(index);
        let (x, y, z) = (x as i64, y as i64, z as i64);
        let here = intensity[index];
        for &(o, linear, sq) in &steps {
            let (qx, qy, qz) = (x + o[0], y + o[1], z + o[2]);
            if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                continue;
            }
            let q = (index as isize + linear) as usize;
            if done[q] {
                continue;
            }
            let candidate = d + edge_cost(sq, intensity[q] - here, gamma, sbar);
            if candidate < dist[q] {
                dist[q] = candidate;
                heap.push(Entry { dist: candidate, index: q });
            }
        }
    }
    dist
}

/// Scales distances by `1 / d_cap` and saturates at 1.
pub fn normalize_distance(d: &Volume3, d_cap: f64) -> Result<Volume3> {
    if !(d_cap > 0.0 && d_cap.is_finite()) {
        return Err(Error::Parameter(format!("d_cap must be > 0, got {d_cap}")));
    }
    if d.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Parameter("distances must be non-negative".into()));
    }
    Ok(d.map(ChannelKind::Geodesic, |v| (v / d_cap).min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(values: &[f64]) -> Volume3 {
        let g = Geometry::with_dims([values.len(), 1, 1]).unwrap();
        Volume3::new(g, values.to_vec(), ChannelKind::CtHu).unwrap()
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn uniform_six_connected_is_l1() {
        let g = Geometry::with_dims([5, 4, 3]).unwrap();
        let vol = Volume3::filled(g, 0.3, ChannelKind::CtHu);
        let seed = g.index(1, 2, 0);
        let params = GeodesicParams { gamma: 7.0, connectivity: Connectivity::Six, d_cap: 1.0 };
        let d = geodesic_transform(&vol, &[seed], &params).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            let l1 = (x as f64 - 1.0).abs() + (y as f64 - 2.0).abs() + z as f64;
            assert_eq!(d.data()[i], l1);
        }
    }

    #[test]
    fn ramp_line_single_path() {
        let vol = line(&[0.0, 0.25, 0.5, 0.75, 1.0]);
        let params = GeodesicParams { gamma: 2.0, connectivity: Connectivity::Six, d_cap: 1.0 };
        let d = geodesic_transform(&vol, &[0], &params).unwrap();
        let expected = 4.0 * 1.25f64.sqrt();
        assert!((d.data()[4] - expected).abs() < 1e-12);
        assert_eq!(d.data()[0], 0.0);
    }

    #[test]
    fn anisotropic_spacing_enters_step_length() {
        let g = Geometry::new([1, 1, 3], [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
        let vol = Volume3::filled(g, 0.0, ChannelKind::CtHu);
        let d = geodesic_transform(&vol, &[0], &GeodesicParams::default()).unwrap();
        assert_eq!(d.data(), &[0.0, 2.5, 5.0]);
    }

    #[test]
    fn empty_seed_set_is_rejected() {
        let vol = line(&[0.0, 1.0]);
        assert!(matches!(
            geodesic_transform(&vol, &[], &GeodesicParams::default()),
            Err(Error::Parameter(_))
        ));
        assert!(geodesic_transform(&vol, &[2], &GeodesicParams::default()).is_err());
        let neg = GeodesicParams { gamma: -1.0, ..Default::default() };
        assert!(geodesic_transform(&vol, &[0], &neg).is_err());
    }

    #[test]
    fn normalize_distance_caps() {
        let d = line(&[0.0, 150.0, 300.0, 600.0]);
        let n = normalize_distance(&d, 300.0).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0, 1.0]);
        assert_eq!(n.kind(), ChannelKind::Geodesic);
        assert!(normalize_distance(&d, 0.0).is_err());
        assert!(normalize_distance(&line(&[-1.0]), 1.0).is_err());
    }

    #[test]
    fn connectivity_serializes_as_integer() {
        let p = GeodesicParams::default();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"connectivity\":26"));
        assert!(serde_json::from_str::<GeodesicParams>(r#"{"connectivity":8}"#).is_err());
    }

    proptest! {
        #[test]
        fn normalize_distance_monotone_below_cap(values in proptest::collection::vec(0.0f64..500.0, 1..40)) {
            let n = normalize_distance(&line(&values), 300.0).unwrap();
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] && values[j] < 300.0 {
                        prop_assert!(n.data()[i] < n.data()[j]);
                    }
                }
            }
        }
    }
}
