//! Scalar and label volumes on a regular, possibly anisotropic voxel grid.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Integer coordinates address voxel centers, so the
//! physical position of a voxel is `origin + index * spacing` (millimeters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Background class id.
pub const BACKGROUND: u8 = 0;
/// Right kidney class id.
pub const RIGHT_KIDNEY: u8 = 1;
/// Left kidney class id.
pub const LEFT_KIDNEY: u8 = 2;
/// Number of classes the classifier distinguishes.
pub const NUM_CLASSES: usize = 3;

/// Default CT window in Hounsfield units applied before feature extraction.
pub const DEFAULT_CT_WINDOW: (f64, f64) = (-200.0, 500.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("dimensions must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Geometry(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Geometry { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    pub fn mean_spacing(&self) -> f64 {
        (self.spacing[0] + self.spacing[1] + self.spacing[2]) / 3.0
    }

    /// Physical position of a voxel center in millimeters.
    pub fn physical(&self, p: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + p[0] as f64 * self.spacing[0],
            self.origin[1] + p[1] as f64 * self.spacing[1],
            self.origin[2] + p[2] as f64 * self.spacing[2],
        ]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn ensure_congruent(&self, other: &Geometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what}: dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    CtHu,
    Geodesic,
    Posterior,
    Generic,
}

/// A 3D scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    geometry: Geometry,
    data: Vec<f64>,
    kind: ChannelKind,
}

impl Volume3 {
    pub fn new(geometry: Geometry, data: Vec<f64>, kind: ChannelKind) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geometry.dims,
                geometry.len()
            )));
        }
        Ok(Volume3 { geometry, data, kind })
    }

    pub fn filled(geometry: Geometry, value: f64, kind: ChannelKind) -> Self {
        Volume3 {
            data: vec![value; geometry.len()],
            geometry,
            kind,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn with_kind(mut self, kind: ChannelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn map(&self, kind: ChannelKind, f: impl Fn(f64) -> f64) -> Volume3 {
        Volume3 {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| f(v)).collect(),
            kind,
        }
    }
}

/// Linear window: `clamp((v - lo) / (hi - lo), 0, 1)` per voxel.
pub fn normalize_ct(vol: &Volume3, lo: f64, hi: f64) -> Result<Volume3> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!(
            "CT window requires finite lo < hi, got [{lo}, {hi}]"
        )));
    }
    let width = hi - lo;
    Ok(vol.map(vol.kind(), |v| ((v - lo) / width).clamp(0.0, 1.0)))
}

/// Per-voxel class ids in `{0, 1, 2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "label length {} does not match dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Parameter(format!(
                "label {} at voxel {:?} is not a valid class id",
                labels[pos],
                geometry.coords(pos)
            )));
        }
        Ok(LabelVolume { geometry, labels })
    }

    pub fn background(geometry: Geometry) -> Self {
        LabelVolume {
            labels: vec![BACKGROUND; geometry.len()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geometry.index(x, y, z)]
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }
}

/// Congruent channels feeding the classifier. Channel 0 is always CT.
#[derive(Clone, Debug)]
pub struct ChannelStack {
    channels: Vec<Volume3>,
    names: Vec<String>,
}

impl ChannelStack {
    pub fn new(channels: Vec<Volume3>, names: Vec<String>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Parameter("a channel stack needs at least one channel".into()))?;
        if first.kind() != ChannelKind::CtHu {
            return Err(Error::Parameter(
                "channel 0 of a stack must be the CT intensity channel".into(),
            ));
        }
        if names.len() != channels.len() {
            return Err(Error::Parameter(format!(
                "{} channel names for {} channels",
                names.len(),
                channels.len()
            )));
        }
        for (i, ch) in channels.iter().enumerate().skip(1) {
            ch.geometry()
                .ensure_congruent(first.geometry(), &format!("channel {i} vs channel 0"))?;
        }
        Ok(ChannelStack { channels, names })
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    pub fn channels(&self) -> &[Volume3] {
        &self.channels
    }

    pub fn channel(&self, k: usize) -> &Volume3 {
        &self.channels[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ct(dims: [usize; 3]) -> Volume3 {
        Volume3::filled(Geometry::with_dims(dims).unwrap(), 0.0, ChannelKind::CtHu)
    }

    #[test]
    fn geometry_rejects_degenerate_dims_and_spacing() {
        assert!(Geometry::with_dims([0, 1, 1]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, -2.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn index_and_coords_are_inverse() {
        let g = Geometry::with_dims([3, 4, 5]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn data_length_must_match() {
        let g = Geometry::with_dims([2, 2, 2]).unwrap();
        assert!(Volume3::new(g, vec![0.0; 7], ChannelKind::Generic).is_err());
        assert!(Volume3::new(g, vec![0.0; 8], ChannelKind::Generic).is_ok());
    }

    #[test]
    fn labels_must_be_valid_classes() {
        let g = Geometry::with_dims([2, 1, 1]).unwrap();
        assert!(LabelVolume::new(g, vec![0, 3]).is_err());
        assert!(LabelVolume::new(g, vec![2, 1]).is_ok());
    }

    #[test]
    fn normalize_ct_endpoints_and_midpoint() {
        let g = Geometry::with_dims([3, 1, 1]).unwrap();
        let v = Volume3::new(g, vec![-200.0, 150.0, 500.0], ChannelKind::CtHu).unwrap();
        let n = normalize_ct(&v, -200.0, 500.0).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(n.kind(), ChannelKind::CtHu);
    }

    #[test]
    fn normalize_ct_rejects_inverted_window() {
        let v = ct([1, 1, 1]);
        assert!(matches!(normalize_ct(&v, 1.0, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(normalize_ct(&v, 2.0, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn stack_requires_ct_first() {
        let g = Geometry::with_dims([2, 2, 2]).unwrap();
        let geo = Volume3::filled(g, 0.0, ChannelKind::Geodesic);
        assert!(ChannelStack::new(vec![geo], vec!["g".into()]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_ct_bounded_and_monotone(values in proptest::collection::vec(-3000.0f64..3000.0, 1..64)) {
            let g = Geometry::with_dims([values.len(), 1, 1]).unwrap();
            let v = Volume3::new(g, values.clone(), ChannelKind::CtHu).unwrap();
            let n = normalize_ct(&v, -200.0, 500.0).unwrap();
            for (i, &a) in n.data().iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert_eq!(a, ((values[i] + 200.0) / 700.0).clamp(0.0, 1.0));
                for (j, &b) in n.data().iter().enumerate() {
                    if values[i] <= values[j] {
                        prop_assert!(a <= b);
                    }
                }
            }
        }

        #[test]
        fn normalize_ct_unit_window_is_idempotent(values in proptest::collection::vec(-2.0f64..2.0, 1..32)) {
            let g = Geometry::with_dims([values.len(), 1, 1]).unwrap();
            let v = Volume3::new(g, values, ChannelKind::CtHu).unwrap();
            let once = normalize_ct(&v, 0.0, 1.0).unwrap();
            let twice = normalize_ct(&once, 0.0, 1.0).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn stack_rejects_any_dim_mismatch(
            nx in 2usize..6, ny in 2usize..6, nz in 2usize..6,
            axis in 0usize..3, grow in any::<bool>()
        ) {
            let dims = [nx, ny, nz];
            let mut other = dims;
            other[axis] = if grow { other[axis] + 1 } else { other[axis] - 1 };
            let a = ct(dims);
            let b = Volume3::filled(Geometry::with_dims(other).unwrap(), 0.0, ChannelKind::Geodesic);
            prop_assert!(ChannelStack::new(vec![a, b], vec!["ct".into(), "g".into()]).is_err());
        }
    }
}
