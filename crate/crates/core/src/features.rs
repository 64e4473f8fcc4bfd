//! Two-box features over a channel stack, evaluated in constant time from
//! integral volumes.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ChannelStack, Geometry, Volume3};

/// Summed-volume table with a zero plane on the low side of each axis:
/// `S(i, j, k)` is the sum of all voxels with index `< (i, j, k)`.
#[derive(Clone, Debug)]
pub struct IntegralVolume {
    dims: [usize; 3],
    stride_y: usize,
    stride_z: usize,
    sums: Vec<f64>,
}

impl IntegralVolume {
    pub fn build(vol: &Volume3) -> Self {
        let [nx, ny, nz] = vol.dims();
        let (sx, sy) = (nx + 1, ny + 1);
        let stride_z = sx * sy;
        let mut sums = vec![0.0f64; stride_z * (nz + 1)];
        let data = vol.data();
        // Running sums along x, then y, then z.
        for z in 0..nz {
            for y in 0..ny {
                let mut acc = 0.0;
                let src = nx * (y + ny * z);
                let dst = sx * (y + 1) + stride_z * (z + 1);
                for x in 0..nx {
                    acc += data[src + x];
                    sums[dst + x + 1] = acc;
                }
            }
        }
        for z in 1..=nz {
            for y in 2..=ny {
                for x in 1..=nx {
                    let i = x + sx * y + stride_z * z;
                    sums[i] += sums[i - sx];
                }
            }
        }
        for z in 2..=nz {
            for i in (stride_z * z)..(stride_z * (z + 1)) {
                sums[i] += sums[i - stride_z];
            }
        }
        IntegralVolume {
            dims: [nx, ny, nz],
            stride_y: sx,
            stride_z,
            sums,
        }
    }

    /// Source volume dimensions.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// `S(i, j, k)`, with `i <= nx`, `j <= ny`, `k <= nz`.
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.sums[i + self.stride_y * j + self.stride_z * k]
    }

    /// Sum over the half-open box `lo..hi`.
    #[inline]
    pub fn box_sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let (x0, x1) = (lo[0], hi[0]);
        let (y0, y1) = (self.stride_y * lo[1], self.stride_y * hi[1]);
        let (z0, z1) = (self.stride_z * lo[2], self.stride_z * hi[2]);
        let s = &self.sums;
        s[x1 + y1 + z1] - s[x0 + y1 + z1] - s[x1 + y0 + z1] - s[x1 + y1 + z0] + s[x0 + y0 + z1] + s[x0 + y1 + z0]
            + s[x1 + y0 + z0]
            - s[x0 + y0 + z0]
    }
}

/// Mean over a box of odd `size` centered at `center`, clamped to the volume.
/// An empty intersection yields 0.
#[inline]
pub fn box_mean(iv: &IntegralVolume, center: [i64; 3], size: [u32; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut count = 1usize;
    for a in 0..3 {
        let half = (size[a] / 2) as i64;
        let l = (center[a] - half).max(0);
        let h = (center[a] + half + 1).min(iv.dims[a] as i64);
        if l >= h {
            return 0.0;
        }
        lo[a] = l as usize;
        hi[a] = h as usize;
        count *= (h - l) as usize;
    }
    iv.box_sum(lo, hi) / count as f64
}

/// How the two box means combine into one scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BoxFunction {
    /// `a`
    First = 1,
    /// `b`
    Second = 2,
    /// `a + b`
    Sum = 3,
    /// `a - b`
    Difference = 4,
    /// `|a - b|`
    AbsDifference = 5,
    /// `max(a, b)`
    Max = 6,
}

impl BoxFunction {
    pub const ALL: [BoxFunction; 6] = [
        BoxFunction::First,
        BoxFunction::Second,
        BoxFunction::Sum,
        BoxFunction::Difference,
        BoxFunction::AbsDifference,
        BoxFunction::Max,
    ];

    pub fn from_index(j: i64) -> Result<Self> {
        if (1..=6).contains(&j) {
            Ok(Self::ALL[(j - 1) as usize])
        } else {
            Err(Error::Parameter(format!("box function selector must be in 1..=6, got {j}")))
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BoxFunction::First => a,
            BoxFunction::Second => b,
            BoxFunction::Sum => a + b,
            BoxFunction::Difference => a - b,
            BoxFunction::AbsDifference => (a - b).abs(),
            BoxFunction::Max => a.max(b),
        }
    }
}

impl TryFrom<u8> for BoxFunction {
    type Error = String;

    fn try_from(j: u8) -> std::result::Result<Self, String> {
        BoxFunction::from_index(j as i64).map_err(|e| e.to_string())
    }
}

impl From<BoxFunction> for u8 {
    fn from(f: BoxFunction) -> u8 {
        f.index()
    }
}

/// Two offset boxes, their channels and the combining function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureDescriptor {
    pub offset_a: [i32; 3],
    pub offset_b: [i32; 3],
    pub size_a: [u32; 3],
    pub size_b: [u32; 3],
    pub channel_a: u16,
    pub channel_b: u16,
    pub function: BoxFunction,
}

impl FeatureDescriptor {
    /// Flat `[dax, day, daz, dbx, dby, dbz, xa, ya, za, xb, yb, zb, ka, kb, j]`.
    pub fn to_array(&self) -> [i64; 15] {
        let mut out = [0i64; 15];
        for a in 0..3 {
            out[a] = self.offset_a[a] as i64;
            out[3 + a] = self.offset_b[a] as i64;
            out[6 + a] = self.size_a[a] as i64;
            out[9 + a] = self.size_b[a] as i64;
        }
        out[12] = self.channel_a as i64;
        out[13] = self.channel_b as i64;
        out[14] = self.function.index() as i64;
        out
    }

    pub fn from_array(v: &[i64]) -> Result<Self> {
        if v.len() != 15 {
            return Err(Error::Model(format!("feature array needs 15 entries, got {}", v.len())));
        }
        let offset = |i: usize| -> Result<i32> {
            i32::try_from(v[i]).map_err(|_| Error::Model(format!("offset {} out of range", v[i])))
        };
        let extent = |i: usize| -> Result<u32> {
            let e = v[i];
            if e < 1 || e % 2 == 0 || e > u32::MAX as i64 {
                return Err(Error::Model(format!("box extent must be odd and >= 1, got {e}")));
            }
            Ok(e as u32)
        };
        let channel = |i: usize| -> Result<u16> {
            u16::try_from(v[i]).map_err(|_| Error::Model(format!("channel index {} out of range", v[i])))
        };
        Ok(FeatureDescriptor {
            offset_a: [offset(0)?, offset(1)?, offset(2)?],
            offset_b: [offset(3)?, offset(4)?, offset(5)?],
            size_a: [extent(6)?, extent(7)?, extent(8)?],
            size_b: [extent(9)?, extent(10)?, extent(11)?],
            channel_a: channel(12)?,
            channel_b: channel(13)?,
            function: BoxFunction::from_index(v[14]).map_err(|e| Error::Model(e.to_string()))?,
        })
    }

    pub fn validate(&self, n_channels: usize) -> Result<()> {
        if self.size_a.iter().chain(&self.size_b).any(|&e| e == 0 || e % 2 == 0) {
            return Err(Error::Parameter(format!("box extents must be odd: {self:?}")));
        }
        if self.channel_a as usize >= n_channels || self.channel_b as usize >= n_channels {
            return Err(Error::Parameter(format!(
                "feature references channel {} / {} but the stack has {n_channels}",
                self.channel_a, self.channel_b
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 2] {
        [self.channel_a as usize, self.channel_b as usize]
    }
}

/// Bounds for random feature proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureRanges {
    /// Offsets are uniform in `[-max_offset, max_offset]` voxels per axis.
    pub max_offset: u32,
    /// Extents are uniform over the odd numbers `1..=max_extent`.
    pub max_extent: u32,
}

impl Default for FeatureRanges {
    fn default() -> Self {
        FeatureRanges {
            max_offset: 20,
            max_extent: 15,
        }
    }
}

impl FeatureRanges {
    pub fn validate(&self) -> Result<()> {
        if self.max_extent == 0 || self.max_extent.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "max_extent must be odd and >= 1, got {}",
                self.max_extent
            )));
        }
        if self.max_offset > i32::MAX as u32 {
            return Err(Error::Parameter("max_offset too large".into()));
        }
        Ok(())
    }
}

/// Draws one feature uniformly within `ranges`. The draw order is fixed, so
/// a given rng state always yields the same descriptor.
pub fn sample_feature<R: Rng + ?Sized>(rng: &mut R, n_channels: usize, ranges: &FeatureRanges) -> FeatureDescriptor {
    let m = ranges.max_offset as i32;
    let half_steps = ranges.max_extent / 2;
    let mut offset = || [rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m)];
    let offset_a = offset();
    let offset_b = offset();
    let mut extent = || {
        [
            2 * rng.random_range(0..=half_steps) + 1,
            2 * rng.random_range(0..=half_steps) + 1,
            2 * rng.random_range(0..=half_steps) + 1,
        ]
    };
    let size_a = extent();
    let size_b = extent();
    let channel_a = rng.random_range(0..n_channels) as u16;
    let channel_b = rng.random_range(0..n_channels) as u16;
    let function = BoxFunction::ALL[rng.random_range(0..6)];
    FeatureDescriptor {
        offset_a,
        offset_b,
        size_a,
        size_b,
        channel_a,
        channel_b,
        function,
    }
}

#[inline]
fn shifted(p: [usize; 3], d: [i32; 3]) -> [i64; 3] {
    [p[0] as i64 + d[0] as i64, p[1] as i64 + d[1] as i64, p[2] as i64 + d[2] as i64]
}

#[inline]
fn eval_unchecked(ivs: &[IntegralVolume], p: [usize; 3], f: &FeatureDescriptor) -> f64 {
    let a = box_mean(&ivs[f.channel_a as usize], shifted(p, f.offset_a), f.size_a);
    let b = box_mean(&ivs[f.channel_b as usize], shifted(p, f.offset_b), f.size_b);
    f.function.apply(a, b)
}

/// Evaluates `f` at voxel `p` of `stack`, given one integral volume per channel.
pub fn eval_feature(stack: &ChannelStack, ivs: &[IntegralVolume], p: [usize; 3], f: &FeatureDescriptor) -> Result<f64> {
    if ivs.len() != stack.len() {
        return Err(Error::Parameter(format!(
            "{} integral volumes for {} channels",
            ivs.len(),
            stack.len()
        )));
    }
    f.validate(stack.len())?;
    Ok(eval_unchecked(ivs, p, f))
}

/// A channel stack reduced to what feature evaluation needs: geometry,
/// channel names and one integral volume per channel.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    geometry: Geometry,
    names: Vec<String>,
    integrals: Vec<IntegralVolume>,
}

impl FeatureStack {
    pub fn new(stack: &ChannelStack) -> Self {
        let integrals = stack.channels().par_iter().map(IntegralVolume::build).collect();
        FeatureStack {
            geometry: *stack.geometry(),
            names: stack.names().to_vec(),
            integrals,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn integrals(&self) -> &[IntegralVolume] {
        &self.integrals
    }

    pub fn n_channels(&self) -> usize {
        self.integrals.len()
    }

    /// The stack restricted to its first `n` channels.
    pub fn truncated(&self, n: usize) -> Result<FeatureStack> {
        if n == 0 || n > self.integrals.len() {
            return Err(Error::Parameter(format!(
                "cannot keep {n} of {} channels",
                self.integrals.len()
            )));
        }
        Ok(FeatureStack {
            geometry: self.geometry,
            names: self.names[..n].to_vec(),
            integrals: self.integrals[..n].to_vec(),
        })
    }

    /// `f` must have been validated against this stack's channel count.
    #[inline]
    pub fn eval(&self, p: [usize; 3], f: &FeatureDescriptor) -> f64 {
        eval_unchecked(&self.integrals, p, f)
    }
}
