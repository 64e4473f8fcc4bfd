//! Synthetic CT phantoms with known kidney labels.
//!
//! A phantom is an elliptical body of fat with a dense spine, two kidneys
//! (tilted ellipsoids of enhancing parenchyma riddled with fluid and
//! hemorrhagic cysts), and confounders painted underneath them: a polycystic
//! liver, some of whose cysts press against the right kidney, and a spleen near
//! the left one. The truth label is the kidney ellipsoid plus its cysts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{rasterize_polygon, AnnotationDoc, Target};
use crate::error::{Error, Result};
use crate::mhd::{write_label_mhd, write_mhd};
use crate::pipeline::{CaseRecord, Manifest};
use crate::volume::{ChannelKind, Geometry, LabelVolume, Volume3, BACKGROUND};

/// Axis-aligned-in-z ellipsoid, rotated by `angle_deg` in the axial plane.
/// `center` is in voxel coordinates, `radii` in millimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    #[serde(default)]
    pub angle_deg: f64,
}

impl Ellipsoid {
    fn level(&self, g: &Geometry, p: [usize; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|a| (p[a] as f64 - self.center[a]) * g.spacing[a]);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let u = c * d[0] + s * d[1];
        let v = -s * d[0] + c * d[1];
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) + (d[2] / self.radii[2]).powi(2)
    }

    fn contains(&self, g: &Geometry, p: [usize; 3]) -> bool {
        self.level(g, p) <= 1.0
    }

    /// Inclusive voxel bounding box (may extend past the volume).
    fn bounds(&self, g: &Geometry) -> ([i64; 3], [i64; 3]) {
        let r = self.radii[0].max(self.radii[1]);
        let ext = [r, r, self.radii[2]];
        let lo = std::array::from_fn(|a| (self.center[a] - ext[a] / g.spacing[a]).floor() as i64);
        let hi = std::array::from_fn(|a| (self.center[a] + ext[a] / g.spacing[a]).ceil() as i64);
        (lo, hi)
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii[0] * self.radii[1] * self.radii[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub shape: Ellipsoid,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CystSpec {
    pub count: usize,
    /// Radius range in millimeters.
    pub radius_mm: [f64; 2],
    pub fluid_intensity: f64,
    pub hemorrhagic_intensity: [f64; 2],
    /// Probability that a cyst is hemorrhagic rather than fluid.
    pub hemorrhagic_fraction: f64,
    /// Cyst centers lie within this fraction of the kidney radii.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KidneySpec {
    pub shape: Ellipsoid,
    pub intensity: f64,
    pub cysts: CystSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueCysts {
    /// Index into `PhantomSpec::tissues`.
    pub tissue: usize,
    pub cysts: CystSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub air_intensity: f64,
    /// Painted first, in order, each over the previous.
    pub tissues: Vec<Blob>,
    pub right_kidney: KidneySpec,
    pub left_kidney: KidneySpec,
    /// Fluid-filled cysts of the liver, placed against the right kidney.
    pub liver_cysts: CystSpec,
    /// Cysts scattered inside individual tissues.
    #[serde(default)]
    pub tissue_cysts: Vec<TissueCysts>,
    pub noise_sigma: f64,
}

/// A generated case.
#[derive(Clone, Debug)]
pub struct Phantom {
    /// Intensities in HU.
    pub ct: Volume3,
    pub truth: LabelVolume,
    /// `[right, left]` mid-slice outlines.
    pub annotations: [AnnotationDoc; 2],
}

fn sphere(center: [f64; 3], radius: f64) -> Ellipsoid {
    Ellipsoid { center, radii: [radius; 3], angle_deg: 0.0 }
}

fn draw_cysts(rng: &mut ChaCha8Rng, g: &Geometry, around: &Ellipsoid, spec: &CystSpec, outside: bool) -> Vec<Blob> {
    let (s, c) = around.angle_deg.to_radians().sin_cos();
    (0..spec.count)
        .map(|_| {
            let radius = rng.random_range(spec.radius_mm[0]..=spec.radius_mm[1]);
            // Direction on the unit sphere, then a point inside or just outside.
            let (theta, zc): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-1.0..1.0));
            let ring = (1.0 - zc * zc).sqrt();
            let unit = [ring * theta.cos(), ring * theta.sin(), zc];
            let scale = if outside {
                1.0
            } else {
                spec.spread * rng.random::<f64>().cbrt()
            };
            let local = [unit[0] * around.radii[0], unit[1] * around.radii[1], unit[2] * around.radii[2]];
            let mut mm = [c * local[0] - s * local[1], s * local[0] + c * local[1], local[2]];
            if outside {
                // Push the cyst out so it touches the kidney surface.
                let len = (mm[0] * mm[0] + mm[1] * mm[1] + mm[2] * mm[2]).sqrt();
                let grow = (len + radius + 1.0) / len;
                mm = mm.map(|v| v * grow);
            } else {
                mm = mm.map(|v| v * scale);
            }
            let center = std::array::from_fn(|a| around.center[a] + mm[a] / g.spacing[a]);
            let intensity = if !outside && rng.random::<f64>() < spec.hemorrhagic_fraction {
                rng.random_range(spec.hemorrhagic_intensity[0]..=spec.hemorrhagic_intensity[1])
            } else {
                spec.fluid_intensity
            };
            Blob { shape: sphere(center, radius), intensity }
        })
        .collect()
}

fn paint(g: &Geometry, blob: &Blob, mut f: impl FnMut(usize)) {
    let (lo, hi) = blob.shape.bounds(g);
    for z in lo[2].max(0)..=hi[2].min(g.dims[2] as i64 - 1) {
        for y in lo[1].max(0)..=hi[1].min(g.dims[1] as i64 - 1) {
            for x in lo[0].max(0)..=hi[0].min(g.dims[0] as i64 - 1) {
                let p = [x as usize, y as usize, z as usize];
                if blob.shape.contains(g, p) {
                    f(g.index(p[0], p[1], p[2]));
                }
            }
        }
    }
}

fn in_bounds(g: &Geometry, blob: &Blob, what: &str) -> Result<()> {
    let (lo, hi) = blob.shape.bounds(g);
    for a in 0..3 {
        if lo[a] < 0 || hi[a] >= g.dims[a] as i64 {
            return Err(Error::Spec(format!("{what} extends outside the volume along axis {a}")));
        }
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<Geometry> {
        let g = Geometry::new(self.dims, self.spacing, [0.0; 3]).map_err(|e| Error::Spec(e.to_string()))?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (name, k) in [("right kidney", &self.right_kidney), ("left kidney", &self.left_kidney)] {
            if k.shape.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Spec(format!("{name} radii must be positive")));
            }
            in_bounds(&g, &Blob { shape: k.shape.clone(), intensity: 0.0 }, name)?;
        }
        for t in &self.tissue_cysts {
            if t.tissue >= self.tissues.len() {
                return Err(Error::Spec(format!("tissue_cysts refers to missing tissue {}", t.tissue)));
            }
        }
        let all_cysts = [&self.right_kidney.cysts, &self.left_kidney.cysts, &self.liver_cysts];
        for c in all_cysts.into_iter().chain(self.tissue_cysts.iter().map(|t| &t.cysts)) {
            if !(c.radius_mm[0] > 0.0 && c.radius_mm[0] <= c.radius_mm[1]) {
                return Err(Error::Spec("cyst radius range must satisfy 0 < min <= max".into()));
            }
            if !(0.0..=1.0).contains(&c.hemorrhagic_fraction) || !(0.0..=1.0).contains(&c.spread) {
                return Err(Error::Spec("cyst fractions must lie in [0, 1]".into()));
            }
        }
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The same anatomy on a grid `factor` times coarser along every axis.
    /// Sizes in millimeters are kept; voxel centers are remapped.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.dims.iter().any(|&d| d % factor != 0) {
            return Err(Error::Spec(format!("dims {:?} are not divisible by {factor}", self.dims)));
        }
        let f = factor as f64;
        let remap = |e: &Ellipsoid| Ellipsoid {
            center: e.center.map(|c| (c + 0.5) / f - 0.5),
            ..e.clone()
        };
        let mut out = self.clone();
        out.dims = self.dims.map(|d| d / factor);
        out.spacing = self.spacing.map(|s| s * f);
        for t in &mut out.tissues {
            t.shape = remap(&t.shape);
        }
        out.right_kidney.shape = remap(&self.right_kidney.shape);
        out.left_kidney.shape = remap(&self.left_kidney.shape);
        Ok(out)
    }
}

/// Renders a phantom. Identical specs give identical phantoms.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let g = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut hu = vec![spec.air_intensity; g.len()];
    for t in &spec.tissues {
        paint(&g, t, |i| hu[i] = t.intensity);
    }

    let right_cysts = draw_cysts(&mut rng, &g, &spec.right_kidney.shape, &spec.right_kidney.cysts, false);
    let left_cysts = draw_cysts(&mut rng, &g, &spec.left_kidney.shape, &spec.left_kidney.cysts, false);
    for t in &spec.tissue_cysts {
        for c in draw_cysts(&mut rng, &g, &spec.tissues[t.tissue].shape, &t.cysts, false) {
            paint(&g, &c, |i| hu[i] = c.intensity);
        }
    }
    let liver_cysts = draw_cysts(&mut rng, &g, &spec.right_kidney.shape, &spec.liver_cysts, true);
    for c in &liver_cysts {
        paint(&g, c, |i| hu[i] = c.intensity);
    }

    let mut labels = vec![BACKGROUND; g.len()];
    for (target, kidney, cysts) in [
        (Target::Right, &spec.right_kidney, &right_cysts),
        (Target::Left, &spec.left_kidney, &left_cysts),
    ] {
        let class = target.class_id();
        let body = Blob { shape: kidney.shape.clone(), intensity: kidney.intensity };
        for blob in std::iter::once(&body).chain(cysts.iter()) {
            in_bounds(&g, blob, &format!("{target} kidney"))?;
            let mut clash = false;
            paint(&g, blob, |i| {
                if labels[i] != BACKGROUND && labels[i] != class {
                    clash = true;
                }
                labels[i] = class;
                hu[i] = blob.intensity;
            });
            if clash {
                return Err(Error::Spec("the kidneys overlap".into()));
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
        for v in hu.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let truth = LabelVolume::new(g, labels)?;
    let annotations = [
        mid_slice_outline(&truth, Target::Right)?,
        mid_slice_outline(&truth, Target::Left)?,
    ];
    Ok(Phantom {
        ct: Volume3::new(g, hu, ChannelKind::CtHu)?,
        truth,
        annotations,
    })
}

/// Star-shaped outline of the kidney's cross-section on the middle of the
/// slices it occupies, shrunk toward its centroid until the rasterized
/// outline lies inside the true cross-section.
pub fn mid_slice_outline(truth: &LabelVolume, target: Target) -> Result<AnnotationDoc> {
    let g = truth.geometry();
    let [nx, ny, nz] = g.dims;
    let class = target.class_id();
    let occupied: Vec<usize> = (0..nz)
        .filter(|&z| (0..ny).any(|y| (0..nx).any(|x| truth.get(x, y, z) == class)))
        .collect();
    let (Some(&z0), Some(&z1)) = (occupied.first(), occupied.last()) else {
        return Err(Error::Spec(format!("{target} kidney is empty")));
    };
    let z = (z0 + z1) / 2;
    let inside = |x: f64, y: f64| {
        let (xi, yi) = (x.round(), y.round());
        xi >= 0.0 && yi >= 0.0 && (xi as usize) < nx && (yi as usize) < ny && truth.get(xi as usize, yi as usize, z) == class
    };
    let (mut cx, mut cy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..ny {
        for x in 0..nx {
            if truth.get(x, y, z) == class {
                cx += x as f64;
                cy += y as f64;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return Err(Error::Spec(format!("{target} kidney has an empty mid-slice")));
    }
    let (cx, cy) = (cx / n, cy / n);
    const RAYS: usize = 48;
    let radii: Vec<(f64, f64)> = (0..RAYS)
        .map(|k| {
            let (s, c) = (k as f64 * std::f64::consts::TAU / RAYS as f64).sin_cos();
            let mut r = 0.0;
            while inside(cx + (r + 0.25) * c, cy + (r + 0.25) * s) {
                r += 0.25;
            }
            (c, s, r)
        })
        .map(|(c, s, r)| (c * (r + 0.5), s * (r + 0.5)))
        .collect();
    let round = |v: f64| (v * 100.0).round() / 100.0;
    let mut scale = 1.0;
    while scale > 0.2 {
        let polygon: Vec<[f64; 2]> = radii.iter().map(|&(dx, dy)| [round(cx + scale * dx), round(cy + scale * dy)]).collect();
        if let Ok(mask) = rasterize_polygon(&polygon, nx, ny) {
            let count = mask.count();
            if count > 0 && mask.iter_set().all(|(x, y)| truth.get(x, y, z) == class) {
                return Ok(AnnotationDoc { target, slice_z: z as i64, polygon });
            }
        }
        scale -= 0.02;
    }
    Err(Error::Spec(format!("could not fit an outline inside the {target} kidney")))
}

/// The default layout perturbed by `seed`: kidney pose, size and cyst load,
/// liver and spleen placement all vary between phantoms.
pub fn suite_spec(seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut jitter = |span: f64| rng.random_range(-span..=span);
    let cysts = |count: usize| CystSpec {
        count,
        radius_mm: [2.5, 7.0],
        fluid_intensity: 10.0,
        hemorrhagic_intensity: [60.0, 90.0],
        hemorrhagic_fraction: 0.3,
        spread: 0.85,
    };
    let kidney = |cx: f64, angle: f64, j: &mut dyn FnMut(f64) -> f64| KidneySpec {
        shape: Ellipsoid {
            center: [cx + j(2.0), 56.0 + j(3.0), 32.0 + j(2.0)],
            radii: [15.0 + j(1.5), 20.0 + j(2.0), 55.0 + j(5.0)],
            angle_deg: angle + j(10.0),
        },
        intensity: 150.0 + j(30.0),
        cysts: cysts(8 + j(3.0).round() as usize),
    };
    let right_kidney = kidney(26.0, 20.0, &mut jitter);
    let left_kidney = kidney(70.0, -20.0, &mut jitter);
    let liver = Blob {
        shape: Ellipsoid {
            center: [26.0 + jitter(2.0), 26.0 + jitter(2.0), 40.0 + jitter(3.0)],
            radii: [22.0, 16.0, 70.0],
            angle_deg: jitter(15.0),
        },
        intensity: 110.0 + jitter(15.0),
    };
    let spleen = Blob {
        shape: Ellipsoid {
            center: [74.0 + jitter(2.0), 30.0 + jitter(2.0), 38.0 + jitter(3.0)],
            radii: [12.0, 12.0, 40.0],
            angle_deg: jitter(20.0),
        },
        intensity: 110.0 + jitter(10.0),
    };
    let liver_cyst_count = 3 + jitter(1.0).round() as usize;
    PhantomSpec {
        dims: [96, 96, 64],
        spacing: [1.0, 1.0, 2.5],
        seed,
        air_intensity: -1000.0,
        tissues: vec![
            Blob {
                shape: Ellipsoid { center: [47.5, 50.0, 31.5], radii: [46.0, 42.0, 400.0], angle_deg: 0.0 },
                intensity: -90.0,
            },
            Blob {
                shape: Ellipsoid { center: [47.5, 50.0, 31.5], radii: [43.0, 39.0, 400.0], angle_deg: 0.0 },
                intensity: -60.0,
            },
            liver,
            spleen,
            Blob {
                shape: Ellipsoid { center: [48.0, 83.0, 31.5], radii: [7.0, 7.0, 400.0], angle_deg: 0.0 },
                intensity: 450.0,
            },
        ],
        right_kidney,
        left_kidney,
        liver_cysts: CystSpec { radius_mm: [4.0, 8.0], ..cysts(liver_cyst_count) },
        tissue_cysts: vec![TissueCysts { tissue: 2, cysts: cysts(liver_cyst_count + 8) }],
        noise_sigma: 15.0,
    }
}

/// Seeds of the published evaluation suite.
pub const SUITE_SEEDS: std::ops::RangeInclusive<u64> = 1..=12;

pub fn phantom_suite() -> Vec<PhantomSpec> {
    SUITE_SEEDS.map(suite_spec).collect()
}

/// Writes a phantom's CT, truth and outlines into `dir` and returns the
/// manifest record (paths relative to `dir`).
pub fn write_phantom_case(dir: &Path, case_id: &str, phantom: &Phantom) -> Result<CaseRecord> {
    let file = |suffix: &str| format!("{case_id}_{suffix}");
    let record = CaseRecord {
        case_id: case_id.to_string(),
        ct_path: file("ct.mhd"),
        annotation_right: file("right.json"),
        annotation_left: file("left.json"),
        ground_truth_path: Some(file("truth.mhd")),
        prediction_path: None,
    };
    write_mhd(&phantom.ct, dir.join(&record.ct_path))?;
    write_label_mhd(&phantom.truth, dir.join(file("truth.mhd")))?;
    for (doc, name) in phantom.annotations.iter().zip([&record.annotation_right, &record.annotation_left]) {
        let path = dir.join(name);
        std::fs::write(&path, doc.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(record)
}

/// Generates every spec into `dir` (cases `phantom_01`, ...) and writes
/// `dir/manifest.json`.
pub fn write_suite(dir: &Path, specs: &[PhantomSpec]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = format!("phantom_{:02}", i + 1);
            let phantom = generate_phantom(spec).map_err(|e| e.in_case(&id))?;
            write_phantom_case(dir, &id, &phantom)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(dir, records)?;
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::SeedAnnotation;
    use crate::volume::{LEFT_KIDNEY, RIGHT_KIDNEY};

    fn plain_spec() -> PhantomSpec {
        let mut spec = suite_spec(3);
        spec.noise_sigma = 0.0;
        for k in [&mut spec.right_kidney, &mut spec.left_kidney] {
            k.cysts.count = 0;
        }
        spec.liver_cysts.count = 0;
        spec.tissue_cysts.clear();
        spec
    }

    #[test]
    fn clean_kidneys_are_uniform_and_match_ellipsoid_volume() {
        let spec = plain_spec();
        let p = generate_phantom(&spec).unwrap();
        let g = p.ct.geometry();
        let voxel_mm3: f64 = g.spacing.iter().product();
        for (class, kidney) in [(RIGHT_KIDNEY, &spec.right_kidney), (LEFT_KIDNEY, &spec.left_kidney)] {
            for (l, v) in p.truth.labels().iter().zip(p.ct.data()) {
                if *l == class {
                    assert_eq!(*v, kidney.intensity);
                }
            }
            let analytic = kidney.shape.volume_mm3() / voxel_mm3;
            let counted = p.truth.count(class) as f64;
            assert!((counted / analytic - 1.0).abs() < 0.05, "{counted} vs {analytic}");
        }
    }

    #[test]
    fn suite_outlines_fit_inside_truth() {
        for spec in phantom_suite().into_iter().take(4) {
            let p = generate_phantom(&spec).unwrap();
            for doc in &p.annotations {
                let seed = SeedAnnotation::from_doc(doc, p.truth.geometry()).unwrap();
                let class = doc.target.class_id();
                assert!(seed.mask.count() > 20);
                for (x, y) in seed.mask.iter_set() {
                    assert_eq!(p.truth.get(x, y, seed.slice_z), class);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = suite_spec(5);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.ct, b.ct);
        assert_eq!(a.truth, b.truth);
        assert_ne!(suite_spec(5), suite_spec(6));
    }

    #[test]
    fn overlapping_kidneys_are_rejected() {
        let mut spec = plain_spec();
        spec.left_kidney.shape.center = spec.right_kidney.shape.center;
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn out_of_bounds_kidney_is_rejected() {
        let mut spec = plain_spec();
        spec.right_kidney.shape.center[0] = 2.0;
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = suite_spec(9);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(PhantomSpec::from_json(&text).unwrap(), spec);
    }

    #[test]
    fn coarsening_keeps_physical_kidney_size() {
        let fine = generate_phantom(&plain_spec()).unwrap();
        let spec = plain_spec().coarsened(2).unwrap();
        assert_eq!(spec.dims, [48, 48, 32]);
        let coarse = generate_phantom(&spec).unwrap();
        for class in [RIGHT_KIDNEY, LEFT_KIDNEY] {
            let a = fine.truth.count(class) as f64 * 2.5;
            let b = coarse.truth.count(class) as f64 * 2.5 * 8.0;
            assert!((a - b).abs() / a < 0.1, "class {class}: {a} vs {b} mm^3");
        }
        assert!(plain_spec().coarsened(5).is_err());
    }
}
