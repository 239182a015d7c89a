//! Deterministic synthetic multi-object scenes.
//!
//! Each class is a unique (shape, color) pair drawn onto a 64x64 canvas.
//! Scenes come with pixel-accurate visible masks and tight boxes per object.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

pub type ClassId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Star,
    ];

    /// Whether offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d = (dx * dx + dy * dy).sqrt();
        match self {
            ShapeKind::Circle => d <= r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => point_in_polygon(
                dx,
                dy,
                &[(0.0, -r), (0.95 * r, 0.75 * r), (-0.95 * r, 0.75 * r)],
            ),
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
            ShapeKind::Ring => d <= r && d >= 0.5 * r,
            ShapeKind::Star => {
                let pts: Vec<(f64, f64)> = (0..10)
                    .map(|k| {
                        let rad = if k % 2 == 0 { r } else { 0.5 * r };
                        let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                        (rad * a.cos(), rad * a.sin())
                    })
                    .collect();
                point_in_polygon(dx, dy, &pts)
            }
        }
    }
}

fn point_in_polygon(x: f64, y: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// The eight saturated colors, RGB in `[0, 255]`.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [230, 30, 30]),
    ("green", [30, 200, 40]),
    ("blue", [40, 70, 240]),
    ("yellow", [240, 225, 30]),
    ("magenta", [225, 30, 215]),
    ("cyan", [30, 215, 225]),
    ("orange", [255, 140, 15]),
    ("violet", [140, 50, 240]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub class_id: ClassId,
    pub shape: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: usize,
}

impl fmt::Display for ClassDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}/{}", self.class_id, self.shape, PALETTE[self.color].0)
    }
}

/// The default 12-class universe.
///
/// Classes 0-5 are circles and squares in red, green and blue, so telling
/// them apart needs both cues. Classes 6-11 use the other four shapes and
/// the other five colors: an unknown never shares a shape or a color with a
/// known class.
pub fn default_universe() -> Vec<ClassDef> {
    use ShapeKind::*;
    let table = [
        (Circle, 0),
        (Square, 0),
        (Circle, 1),
        (Square, 1),
        (Circle, 2),
        (Square, 2),
        (Triangle, 3),
        (Cross, 4),
        (Ring, 5),
        (Star, 6),
        (Triangle, 7),
        (Cross, 3),
    ];
    table
        .iter()
        .enumerate()
        .map(|(class_id, &(shape, color))| ClassDef {
            class_id,
            shape,
            color,
        })
        .collect()
}

/// Every shape in every palette color, 48 classes. Used for unlabeled
/// generic pretraining scenes, never for recognition.
pub fn full_universe() -> Vec<ClassDef> {
    (0..ShapeKind::ALL.len() * PALETTE.len())
        .map(|i| ClassDef {
            class_id: i,
            shape: ShapeKind::ALL[i % ShapeKind::ALL.len()],
            color: i / ShapeKind::ALL.len(),
        })
        .collect()
}

/// `count` scenes of 1..=`max_objects` objects drawn uniformly from
/// [`full_universe`]. Scenes whose placement fails are skipped.
pub fn generic_scenes(count: usize, max_objects: usize, seed: u64) -> Result<Vec<Scene>> {
    if max_objects == 0 {
        return Err(Error::Invalid("generic scenes need max_objects >= 1".into()));
    }
    let uni = full_universe();
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        if i > 4 * count as u64 + 100 {
            return Err(Error::Placement {
                tries: i as usize,
                constraint: "generic scene budget".into(),
            });
        }
        let k = 1 + (i % max_objects as u64) as usize;
        let objs = (0..k)
            .map(|j| (derive_seed(seed, 5, i * 16 + j as u64) % uni.len() as u64) as ClassId)
            .collect();
        if let Ok(s) = generate_scene(&SceneSpec::new(objs), &uni, derive_seed(seed, 6, i)) {
            out.push(s);
        }
        i += 1;
    }
    Ok(out)
}

/// Checks that (shape, color) pairs are unique and color indices valid.
pub fn validate_universe(classes: &[ClassDef]) -> Result<()> {
    for (i, a) in classes.iter().enumerate() {
        if a.class_id != i {
            return Err(Error::Invalid(format!("class {a} listed at position {i}")));
        }
        if a.color >= PALETTE.len() {
            return Err(Error::Invalid(format!("class {i}: color index {}", a.color)));
        }
        if classes[..i].iter().any(|b| b.shape == a.shape && b.color == a.color) {
            return Err(Error::Invalid(format!("class {a} duplicates an earlier class")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    /// One gray level per scene.
    Solid,
    /// Gray level plus per-pixel uniform noise.
    NoiseTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Class of each object, in drawing order (later objects occlude earlier).
    pub objects: Vec<ClassId>,
    /// Object radius range in pixels.
    pub radius: (f64, f64),
    pub background: Background,
    /// Maximum pairwise mask IoU between placed objects.
    pub max_overlap_iou: f64,
    /// Minimum visible pixels per object.
    pub min_visible: usize,
}

impl SceneSpec {
    pub const MAX_OBJECTS: usize = 4;
    pub const PLACEMENT_TRIES: usize = 100;

    pub fn new(objects: Vec<ClassId>) -> Self {
        Self {
            width: 64,
            height: 64,
            objects,
            radius: (10.0, 15.0),
            background: Background::Solid,
            max_overlap_iou: 0.2,
            min_visible: 40,
        }
    }

    fn validate(&self, universe: &[ClassDef]) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > Self::MAX_OBJECTS {
            return Err(Error::Invalid(format!(
                "scene needs 1..={} objects, got {}",
                Self::MAX_OBJECTS,
                self.objects.len()
            )));
        }
        if let Some(c) = self.objects.iter().find(|&&c| c >= universe.len()) {
            return Err(Error::Invalid(format!("unknown class id {c}")));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && 2.0 * hi < self.width.min(self.height) as f64) {
            return Err(Error::Invalid(format!("radius range {lo}..{hi} does not fit the canvas")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub class_id: ClassId,
    /// Visible pixels after occlusion.
    pub mask: Mask,
    pub bbox: BBox,
}

/// RGB image with per-object annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub pixels: Vec<u8>,
    pub objects: Vec<ObjectAnnotation>,
}

impl Scene {
    /// Sorted distinct class ids.
    pub fn label_set(&self) -> Vec<ClassId> {
        let mut l: Vec<_> = self.objects.iter().map(|o| o.class_id).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn image_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

/// Renders one scene. Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, universe: &[ClassDef], seed: u64) -> Result<Scene> {
    spec.validate(universe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    let gray = rng.random_range(0u8..=50);
    let mut pixels = vec![gray; w * h * 3];
    if spec.background == Background::NoiseTexture {
        for p in pixels.iter_mut() {
            *p = p.saturating_add(rng.random_range(0u8..=30));
        }
    }

    // Full (unoccluded) footprint per placed object.
    let mut footprints: Vec<Mask> = Vec::with_capacity(spec.objects.len());
    for (k, &class_id) in spec.objects.iter().enumerate() {
        let def = universe[class_id];
        let mut placed = None;
        let mut last_violation = String::new();
        for _ in 0..SceneSpec::PLACEMENT_TRIES {
            let r = rng.random_range(spec.radius.0..=spec.radius.1);
            let cx = rng.random_range(r..=(w as f64 - r));
            let cy = rng.random_range(r..=(h as f64 - r));
            let fp = rasterize(def.shape, cx, cy, r, w, h);
            if let Some(i) = footprints
                .iter()
                .position(|other| other.iou(&fp) > spec.max_overlap_iou)
            {
                last_violation = format!(
                    "object {k} overlaps object {i} above IoU {}",
                    spec.max_overlap_iou
                );
                continue;
            }
            // Visibility of every object once this one is drawn on top.
            let mut ok = fp.count() >= spec.min_visible;
            for (i, other) in footprints.iter().enumerate() {
                let visible = visible_after(other, &footprints[i + 1..], Some(&fp));
                if visible < spec.min_visible {
                    ok = false;
                    last_violation = format!(
                        "object {i} would keep {visible} < {} visible pixels",
                        spec.min_visible
                    );
                    break;
                }
            }
            if !ok {
                if last_violation.is_empty() {
                    last_violation = format!("object {k} smaller than {} pixels", spec.min_visible);
                }
                continue;
            }
            placed = Some(fp);
            break;
        }
        match placed {
            Some(fp) => footprints.push(fp),
            None => {
                return Err(Error::Placement {
                    tries: SceneSpec::PLACEMENT_TRIES,
                    constraint: last_violation,
                })
            }
        }
    }

    let mut objects = Vec::with_capacity(footprints.len());
    for (i, fp) in footprints.iter().enumerate() {
        let color = PALETTE[universe[spec.objects[i]].color].1;
        for (idx, _) in fp.bits().iter().enumerate().filter(|(_, b)| **b) {
            pixels[idx * 3..idx * 3 + 3].copy_from_slice(&color);
        }
    }
    for (i, fp) in footprints.iter().enumerate() {
        let mut visible = fp.clone();
        for later in &footprints[i + 1..] {
            for (idx, b) in later.bits().iter().enumerate() {
                if *b {
                    let (x, y) = (idx % w, idx / w);
                    visible.set(x, y, false);
                }
            }
        }
        let bbox = visible.bbox().expect("visibility checked during placement");
        objects.push(ObjectAnnotation {
            class_id: spec.objects[i],
            mask: visible,
            bbox,
        });
    }
    Ok(Scene {
        width: w,
        height: h,
        pixels,
        objects,
    })
}

fn visible_after(mask: &Mask, later: &[Mask], extra: Option<&Mask>) -> usize {
    mask.bits()
        .iter()
        .enumerate()
        .filter(|(idx, b)| {
            **b && !later.iter().chain(extra).any(|l| l.bits()[*idx])
        })
        .count()
}

/// Pixels whose centers fall inside the shape.
pub fn rasterize(shape: ShapeKind, cx: f64, cy: f64, r: f64, w: usize, h: usize) -> Mask {
    let mut m = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if shape.contains(dx, dy, r) {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Mixes a base seed with a stream tag and index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universe_is_valid() {
        let u = default_universe();
        assert_eq!(u.len(), 12);
        validate_universe(&u).unwrap();
        let f = full_universe();
        assert_eq!(f.len(), 48);
        validate_universe(&f).unwrap();
    }

    #[test]
    fn generic_scenes_are_deterministic() {
        let a = generic_scenes(12, 3, 9).unwrap();
        let b = generic_scenes(12, 3, 9).unwrap();
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|s| (1..=3).contains(&s.objects.len())));
        assert!(a.iter().zip(&b).all(|(x, y)| x.pixels == y.pixels));
    }

    #[test]
    fn centered_circle_box() {
        let m = rasterize(ShapeKind::Circle, 32.0, 32.0, 10.0, 64, 64);
        let b = m.bbox().unwrap();
        for (got, want) in [(b.x0, 22), (b.y0, 22), (b.x1, 42), (b.y1, 42)] {
            assert!((i64::from(got) - want).abs() <= 1, "{b:?}");
        }
    }

    #[test]
    fn single_object_scene() {
        let u = default_universe();
        let s = generate_scene(&SceneSpec::new(vec![3]), &u, 7).unwrap();
        assert_eq!(s.objects.len(), 1);
        assert_eq!(s.label_set(), vec![3]);
        assert_eq!(Some(s.objects[0].bbox), s.objects[0].mask.bbox());
    }

    #[test]
    fn same_seed_same_bytes() {
        let u = default_universe();
        let spec = SceneSpec::new(vec![0, 7, 4]);
        let a = generate_scene(&spec, &u, 99).unwrap();
        let b = generate_scene(&spec, &u, 99).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a, b);
    }

    #[test]
    fn crowded_scene_reports_constraint() {
        let u = default_universe();
        let mut spec = SceneSpec::new(vec![0, 1, 2, 3]);
        spec.radius = (28.0, 31.0);
        spec.max_overlap_iou = 0.0;
        match generate_scene(&spec, &u, 1) {
            Err(Error::Placement { tries, constraint }) => {
                assert_eq!(tries, 100);
                assert!(constraint.contains("object"), "{constraint}");
            }
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn masks_meet_minimum_and_overlap_cap() {
        let u = default_universe();
        for seed in 0..50 {
            let spec = SceneSpec::new(vec![seed as usize % 12, (seed as usize + 5) % 12, 9]);
            let s = generate_scene(&spec, &u, seed).unwrap();
            for (i, a) in s.objects.iter().enumerate() {
                assert!(a.mask.count() >= 40);
                for b in &s.objects[i + 1..] {
                    assert!(a.mask.iou(&b.mask) <= 0.2);
                }
            }
        }
    }
}
