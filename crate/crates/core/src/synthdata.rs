//! Procedural articulated figures with ground-truth structure, UV and masks.
//!
//! A figure is a head disk, a torso box, two rotated arm capsules and two leg
//! boxes on a black background. Every body pixel reads its gray value from a
//! pose-invariant canonical texture (64x64 texels) through its UV
//! coordinate, so appearance is anchored in texture space exactly as a
//! texture-mapped avatar would be. Accessories (hat, held item) and stripes
//! are overlays on top of that base.
//!
//! The structure map is the conditioning channel: body silhouette at 1.0 with
//! interior part boundaries at 0.5. Accessories are appearance, not body
//! geometry, and do not enter it.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_6, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry};
use crate::error::{check_range, Error, Result};
use crate::grid::{Grid, Mask};
use crate::rng::{derive_seed, SplitMix64};

pub const GENERATOR_VERSION: &str = "figures-v1";
pub const TEXTURE_RES: usize = 64;
pub const DEFAULT_RESOLUTION: usize = 32;
pub const POSE_LIMIT: f64 = FRAC_PI_3;
/// Rows of hat drawn above the head-top row.
pub const HAT_ROWS: usize = 2;
pub const HAT_VALUE: f32 = 1.0;
pub const ITEM_VALUE: f32 = 0.95;
/// Gray level multiplier on dark stripe bands.
pub const STRIPE_GAIN: f32 = 0.45;
/// UV value stored in containers for background pixels.
pub const UV_BACKGROUND: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub seed: u64,
    pub head_radius: f64,
    pub body_width: f64,
    pub texture_phase: f64,
    pub base_shade: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Attributes {
    pub hat: bool,
    pub stripes: bool,
    pub held_item: bool,
}

impl Attributes {
    pub const NONE: Attributes = Attributes { hat: false, stripes: false, held_item: false };
    pub const NAMES: [&'static str; 3] = ["hat", "stripes", "held_item"];

    pub fn as_array(&self) -> [bool; 3] {
        [self.hat, self.stripes, self.held_item]
    }

    pub fn from_array(a: [bool; 3]) -> Self {
        Self { hat: a[0], stripes: a[1], held_item: a[2] }
    }
}

/// Body parts, in rasterization priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Head,
    LeftArm,
    RightArm,
    Torso,
    LeftLeg,
    RightLeg,
}

impl Part {
    pub const ALL: [Part; 6] = [Part::Head, Part::LeftArm, Part::RightArm, Part::Torso, Part::LeftLeg, Part::RightLeg];

    /// Texel box `(u0, v0, u1, v1)` in the canonical texture.
    fn atlas_box(self) -> (f64, f64, f64, f64) {
        match self {
            Part::Head => (0.0, 0.0, 32.0, 32.0),
            Part::Torso => (32.0, 0.0, 64.0, 32.0),
            Part::LeftArm => (0.0, 32.0, 32.0, 48.0),
            Part::RightArm => (32.0, 32.0, 64.0, 48.0),
            Part::LeftLeg => (0.0, 48.0, 32.0, 64.0),
            Part::RightLeg => (32.0, 48.0, 64.0, 64.0),
        }
    }

    fn shade_offset(self) -> f64 {
        match self {
            Part::Head => 0.15,
            Part::Torso | Part::LeftArm | Part::RightArm => 0.0,
            Part::LeftLeg | Part::RightLeg => -0.1,
        }
    }
}

/// Per-pixel canonical texture coordinates in `[0,1]^2`; `None` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Option<[f32; 2]>>,
}

impl UvMap {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![None; h * w] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<[f32; 2]> {
        self.data[row * self.w + col]
    }

    pub fn defined_mask(&self) -> Mask {
        Mask { h: self.h, w: self.w, data: self.data.iter().map(Option::is_some).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSample {
    pub image: Grid<f32>,
    pub structure: Grid<f32>,
    pub uv: UvMap,
    pub mask: Mask,
    pub pose: f64,
    pub attrs: Attributes,
    pub subject: SubjectSpec,
}

pub fn make_subject(seed: u64) -> SubjectSpec {
    let mut rng = SplitMix64::new(seed);
    SubjectSpec {
        seed,
        head_radius: rng.uniform(0.10, 0.18),
        body_width: rng.uniform(0.15, 0.30),
        texture_phase: rng.uniform(0.0, 2.0 * PI),
        base_shade: rng.uniform(0.3, 0.8),
    }
}

/// Continuous figure geometry in pixel units (x right, y down).
#[derive(Debug, Clone)]
struct Geometry {
    cx: f64,
    head_cy: f64,
    head_r: f64,
    torso_half_w: f64,
    torso_top: f64,
    torso_bottom: f64,
    leg_bottom: f64,
    leg_half_w: f64,
    leg_offset: f64,
    arm_len: f64,
    arm_half_t: f64,
    left_shoulder: (f64, f64),
    right_shoulder: (f64, f64),
    left_dir: (f64, f64),
    right_dir: (f64, f64),
    item_half: f64,
}

impl Geometry {
    fn new(subject: &SubjectSpec, pose: f64, res: usize) -> Self {
        let r = res as f64;
        let cx = r / 2.0;
        let head_cy = 0.28 * r;
        let head_r = subject.head_radius * r;
        let torso_half_w = subject.body_width * r / 2.0;
        let torso_top = head_cy + 0.85 * head_r;
        let shoulder_y = torso_top + 0.05 * r;
        let phi_r = FRAC_PI_6 + pose;
        let phi_l = FRAC_PI_6 - pose;
        Self {
            cx,
            head_cy,
            head_r,
            torso_half_w,
            torso_top,
            torso_bottom: 0.68 * r,
            leg_bottom: 0.94 * r,
            leg_half_w: 0.17 * subject.body_width * r,
            leg_offset: 0.3 * subject.body_width * r,
            arm_len: 0.30 * r,
            arm_half_t: 0.035 * r,
            left_shoulder: (cx - torso_half_w, shoulder_y),
            right_shoulder: (cx + torso_half_w, shoulder_y),
            left_dir: (-phi_l.sin(), phi_l.cos()),
            right_dir: (phi_r.sin(), phi_r.cos()),
            item_half: 0.05 * r,
        }
    }

    fn arm_frame(&self, part: Part) -> ((f64, f64), (f64, f64)) {
        match part {
            Part::LeftArm => (self.left_shoulder, self.left_dir),
            _ => (self.right_shoulder, self.right_dir),
        }
    }

    /// Arm-local (along, across) coordinates of a point.
    fn arm_coords(&self, part: Part, x: f64, y: f64) -> (f64, f64) {
        let ((sx, sy), (dx, dy)) = self.arm_frame(part);
        let (px, py) = (x - sx, y - sy);
        (px * dx + py * dy, -px * dy + py * dx)
    }

    fn contains(&self, part: Part, x: f64, y: f64) -> bool {
        match part {
            Part::Head => {
                let (a, b) = (x - self.cx, y - self.head_cy);
                a * a + b * b <= self.head_r * self.head_r
            }
            Part::Torso => {
                (x - self.cx).abs() <= self.torso_half_w && y >= self.torso_top && y <= self.torso_bottom
            }
            Part::LeftArm | Part::RightArm => {
                let (along, across) = self.arm_coords(part, x, y);
                (0.0..=self.arm_len).contains(&along) && across.abs() <= self.arm_half_t
            }
            Part::LeftLeg | Part::RightLeg => {
                let lcx = self.leg_center(part);
                (x - lcx).abs() <= self.leg_half_w && y > self.torso_bottom && y <= self.leg_bottom
            }
        }
    }

    fn leg_center(&self, part: Part) -> f64 {
        if part == Part::LeftLeg {
            self.cx - self.leg_offset
        } else {
            self.cx + self.leg_offset
        }
    }

    /// Part-local coordinates normalized so the body occupies the middle of
    /// `[0,1]^2` and the margins hold the extension band around the part.
    fn local(&self, part: Part, x: f64, y: f64) -> (f64, f64) {
        let (lu, lv) = match part {
            Part::Head => {
                let a = (x - self.cx) / self.head_r;
                let b = (y - self.head_cy) / self.head_r;
                ((a + 2.2) / 4.4, (b + 2.2) / 4.4)
            }
            Part::Torso => {
                let a = (x - self.cx) / self.torso_half_w;
                let b = (y - self.torso_top) / (self.torso_bottom - self.torso_top);
                ((a + 2.0) / 4.0, (b + 0.5) / 2.0)
            }
            Part::LeftArm | Part::RightArm => {
                let (along, across) = self.arm_coords(part, x, y);
                ((along / self.arm_len + 0.5) / 2.0, (across / self.arm_half_t + 4.0) / 8.0)
            }
            Part::LeftLeg | Part::RightLeg => {
                let a = (x - self.leg_center(part)) / self.leg_half_w;
                let b = (y - self.torso_bottom) / (self.leg_bottom - self.torso_bottom);
                ((a + 4.0) / 8.0, (b + 0.5) / 2.0)
            }
        };
        (lu.clamp(0.0, 1.0), lv.clamp(0.0, 1.0))
    }

    fn uv(&self, part: Part, x: f64, y: f64) -> [f32; 2] {
        let (lu, lv) = self.local(part, x, y);
        local_to_uv(part, lu, lv)
    }

    fn in_item(&self, x: f64, y: f64) -> bool {
        let (sx, sy) = self.right_shoulder;
        let (dx, dy) = self.right_dir;
        let reach = self.arm_len + self.item_half;
        let (ix, iy) = (sx + dx * reach, sy + dy * reach);
        (x - ix).abs() <= self.item_half && (y - iy).abs() <= self.item_half
    }
}

/// Maps normalized part-local coordinates into the part's texel box, keeping
/// one texel of gutter so bilinear taps never reach a neighboring box.
fn local_to_uv(part: Part, lu: f64, lv: f64) -> [f32; 2] {
    let (u0, v0, u1, v1) = part.atlas_box();
    let tu = u0 + 1.0 + lu * (u1 - u0 - 3.0);
    let tv = v0 + 1.0 + lv * (v1 - v0 - 3.0);
    let n = TEXTURE_RES as f64;
    [((tu + 0.5) / n) as f32, ((tv + 0.5) / n) as f32]
}

/// Inverse of [`local_to_uv`] for a texel center, clamped to `[0,1]`.
fn texel_local(part: Part, tu: f64, tv: f64) -> (f64, f64) {
    let (u0, v0, u1, v1) = part.atlas_box();
    let lu = (tu - u0 - 1.0) / (u1 - u0 - 3.0);
    let lv = (tv - v0 - 1.0) / (v1 - v0 - 3.0);
    (lu.clamp(0.0, 1.0), lv.clamp(0.0, 1.0))
}

fn part_of_texel(tu: usize, tv: usize) -> Part {
    Part::ALL
        .into_iter()
        .find(|p| {
            let (u0, v0, u1, v1) = p.atlas_box();
            (tu as f64) >= u0 && (tu as f64) < u1 && (tv as f64) >= v0 && (tv as f64) < v1
        })
        .expect("atlas boxes tile the texture")
}

/// The subject's pose-invariant canonical texture, `TEXTURE_RES` squared.
pub fn canonical_texture(subject: &SubjectSpec) -> Grid<f32> {
    let mut tex = Grid::zeros(TEXTURE_RES, TEXTURE_RES);
    for tv in 0..TEXTURE_RES {
        for tu in 0..TEXTURE_RES {
            let part = part_of_texel(tu, tv);
            let (lu, lv) = texel_local(part, tu as f64, tv as f64);
            let wave = match part {
                Part::Head => 0.05 * (2.0 * PI * 2.0 * lv + subject.texture_phase).sin(),
                _ => 0.08 * (2.0 * PI * 3.0 * lu + subject.texture_phase).sin(),
            };
            let v = (subject.base_shade + part.shade_offset() + wave).clamp(0.0, 1.0);
            tex.set(tv, tu, v as f32);
        }
    }
    tex
}

/// Bilinear taps of `uv` on a square texture: four `(texel index, weight)` pairs.
pub fn bilinear_taps(uv: [f32; 2], res: usize) -> [(usize, f64); 4] {
    let n = res as f64;
    let tu = (uv[0] as f64 * n - 0.5).clamp(0.0, n - 1.0);
    let tv = (uv[1] as f64 * n - 0.5).clamp(0.0, n - 1.0);
    let (u0, v0) = (tu.floor().min(n - 2.0), tv.floor().min(n - 2.0));
    let (fu, fv) = (tu - u0, tv - v0);
    let (u0, v0) = (u0 as usize, v0 as usize);
    let idx = |u: usize, v: usize| v * res + u;
    [
        (idx(u0, v0), (1.0 - fu) * (1.0 - fv)),
        (idx(u0 + 1, v0), fu * (1.0 - fv)),
        (idx(u0, v0 + 1), (1.0 - fu) * fv),
        (idx(u0 + 1, v0 + 1), fu * fv),
    ]
}

pub fn bilinear_sample(tex: &Grid<f32>, uv: [f32; 2]) -> f32 {
    bilinear_taps(uv, tex.w).iter().map(|&(i, w)| tex.data[i] as f64 * w).sum::<f64>() as f32
}

fn check_pose(pose: f64) -> Result<()> {
    check_range("pose", pose, -POSE_LIMIT, POSE_LIMIT)
}

/// Per-pixel body-part labels at pixel centers.
fn body_parts(geo: &Geometry, res: usize) -> Vec<Option<Part>> {
    let mut parts = vec![None; res * res];
    for row in 0..res {
        for col in 0..res {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            parts[row * res + col] = Part::ALL.into_iter().find(|&p| geo.contains(p, x, y));
        }
    }
    parts
}

fn head_top_row(parts: &[Option<Part>], res: usize) -> usize {
    (0..res)
        .find(|&row| (0..res).any(|col| parts[row * res + col] == Some(Part::Head)))
        .expect("head is always inside the frame")
}

fn hat_pixels(geo: &Geometry, parts: &[Option<Part>], res: usize) -> Mask {
    let mut head = Mask::empty(res, res);
    for (i, p) in parts.iter().enumerate() {
        head.data[i] = *p == Some(Part::Head);
    }
    let reach = head.dilate(2);
    let top = head_top_row(parts, res);
    let mut hat = Mask::empty(res, res);
    for row in top.saturating_sub(HAT_ROWS)..top {
        for col in 0..res {
            let x = col as f64 + 0.5;
            if (x - geo.cx).abs() <= 0.8 * geo.head_r + 0.5 && reach.get(row, col) {
                hat.set(row, col, true);
            }
        }
    }
    hat
}

pub fn render_figure(subject: &SubjectSpec, pose: f64, attrs: Attributes, res: usize) -> Result<FigureSample> {
    check_pose(pose)?;
    let geo = Geometry::new(subject, pose, res);
    let tex = canonical_texture(subject);
    let parts = body_parts(&geo, res);

    let mut image = Grid::zeros(res, res);
    let mut structure = Grid::zeros(res, res);
    let mut uv = UvMap::empty(res, res);
    let mut mask = Mask::empty(res, res);

    for row in 0..res {
        for col in 0..res {
            let i = row * res + col;
            let Some(part) = parts[i] else { continue };
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let c = geo.uv(part, x, y);
            uv.data[i] = Some(c);
            mask.data[i] = true;
            let mut v = bilinear_sample(&tex, c);
            if attrs.stripes && part == Part::Torso {
                let (_, lv) = geo.local(part, x, y);
                let band = ((lv * 2.0 - 0.5) * 6.0).floor() as i64;
                if band.rem_euclid(2) == 1 {
                    v *= STRIPE_GAIN;
                }
            }
            image.data[i] = v;

            let boundary = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dr, dc)| {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if rr < 0 || cc < 0 || rr as usize >= res || cc as usize >= res {
                    return false;
                }
                matches!(parts[rr as usize * res + cc as usize], Some(q) if q != part)
            });
            structure.data[i] = if boundary { 0.5 } else { 1.0 };
        }
    }

    if attrs.held_item {
        for row in 0..res {
            for col in 0..res {
                let i = row * res + col;
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                if parts[i] != Some(Part::Head) && geo.in_item(x, y) {
                    if uv.data[i].is_none() {
                        uv.data[i] = Some(geo.uv(Part::RightArm, x, y));
                    }
                    mask.data[i] = true;
                    image.data[i] = ITEM_VALUE;
                }
            }
        }
    }

    if attrs.hat {
        let hat = hat_pixels(&geo, &parts, res);
        for (i, &on) in hat.data.iter().enumerate() {
            if on {
                let (row, col) = (i / res, i % res);
                uv.data[i] = Some(geo.uv(Part::Head, col as f64 + 0.5, row as f64 + 0.5));
                mask.data[i] = true;
                image.data[i] = HAT_VALUE;
            }
        }
    }

    for v in image.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(FigureSample { image, structure, uv, mask, pose, attrs, subject: *subject })
}

/// Texture coordinates over the body mask dilated by `dilation` pixels.
///
/// Mask pixels carry the same coordinates as [`render_figure`] with no
/// attributes; band pixels take the extended coordinates of the part owning
/// the nearest body pixel.
pub fn warp_field(subject: &SubjectSpec, pose: f64, dilation: usize, res: usize) -> Result<UvMap> {
    check_pose(pose)?;
    let geo = Geometry::new(subject, pose, res);
    let parts = body_parts(&geo, res);
    let mut body = Mask::empty(res, res);
    for (i, p) in parts.iter().enumerate() {
        body.data[i] = p.is_some();
    }
    let band = body.dilate(dilation);
    let mut uv = UvMap::empty(res, res);
    let d = dilation as isize;
    for row in 0..res {
        for col in 0..res {
            let i = row * res + col;
            if !band.data[i] {
                continue;
            }
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let part = match parts[i] {
                Some(p) => p,
                None => {
                    let mut best: Option<(isize, Part)> = None;
                    for dr in -d..=d {
                        for dc in -d..=d {
                            let (rr, cc) = (row as isize + dr, col as isize + dc);
                            if rr < 0 || cc < 0 || rr as usize >= res || cc as usize >= res {
                                continue;
                            }
                            if let Some(p) = parts[rr as usize * res + cc as usize] {
                                let dist = dr * dr + dc * dc;
                                if best.is_none_or(|(bd, _)| dist < bd) {
                                    best = Some((dist, p));
                                }
                            }
                        }
                    }
                    best.expect("band pixels have a body pixel within the dilation radius").1
                }
            };
            uv.data[i] = Some(geo.uv(part, x, y));
        }
    }
    Ok(uv)
}

/// How an attribute is assigned across a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrMode {
    Off,
    On,
    /// Enumerate both values for every (subject, pose).
    Both,
    /// Independent draw with the given probability.
    Random(f64),
}

impl AttrMode {
    fn choices(self) -> &'static [bool] {
        match self {
            AttrMode::Off => &[false],
            AttrMode::On => &[true],
            AttrMode::Both => &[false, true],
            AttrMode::Random(_) => &[false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub subjects: usize,
    pub poses_per_subject: usize,
    pub hat: AttrMode,
    pub stripes: AttrMode,
    pub held_item: AttrMode,
    pub resolution: usize,
    pub seed: u64,
    /// Selects an independent pose/attribute stream; held-out corpora reuse
    /// the identities of `seed` with fresh poses.
    #[serde(default)]
    pub pose_stream: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            subjects: 10,
            poses_per_subject: 16,
            hat: AttrMode::Both,
            stripes: AttrMode::Off,
            held_item: AttrMode::Off,
            resolution: DEFAULT_RESOLUTION,
            seed: 0,
            pose_stream: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrCounts {
    pub hat: usize,
    pub stripes: usize,
    pub held_item: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator_version: String,
    pub master_seed: u64,
    pub resolution: usize,
    pub texture_resolution: usize,
    pub n_samples: usize,
    pub subjects: Vec<SubjectSpec>,
    pub poses_per_subject: usize,
    pub samples_per_subject: Vec<usize>,
    pub attribute_true_counts: AttrCounts,
    pub config: CorpusConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<FigureSample>,
    /// Subject index of each sample into `manifest.subjects`.
    pub subject_index: Vec<usize>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }

    /// Samples of one subject.
    pub fn subject_samples(&self, subject: usize) -> Vec<&FigureSample> {
        self.samples.iter().zip(&self.subject_index).filter(|(_, &s)| s == subject).map(|(x, _)| x).collect()
    }

    /// Sub-corpus with one subject's samples, keeping only given attributes.
    pub fn filter(&self, keep: impl Fn(usize, &FigureSample) -> bool) -> Corpus {
        let mut samples = Vec::new();
        let mut subject_index = Vec::new();
        for (s, &si) in self.samples.iter().zip(&self.subject_index) {
            if keep(si, s) {
                samples.push(s.clone());
                subject_index.push(si);
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.n_samples = samples.len();
        manifest.samples_per_subject =
            (0..manifest.subjects.len()).map(|k| subject_index.iter().filter(|&&s| s == k).count()).collect();
        manifest.attribute_true_counts = count_attrs(&samples);
        Corpus { samples, subject_index, manifest }
    }
}

fn count_attrs(samples: &[FigureSample]) -> AttrCounts {
    AttrCounts {
        hat: samples.iter().filter(|s| s.attrs.hat).count(),
        stripes: samples.iter().filter(|s| s.attrs.stripes).count(),
        held_item: samples.iter().filter(|s| s.attrs.held_item).count(),
    }
}

/// Subject seeds for a master seed; identities depend only on the master seed.
pub fn subject_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = SplitMix64::new(derive_seed(master, "synthdata/subjects"));
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Draws a pose and rounds it to `f32` so it survives the container exactly.
fn draw_pose(rng: &mut SplitMix64) -> f64 {
    (rng.uniform(-POSE_LIMIT, POSE_LIMIT) as f32 as f64).clamp(-POSE_LIMIT, POSE_LIMIT)
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.resolution < 8 {
        return Err(Error::Invalid(format!("resolution {} is below 8", cfg.resolution)));
    }
    let seeds = subject_seeds(cfg.seed, cfg.subjects);
    let subjects: Vec<SubjectSpec> = seeds.iter().map(|&s| make_subject(s)).collect();
    let mut pose_rng = SplitMix64::new(derive_seed(cfg.seed, "synthdata/poses") ^ cfg.pose_stream.wrapping_mul(0x9E37_79B9));
    let mut attr_rng = SplitMix64::new(derive_seed(cfg.seed, "synthdata/attrs") ^ cfg.pose_stream);

    let mut samples = Vec::new();
    let mut subject_index = Vec::new();
    for (si, subject) in subjects.iter().enumerate() {
        for _ in 0..cfg.poses_per_subject {
            let pose = draw_pose(&mut pose_rng);
            for &hat in cfg.hat.choices() {
                for &stripes in cfg.stripes.choices() {
                    for &held_item in cfg.held_item.choices() {
                        let mut attrs = Attributes { hat, stripes, held_item };
                        if let AttrMode::Random(p) = cfg.hat {
                            attrs.hat = attr_rng.bernoulli(p);
                        }
                        if let AttrMode::Random(p) = cfg.stripes {
                            attrs.stripes = attr_rng.bernoulli(p);
                        }
                        if let AttrMode::Random(p) = cfg.held_item {
                            attrs.held_item = attr_rng.bernoulli(p);
                        }
                        samples.push(render_figure(subject, pose, attrs, cfg.resolution)?);
                        subject_index.push(si);
                    }
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = samples.len();
    let res = cfg.resolution;
    let manifest = CorpusManifest {
        generator_version: GENERATOR_VERSION.into(),
        master_seed: cfg.seed,
        resolution: res,
        texture_resolution: TEXTURE_RES,
        n_samples: n,
        subjects,
        poses_per_subject: cfg.poses_per_subject,
        samples_per_subject: (0..cfg.subjects).map(|k| subject_index.iter().filter(|&&s| s == k).count()).collect(),
        attribute_true_counts: count_attrs(&samples),
        config: cfg.clone(),
        tensors: tensor_entries(n, res),
    };
    Ok(Corpus { samples, subject_index, manifest })
}

fn tensor_entries(n: usize, res: usize) -> Vec<TensorEntry> {
    vec![
        TensorEntry::f32("image", vec![n, res, res]),
        TensorEntry::f32("structure", vec![n, res, res]),
        TensorEntry::f32("uv", vec![n, res, res, 2]),
        TensorEntry::u8("mask", vec![n, res, res]),
        TensorEntry::f32("pose", vec![n]),
        TensorEntry::u8("attrs", vec![n, 3]),
        TensorEntry::f32("subject", vec![n]),
    ]
}

pub fn build_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(cfg)?;
    write_corpus(&corpus, dir)?;
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    container::ensure_dir(dir)?;
    let mut image = Vec::new();
    let mut structure = Vec::new();
    let mut uv = Vec::new();
    let mut mask = Vec::new();
    let mut pose = Vec::new();
    let mut attrs = Vec::new();
    let mut subject = Vec::new();
    for (s, &si) in corpus.samples.iter().zip(&corpus.subject_index) {
        image.extend_from_slice(&s.image.data);
        structure.extend_from_slice(&s.structure.data);
        for c in &s.uv.data {
            let [u, v] = c.unwrap_or([UV_BACKGROUND, UV_BACKGROUND]);
            uv.push(u);
            uv.push(v);
        }
        mask.extend(s.mask.data.iter().map(|&b| b as u8));
        pose.push(s.pose as f32);
        attrs.extend(s.attrs.as_array().iter().map(|&b| b as u8));
        subject.push(si as f32);
    }
    container::write_f32(&dir.join("image.f32"), &image)?;
    container::write_f32(&dir.join("structure.f32"), &structure)?;
    container::write_f32(&dir.join("uv.f32"), &uv)?;
    container::write_u8(&dir.join("mask.u8"), &mask)?;
    container::write_f32(&dir.join("pose.f32"), &pose)?;
    container::write_u8(&dir.join("attrs.u8"), &attrs)?;
    container::write_f32(&dir.join("subject.f32"), &subject)?;
    container::write_json(&dir.join("manifest.json"), &corpus.manifest)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = container::read_json(&dir.join("manifest.json"))?;
    let n = manifest.n_samples;
    let res = manifest.resolution;
    let px = res * res;
    let image = container::read_f32(&dir.join("image.f32"), n * px)?;
    let structure = container::read_f32(&dir.join("structure.f32"), n * px)?;
    let uv = container::read_f32(&dir.join("uv.f32"), n * px * 2)?;
    let mask = container::read_u8(&dir.join("mask.u8"), n * px)?;
    let pose = container::read_f32(&dir.join("pose.f32"), n)?;
    let attrs = container::read_u8(&dir.join("attrs.u8"), n * 3)?;
    let subject = container::read_f32(&dir.join("subject.f32"), n)?;

    let subjects: Vec<SubjectSpec> = manifest.subjects.iter().map(|s| make_subject(s.seed)).collect();
    let mut samples = Vec::with_capacity(n);
    let mut subject_index = Vec::with_capacity(n);
    for k in 0..n {
        let si = subject[k] as usize;
        let spec = *subjects.get(si).ok_or_else(|| Error::Container {
            path: dir.to_path_buf(),
            detail: format!("sample {k} names subject {si} beyond the manifest"),
        })?;
        let sl = k * px..(k + 1) * px;
        samples.push(FigureSample {
            image: Grid::from_vec(res, res, image[sl.clone()].to_vec())?,
            structure: Grid::from_vec(res, res, structure[sl.clone()].to_vec())?,
            uv: UvMap {
                h: res,
                w: res,
                data: (0..px)
                    .map(|p| {
                        let (u, v) = (uv[(k * px + p) * 2], uv[(k * px + p) * 2 + 1]);
                        (u != UV_BACKGROUND).then_some([u, v])
                    })
                    .collect(),
            },
            mask: Mask { h: res, w: res, data: mask[sl].iter().map(|&b| b != 0).collect() },
            pose: pose[k] as f64,
            attrs: Attributes::from_array([attrs[3 * k] != 0, attrs[3 * k + 1] != 0, attrs[3 * k + 2] != 0]),
            subject: spec,
        });
        subject_index.push(si);
    }
    Ok(Corpus { samples, subject_index, manifest })
}
