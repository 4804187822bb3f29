//! Synthetic tile corpus: soft-gradient backgrounds, Poisson-scattered
//! elliptical cells with class-specific density, size and orientation,
//! and a speckle of full-range debris pixels so per-class color
//! histograms have support everywhere. Two palette families stand in
//! for two staining protocols; classes within a family share its hues
//! and differ in texture statistics plus a small shade offset.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRow, Split};
use crate::rng::{derive_rng, mix64};
use crate::tile::ImageTile;

const TILE_STREAM: u64 = 0x746c;
const LESION_STREAM: u64 = 0x6c73;

/// Fraction of pixels replaced by uniform-random debris. Keeps every
/// histogram bin occupied, which the color transfer tables rely on.
const DEBRIS_FRACTION: f64 = 0.012;

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// One color stratum: a flat intensity band per channel. A pixel (or
/// cell) draws a single depth u in [0, 1] shared by all channels, so
/// colors run along the segment lo..lo+width. Flat bands keep every
/// histogram bin thin, which histogram-matching transfer quality
/// depends on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shade {
    pub lo: [f64; 3],
    pub width: f64,
    /// Per-channel Gaussian softening on top of the band.
    pub jitter: f64,
}

impl Shade {
    fn offset(mut self, d: [f64; 3]) -> Shade {
        for c in 0..3 {
            self.lo[c] += d[c];
        }
        self
    }

    fn color(&self, u: f64, noise: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.lo[c] + self.width * u + self.jitter * noise[c];
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub background: Shade,
    pub cytoplasm: Shade,
    pub nuclei: Shade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub group: usize,
    /// Expected cell count on a 64x64 tile; scaled by area for other sides.
    pub cell_density: f64,
    /// Preferred cell orientation in radians.
    pub orientation_angle: f64,
    /// 0 = isotropic, 1 = fully aligned.
    pub orientation_strength: f64,
    /// Base semi-major axis in pixels.
    pub cell_scale: f64,
    /// Sign with which each channel follows the shared background
    /// stain depth: negative channels deepen where positive ones
    /// lighten. Flipping a sign leaves every per-channel histogram
    /// untouched but changes the joint color structure, a cue that
    /// survives per-channel histogram matching and affine jitter.
    pub depth_profile: [f64; 3],
    pub palette: Palette,
}

/// Shared band layout: nuclei, cytoplasm and background tile the
/// intensity axis adjacently with widths proportional to the pixel
/// mass each stratum contributes, so the aggregate channel histogram
/// is near uniform. A per-channel shift gives each stain group its
/// tint without disturbing the band widths.
fn family(shift: [f64; 3]) -> Palette {
    let band = |lo: f64, width: f64, jitter: f64| Shade {
        lo: [lo + shift[0], lo + shift[1], lo + shift[2]],
        width,
        jitter,
    };
    Palette {
        nuclei: band(34.0, 22.0, 4.0),
        cytoplasm: band(56.0, 57.0, 5.0),
        background: band(113.0, 126.0, 6.0),
    }
}

/// Family tints subtract from channels rather than add, so no band
/// edge approaches the 0 or 255 clamp: clamping would pile histogram
/// mass into a single bin and ruin transfer-table quality.
fn family_violet() -> Palette {
    family([-20.0, -22.0, 0.0])
}

fn family_rose() -> Palette {
    family([0.0, -10.0, -20.0])
}

fn shade_class(
    name: &str,
    group: usize,
    base: Palette,
    offset: [f64; 3],
    cell_density: f64,
    orientation_angle: f64,
    orientation_strength: f64,
    cell_scale: f64,
    depth_profile: [f64; 3],
) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        group,
        cell_density,
        orientation_angle,
        orientation_strength,
        cell_scale,
        depth_profile,
        palette: Palette {
            background: base.background.offset(offset),
            cytoplasm: base.cytoplasm.offset(offset),
            nuclei: base.nuclei.offset(offset),
        },
    }
}

/// The default corpus: eight classes in two palette families of four.
/// Within a family, every class aligns its cells along its own axis,
/// the four axes fanning out 45 degrees apart, the classes span a 2x
/// range in cell size with matching count changes, and each carries
/// its own background depth-sign pattern. All of these cues survive
/// the mix-up augmentation, which repaints per-channel value
/// histograms but keeps spatial and joint color structure intact;
/// per-class value cues would not survive it. A small shade offset
/// adds flavor only.
pub fn default_classes() -> Vec<ClassSpec> {
    let v = family_violet();
    let r = family_rose();
    vec![
        shade_class("c0", 0, v, [0.0, 0.0, 0.0], 17.8, 0.000, 0.95, 4.4, [1.0, 1.0, 1.0]),
        shade_class("c1", 0, v, [2.0, 1.0, -2.0], 6.5, 0.785, 0.95, 4.4, [1.0, 1.0, -1.0]),
        shade_class("c2", 0, v, [-2.0, 1.0, 2.0], 78.2, 1.571, 0.95, 2.1, [1.0, -1.0, 1.0]),
        shade_class("c3", 0, v, [2.0, -2.0, 1.0], 28.7, 2.356, 0.95, 2.1, [1.0, -1.0, -1.0]),
        shade_class("c4", 1, r, [0.0, 0.0, 0.0], 17.8, 0.393, 0.95, 4.4, [1.0, 1.0, 1.0]),
        shade_class("c5", 1, r, [-2.0, 2.0, 1.0], 6.5, 1.178, 0.95, 4.4, [1.0, 1.0, -1.0]),
        shade_class("c6", 1, r, [2.0, 1.0, -2.0], 78.2, 1.963, 0.95, 2.1, [1.0, -1.0, 1.0]),
        shade_class("c7", 1, r, [-1.0, -2.0, 2.0], 28.7, 2.749, 0.95, 2.1, [1.0, -1.0, -1.0]),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileStats {
    pub cell_count: usize,
    pub mean_rgb: [f64; 3],
}

struct Canvas {
    side: usize,
    // Interleaved RGB in f64 while compositing.
    data: Vec<f64>,
}

impl Canvas {
    fn quantize(&self) -> ImageTile {
        let pixels: Vec<u8> =
            self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        ImageTile::new(self.side, pixels).expect("canvas dimensions are valid")
    }
}

/// Paints an ellipse. `edge_ramp` > 0 fades alpha near the rim (used
/// by lesions); 0 paints a hard edge, which keeps cell pixels inside
/// their palette band instead of smearing blends across the histogram.
fn paint_ellipse(
    canvas: &mut Canvas,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    color: [f64; 3],
    alpha: f64,
    edge_ramp: f64,
    rng: Option<(&mut ChaCha8Rng, f64)>,
) {
    let side = canvas.side;
    let r = a.max(b);
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(side as f64 - 1.0)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(side as f64 - 1.0)) as usize;
    let (sin, cos) = theta.sin_cos();
    let mut jitter_rng = rng;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let q = (u / a) * (u / a) + (v / b) * (v / b);
            if q < 1.0 {
                let edge = if edge_ramp > 0.0 { (edge_ramp * (1.0 - q)).min(1.0) } else { 1.0 };
                let al = alpha * edge;
                let noise = match &mut jitter_rng {
                    Some((r, s)) => {
                        let n: f64 = Normal::new(0.0, 1.0).unwrap().sample(*r);
                        n * *s
                    }
                    None => 0.0,
                };
                let i = (y * side + x) * 3;
                for c in 0..3 {
                    let target = color[c] + noise;
                    canvas.data[i + c] = al * target + (1.0 - al) * canvas.data[i + c];
                }
            }
        }
    }
}

pub fn gen_tile(spec: &ClassSpec, side: usize, seed: u64) -> Result<ImageTile> {
    Ok(gen_tile_with_stats(spec, side, seed)?.0)
}

pub fn gen_tile_with_stats(spec: &ClassSpec, side: usize, seed: u64) -> Result<(ImageTile, TileStats)> {
    if side < 16 || side % 8 != 0 {
        return Err(Error::parameter(format!(
            "tile side must be a multiple of 8 and at least 16, got {side}"
        )));
    }
    let mut rng = derive_rng(seed, &[TILE_STREAM]);
    let s = side as f64;
    let normal = Normal::new(0.0, 1.0).unwrap();

    // Smooth stain-depth field with an exactly uniform value marginal:
    // bilinear interpolation of a coarse Gaussian lattice stays Gaussian
    // at every pixel with a known position-dependent variance, so the
    // normal CDF maps it back to U(0,1). Smoothness matters as much as
    // the marginal here. The flat marginal keeps the channel histogram
    // level across the band, which the transfer tables need, while a
    // per-pixel depth would flood the background with white noise whose
    // local energy drowns the oriented cell-edge texture that separates
    // the classes.
    const KNOT_STEP: usize = 8;
    let knots = side / KNOT_STEP + 2;
    let mut lattice = vec![0.0f64; knots * knots];
    for v in lattice.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let depth = |x: usize, y: usize| -> f64 {
        let (gx, gy) = (x / KNOT_STEP, y / KNOT_STEP);
        let fx = (x % KNOT_STEP) as f64 / KNOT_STEP as f64;
        let fy = (y % KNOT_STEP) as f64 / KNOT_STEP as f64;
        let at = |r: usize, c: usize| lattice[r * knots + c];
        let f = at(gy, gx) * (1.0 - fx) * (1.0 - fy)
            + at(gy, gx + 1) * fx * (1.0 - fy)
            + at(gy + 1, gx) * (1.0 - fx) * fy
            + at(gy + 1, gx + 1) * fx * fy;
        let var = ((1.0 - fx) * (1.0 - fx) + fx * fx) * ((1.0 - fy) * (1.0 - fy) + fy * fy);
        0.5 * (1.0 + libm::erf(f / (2.0 * var).sqrt()))
    };

    let bg = &spec.palette.background;
    let mut canvas = Canvas { side, data: vec![0.0; side * side * 3] };
    for y in 0..side {
        for x in 0..side {
            let u = depth(x, y);
            let i = (y * side + x) * 3;
            for c in 0..3 {
                let uc = if spec.depth_profile[c] < 0.0 { 1.0 - u } else { u };
                let own: f64 = normal.sample(&mut rng);
                canvas.data[i + c] = bg.lo[c] + bg.width * uc + bg.jitter * own;
            }
        }
    }

    // Poisson-scattered cells: cytoplasm halo first, nucleus on top.
    let density = spec.cell_density * (s * s) / 4096.0;
    let count = Poisson::new(density.max(1e-9)).unwrap().sample(&mut rng) as usize;
    for _ in 0..count {
        let cx = rng.gen_range(0.0..s);
        let cy = rng.gen_range(0.0..s);
        let theta = spec.orientation_angle
            + (1.0 - spec.orientation_strength) * rng.gen_range(-PI / 2.0..PI / 2.0)
            + 0.06 * normal.sample(&mut rng);
        let a = spec.cell_scale * rng.gen_range(1.1..1.5);
        let b = spec.cell_scale * rng.gen_range(0.40..0.62);

        // Near-opaque strata: heavy blending would drop cell pixels
        // between the palette bands instead of inside them.
        let cyto = &spec.palette.cytoplasm;
        let cu: f64 = rng.gen();
        let cn = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
        let cyto_color = cyto.color(cu, cn);
        paint_ellipse(&mut canvas, cx, cy, 1.8 * a, 1.9 * b, theta, cyto_color, 0.95, 0.0, None);

        let nuc = &spec.palette.nuclei;
        let nu: f64 = rng.gen();
        let nn = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
        let nuc_color = nuc.color(nu, nn);
        paint_ellipse(&mut canvas, cx, cy, a, b, theta, nuc_color, 0.97, 0.0, Some((&mut rng, 3.0)));
    }

    // Debris speckle: scanner dust with arbitrary color.
    let debris = ((DEBRIS_FRACTION * s * s).round() as usize).max(1);
    for _ in 0..debris {
        let x = rng.gen_range(0..side);
        let y = rng.gen_range(0..side);
        let i = (y * side + x) * 3;
        for c in 0..3 {
            canvas.data[i + c] = rng.gen_range(0..=255u8) as f64;
        }
    }

    let tile = canvas.quantize();
    let mean_rgb = tile.mean_rgb();
    Ok((tile, TileStats { cell_count: count, mean_rgb }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Vacuole,
    Streak,
    Blotch,
}

impl LesionKind {
    pub const ALL: [LesionKind; 3] = [LesionKind::Vacuole, LesionKind::Streak, LesionKind::Blotch];

    pub fn name(&self) -> &'static str {
        match self {
            LesionKind::Vacuole => "vacuole",
            LesionKind::Streak => "streak",
            LesionKind::Blotch => "blotch",
        }
    }
}

impl std::str::FromStr for LesionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<LesionKind> {
        match s {
            "vacuole" => Ok(LesionKind::Vacuole),
            "streak" => Ok(LesionKind::Streak),
            "blotch" => Ok(LesionKind::Blotch),
            other => Err(Error::parameter(format!("unknown lesion kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionSpec {
    pub kind: LesionKind,
    /// Target fraction of pixels visibly altered, in (0, 0.9].
    pub coverage: f64,
    /// Blend strength in (0, 1].
    pub intensity: f64,
}

/// Composites lesions onto a copy of the tile until at least
/// `coverage` of the pixels differ from the original, then stops.
/// Returns the altered tile and the achieved changed-pixel fraction.
pub fn inject_lesion(tile: &ImageTile, spec: &LesionSpec, seed: u64) -> Result<(ImageTile, f64)> {
    if !(spec.coverage > 0.0 && spec.coverage <= 0.9) {
        return Err(Error::parameter("lesion coverage must be in (0, 0.9]"));
    }
    if !(spec.intensity > 0.0 && spec.intensity <= 1.0) {
        return Err(Error::parameter("lesion intensity must be in (0, 1]"));
    }
    let mut rng = derive_rng(seed, &[LESION_STREAM]);
    let side = tile.side();
    let s = side as f64;
    let scale = s / 64.0;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut canvas =
        Canvas { side, data: tile.pixels().iter().map(|&v| v as f64).collect() };
    let total = (side * side) as f64;

    let mut fraction = 0.0;
    for _ in 0..600 {
        match spec.kind {
            LesionKind::Vacuole => {
                let cx = rng.gen_range(0.0..s);
                let cy = rng.gen_range(0.0..s);
                let a = rng.gen_range(3.2..6.0) * scale;
                let b = a * rng.gen_range(0.75..1.0);
                let theta = rng.gen_range(0.0..PI);
                let mut color = [251.0, 251.0, 248.0];
                for c in color.iter_mut() {
                    *c += 2.0 * normal.sample(&mut rng);
                }
                paint_ellipse(&mut canvas, cx, cy, a, b, theta, color, 0.92 * spec.intensity, 1.5, None);
            }
            LesionKind::Streak => {
                let cx = rng.gen_range(0.0..s);
                let cy = rng.gen_range(0.0..s);
                let a = rng.gen_range(16.0..30.0) * scale;
                let b = rng.gen_range(2.4..4.4) * scale;
                let theta = rng.gen_range(0.0..PI);
                let mut color = [28.0, 44.0, 112.0];
                for c in color.iter_mut() {
                    *c += 4.0 * normal.sample(&mut rng);
                }
                paint_ellipse(&mut canvas, cx, cy, a, b, theta, color, 0.88 * spec.intensity, 1.5, None);
            }
            LesionKind::Blotch => {
                let mut cx = rng.gen_range(0.0..s);
                let mut cy = rng.gen_range(0.0..s);
                let disks = rng.gen_range(2..6);
                for _ in 0..disks {
                    let r = rng.gen_range(3.0..4.8) * scale;
                    smear_disk(&mut canvas, cx, cy, r, 0.9 * spec.intensity);
                    cx = (cx + rng.gen_range(-4.5..4.5) * scale).clamp(0.0, s - 1.0);
                    cy = (cy + rng.gen_range(-4.5..4.5) * scale).clamp(0.0, s - 1.0);
                }
            }
        }
        fraction = changed_fraction(tile.pixels(), &canvas) / total;
        if fraction >= spec.coverage {
            break;
        }
    }
    if fraction < spec.coverage {
        return Err(Error::data(format!(
            "lesion reached only {:.3} of requested coverage {:.3}",
            fraction, spec.coverage
        )));
    }
    Ok((canvas.quantize(), fraction))
}

/// Flattens a disk toward a darkened gray of its own mean color: cell
/// boundaries, stain depth variation, pixel grain and tint all vanish.
/// A tile that keeps its vivid texture everywhere else but carries
/// smooth dark achromatic patches cannot be produced by any global
/// brightness, contrast, saturation or hue transform of a clean tile,
/// so these regions stay anomalous under color jitter.
fn smear_disk(canvas: &mut Canvas, cx: f64, cy: f64, r: f64, alpha: f64) {
    let side = canvas.side;
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(side as f64 - 1.0)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(side as f64 - 1.0)) as usize;
    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy < r * r {
                let i = (y * side + x) * 3;
                for c in 0..3 {
                    mean[c] += canvas.data[i + c];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return;
    }
    let n = count as f64;
    let gray = 0.52 * luminance(mean[0] / n, mean[1] / n, mean[2] / n);
    mean = [gray, gray, gray];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let q = (dx * dx + dy * dy) / (r * r);
            if q < 1.0 {
                let al = alpha * (1.5 * (1.0 - q)).min(1.0);
                let i = (y * side + x) * 3;
                for c in 0..3 {
                    canvas.data[i + c] = al * mean[c] + (1.0 - al) * canvas.data[i + c];
                }
            }
        }
    }
}

fn changed_fraction(original: &[u8], canvas: &Canvas) -> f64 {
    let mut changed = 0usize;
    for (px, orig) in canvas.data.chunks_exact(3).zip(original.chunks_exact(3)) {
        let differs = (0..3).any(|c| {
            let q = px[c].round().clamp(0.0, 255.0) as u8;
            q != orig[c]
        });
        if differs {
            changed += 1;
        }
    }
    changed as f64
}

/// Deterministic per-channel affine color shift, the stand-in for a
/// scanner or staining batch effect.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColorShift {
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

impl ColorShift {
    pub fn offsets(offset: [f64; 3]) -> ColorShift {
        ColorShift { offset, scale: [1.0, 1.0, 1.0] }
    }
}

pub fn shift_tile(tile: &ImageTile, shift: &ColorShift) -> ImageTile {
    let pixels: Vec<u8> = tile
        .pixels()
        .chunks_exact(3)
        .flat_map(|px| {
            (0..3).map(move |c| {
                (px[c] as f64 * shift.scale[c] + shift.offset[c]).round().clamp(0.0, 255.0) as u8
            })
        })
        .collect();
    ImageTile::new(tile.side(), pixels).expect("same dimensions")
}

/// Seed for one corpus tile, stable across runs and recorded in the
/// manifest so any tile can be regenerated in isolation.
pub fn tile_seed(corpus_seed: u64, split_idx: u64, class_idx: u64, tile_idx: u64) -> u64 {
    let mut s = mix64(corpus_seed ^ 0xc0_7075);
    s = mix64(s ^ mix64(split_idx.wrapping_add(1)));
    s = mix64(s ^ mix64(class_idx.wrapping_add(1)));
    mix64(s ^ mix64(tile_idx.wrapping_add(1)))
}

pub fn lesion_seed(tile_seed: u64) -> u64 {
    mix64(tile_seed ^ 0x1e51_04)
}

/// On-disk corpus layout and sizes. `classes[i]` is class id `i`
/// everywhere downstream; the target class supplies the one-class
/// training and both test splits.
#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub classes: Vec<ClassSpec>,
    pub tile_side: usize,
    pub train_aux_per_class: usize,
    pub train_target_count: usize,
    pub test_normal_count: usize,
    pub test_anomalous_count: usize,
    pub target_class: usize,
    pub lesion_coverage: f64,
    pub lesion_intensity: f64,
    pub overwrite: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            classes: default_classes(),
            tile_side: 64,
            train_aux_per_class: 500,
            train_target_count: 400,
            test_normal_count: 150,
            test_anomalous_count: 150,
            target_class: 0,
            lesion_coverage: 0.3,
            lesion_intensity: 0.85,
            overwrite: false,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::parameter("corpus needs at least 2 classes"));
        }
        let groups: std::collections::BTreeSet<usize> =
            self.classes.iter().map(|c| c.group).collect();
        if groups.len() < 2 {
            return Err(Error::parameter("corpus needs at least 2 stain groups"));
        }
        if self.target_class >= self.classes.len() {
            return Err(Error::parameter(format!(
                "target class {} out of range for {} classes",
                self.target_class,
                self.classes.len()
            )));
        }
        if self.train_aux_per_class == 0
            || self.train_target_count == 0
            || self.test_normal_count == 0
            || self.test_anomalous_count == 0
        {
            return Err(Error::parameter("every split count must be positive"));
        }
        Ok(())
    }
}

struct TileJob {
    split: Split,
    split_idx: u64,
    class: usize,
    tile_idx: usize,
    lesion: Option<LesionKind>,
}

fn run_tile_job(root: &Path, cfg: &CorpusConfig, seed: u64, job: &TileJob) -> Result<ManifestRow> {
    let spec = &cfg.classes[job.class];
    let ts = tile_seed(seed, job.split_idx, job.class as u64, job.tile_idx as u64);
    let mut tile = gen_tile(spec, cfg.tile_side, ts)?;
    if let Some(kind) = job.lesion {
        let lesion = LesionSpec {
            kind,
            coverage: cfg.lesion_coverage,
            intensity: cfg.lesion_intensity,
        };
        tile = inject_lesion(&tile, &lesion, lesion_seed(ts))?.0;
    }
    let rel = format!("{}/c{}_{:05}.png", job.split, job.class, job.tile_idx);
    tile.save_png(&root.join(&rel))?;
    Ok(ManifestRow {
        path: rel,
        class: job.class,
        stain_group: spec.group,
        split: job.split,
        anomaly: job.lesion.is_some(),
        seed: ts,
    })
}

#[cfg(feature = "parallel")]
fn run_jobs(root: &Path, cfg: &CorpusConfig, seed: u64, jobs: &[TileJob]) -> Result<Vec<ManifestRow>> {
    use rayon::prelude::*;
    jobs.par_iter().map(|j| run_tile_job(root, cfg, seed, j)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_jobs(root: &Path, cfg: &CorpusConfig, seed: u64, jobs: &[TileJob]) -> Result<Vec<ManifestRow>> {
    jobs.iter().map(|j| run_tile_job(root, cfg, seed, j)).collect()
}

/// Generates the full corpus under `root`: per-split directories of
/// PNG tiles plus `manifest.csv`. Tiles are generated in parallel from
/// per-tile seeds; the manifest is written once at the end, in a fixed
/// order, so reruns with one seed are byte-identical.
pub fn gen_corpus(root: &Path, cfg: &CorpusConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let manifest_path = root.join("manifest.csv");
    let conflict = manifest_path.exists()
        || Split::ALL.iter().any(|s| root.join(s.as_str()).exists());
    if conflict {
        if !cfg.overwrite {
            return Err(Error::config(format!(
                "corpus already present under {} (pass overwrite to replace it)",
                root.display()
            )));
        }
        for s in Split::ALL {
            let dir = root.join(s.as_str());
            if dir.exists() {
                std::fs::remove_dir_all(&dir)
                    .map_err(|source| Error::Io { path: dir.clone(), source })?;
            }
        }
        if manifest_path.exists() {
            std::fs::remove_file(&manifest_path)
                .map_err(|source| Error::Io { path: manifest_path.clone(), source })?;
        }
    }
    for s in Split::ALL {
        let dir = root.join(s.as_str());
        std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir, source })?;
    }

    let mut jobs = Vec::new();
    for (ci, _) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.train_aux_per_class {
            jobs.push(TileJob {
                split: Split::TrainAux,
                split_idx: 0,
                class: ci,
                tile_idx: i,
                lesion: None,
            });
        }
    }
    for i in 0..cfg.train_target_count {
        jobs.push(TileJob {
            split: Split::TrainTarget,
            split_idx: 1,
            class: cfg.target_class,
            tile_idx: i,
            lesion: None,
        });
    }
    for i in 0..cfg.test_normal_count {
        jobs.push(TileJob {
            split: Split::TestNormal,
            split_idx: 2,
            class: cfg.target_class,
            tile_idx: i,
            lesion: None,
        });
    }
    for i in 0..cfg.test_anomalous_count {
        jobs.push(TileJob {
            split: Split::TestAnomalous,
            split_idx: 3,
            class: cfg.target_class,
            tile_idx: i,
            lesion: Some(LesionKind::ALL[i % LesionKind::ALL.len()]),
        });
    }

    let rows = run_jobs(root, cfg, seed, &jobs)?;
    let manifest = Manifest::new(rows);
    manifest.validate()?;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

/// Re-emits one split with a global affine color shift applied to
/// every tile, the stand-in for scanning the same slides in a second
/// staining batch. Output lands under `dst_root` at the same relative
/// paths; the returned manifest covers just that split.
pub fn batch_shift_split(
    src_root: &Path,
    manifest: &Manifest,
    split: Split,
    shift: &ColorShift,
    dst_root: &Path,
) -> Result<Manifest> {
    let rows: Vec<ManifestRow> = manifest.split(split).cloned().collect();
    if rows.is_empty() {
        return Err(Error::parameter(format!("manifest has no rows in split {split}")));
    }
    let dir = dst_root.join(split.as_str());
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir, source })?;
    for row in &rows {
        let tile = ImageTile::load_png(&src_root.join(&row.path))?;
        shift_tile(&tile, shift).save_png(&dst_root.join(&row.path))?;
    }
    Ok(Manifest::new(rows))
}
