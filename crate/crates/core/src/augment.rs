//! Color augmentation. Class mix-up re-renders a tile in the color
//! distribution of another class from the same stain group by
//! histogram matching: per-channel CDFs are estimated from a tile
//! sample and inverted into 256-entry look-up tables. Plain color
//! jitter (brightness, contrast, saturation, hue) covers what mix-up
//! does not.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::synth::luminance;
use crate::tile::ImageTile;

pub const LEVELS: usize = 256;

/// Per-channel 256-bin counts for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHistogram {
    pub class: usize,
    pub counts: Vec<[u64; LEVELS]>,
}

impl ClassHistogram {
    pub fn empty(class: usize) -> ClassHistogram {
        ClassHistogram { class, counts: vec![[0u64; LEVELS]; 3] }
    }

    pub fn add_tile(&mut self, tile: &ImageTile) {
        for px in tile.pixels().chunks_exact(3) {
            for c in 0..3 {
                self.counts[c][px[c] as usize] += 1;
            }
        }
    }

    /// Total sampled pixels (identical across channels).
    pub fn total(&self) -> u64 {
        self.counts[0].iter().sum()
    }
}

/// Builds per-class histograms over a seeded sample of at most
/// `sample_budget` tiles per class.
pub fn build_class_histograms(
    tiles_by_class: &BTreeMap<usize, Vec<&ImageTile>>,
    sample_budget: usize,
    seed: u64,
) -> Result<BTreeMap<usize, ClassHistogram>> {
    if sample_budget == 0 {
        return Err(Error::parameter("sample_budget must be positive"));
    }
    let mut out = BTreeMap::new();
    for (&class, tiles) in tiles_by_class {
        if tiles.is_empty() {
            return Err(Error::parameter(format!("class {class} has no tiles")));
        }
        let mut hist = ClassHistogram::empty(class);
        if tiles.len() <= sample_budget {
            for t in tiles {
                hist.add_tile(t);
            }
        } else {
            let mut rng = derive_rng(seed, &[0x6873, class as u64]);
            let mut picks = rand::seq::index::sample(&mut rng, tiles.len(), sample_budget)
                .into_vec();
            picks.sort_unstable();
            for i in picks {
                hist.add_tile(tiles[i]);
            }
        }
        out.insert(class, hist);
    }
    Ok(out)
}

/// Normalized cumulative distribution of one channel histogram.
/// Monotone non-decreasing with final entry exactly 1.0.
pub fn cdf(counts: &[u64; LEVELS]) -> Result<[f64; LEVELS]> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::data("cannot build a CDF from an empty histogram"));
    }
    let mut out = [0.0; LEVELS];
    let mut cum = 0u64;
    for (i, &c) in counts.iter().enumerate() {
        cum += c;
        out[i] = cum as f64 / total as f64;
    }
    Ok(out)
}

/// Inverts histogram matching into a table: lut[x] is the smallest z
/// with cdf_dst(z) >= cdf_src(x). Monotone non-decreasing by
/// construction.
pub fn build_transfer_lut(cdf_src: &[f64; LEVELS], cdf_dst: &[f64; LEVELS]) -> [u8; LEVELS] {
    let mut lut = [0u8; LEVELS];
    let mut z = 0usize;
    for x in 0..LEVELS {
        while z < LEVELS - 1 && cdf_dst[z] < cdf_src[x] {
            z += 1;
        }
        lut[x] = z as u8;
    }
    lut
}

/// Color transfer table from one class to another, one LUT per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferLut {
    pub src: usize,
    pub dst: usize,
    pub lut: [[u8; LEVELS]; 3],
}

impl TransferLut {
    pub fn apply(&self, tile: &ImageTile) -> ImageTile {
        let pixels: Vec<u8> = tile
            .pixels()
            .chunks_exact(3)
            .flat_map(|px| (0..3).map(move |c| self.lut[c][px[c] as usize]))
            .collect();
        ImageTile::new(tile.side(), pixels).expect("same dimensions")
    }
}

/// All transfer tables for same-group class pairs, self-pairs included.
#[derive(Clone, Debug)]
pub struct MixupTables {
    pairs: BTreeMap<(usize, usize), TransferLut>,
    members: BTreeMap<usize, Vec<usize>>,
}

impl MixupTables {
    pub fn lut(&self, src: usize, dst: usize) -> Option<&TransferLut> {
        self.pairs.get(&(src, dst))
    }

    /// Classes sharing the stain group of `class` (including itself).
    pub fn group_members(&self, class: usize) -> Option<&[usize]> {
        self.members.get(&class).map(Vec::as_slice)
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }
}

/// Builds mix-up tables from class histograms and a class-to-group map.
pub fn build_mixup_tables(
    hists: &BTreeMap<usize, ClassHistogram>,
    groups: &BTreeMap<usize, usize>,
) -> Result<MixupTables> {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&class, &group) in groups {
        if !hists.contains_key(&class) {
            return Err(Error::parameter(format!("no histogram for class {class}")));
        }
        by_group.entry(group).or_default().push(class);
    }
    let mut cdfs: BTreeMap<usize, Vec<[f64; LEVELS]>> = BTreeMap::new();
    for (&class, hist) in hists {
        let mut chans = Vec::with_capacity(3);
        for c in 0..3 {
            chans.push(cdf(&hist.counts[c])?);
        }
        cdfs.insert(class, chans);
    }

    let mut pairs = BTreeMap::new();
    let mut members = BTreeMap::new();
    for classes in by_group.values() {
        for &src in classes {
            members.insert(src, classes.clone());
            for &dst in classes {
                let mut lut = [[0u8; LEVELS]; 3];
                for c in 0..3 {
                    lut[c] = build_transfer_lut(&cdfs[&src][c], &cdfs[&dst][c]);
                }
                pairs.insert((src, dst), TransferLut { src, dst, lut });
            }
        }
    }
    Ok(MixupTables { pairs, members })
}

/// Re-colors a tile as a uniformly drawn class from its stain group
/// (possibly itself). Returns the mapped tile and the drawn class.
pub fn apply_mixup(
    tile: &ImageTile,
    src_class: usize,
    tables: &MixupTables,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTile, usize)> {
    let members = tables
        .group_members(src_class)
        .ok_or_else(|| Error::parameter(format!("class {src_class} has no mix-up group")))?;
    let dst = members[rng.gen_range(0..members.len())];
    let lut = tables.lut(src_class, dst).expect("pair exists for group members");
    Ok((lut.apply(tile), dst))
}

/// Empirical sup-distance between two CDFs.
pub fn ks_distance(a: &[f64; LEVELS], b: &[f64; LEVELS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// CDF of a histogram pushed through a transfer table.
pub fn mapped_cdf(counts: &[u64; LEVELS], lut: &[u8; LEVELS]) -> Result<[f64; LEVELS]> {
    let mut mapped = [0u64; LEVELS];
    for (x, &c) in counts.iter().enumerate() {
        mapped[lut[x] as usize] += c;
    }
    cdf(&mapped)
}

/// Inclusive factor ranges for the jitter chain, applied in the fixed
/// order brightness, contrast, saturation, hue. A range collapsed onto
/// the identity value switches its stage off.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JitterRanges {
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Additive shift as a fraction of the full hue circle.
    pub hue: [f64; 2],
}

impl JitterRanges {
    /// Ranges used while training the encoder.
    pub fn brightness_contrast() -> JitterRanges {
        JitterRanges {
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [1.0, 1.0],
            hue: [0.0, 0.0],
        }
    }

    /// Aggressive full chain used when fitting the one-class model, and
    /// by the jitter-instead-of-mixup training variant.
    pub fn full_color() -> JitterRanges {
        JitterRanges {
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [0.4, 1.6],
            hue: [-0.05, 0.05],
        }
    }

    pub fn identity() -> JitterRanges {
        JitterRanges {
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            hue: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r, min) in [
            ("brightness", self.brightness, 0.0),
            ("contrast", self.contrast, 0.0),
            ("saturation", self.saturation, 0.0),
        ] {
            if !(r[0] <= r[1]) || r[0] <= min {
                return Err(Error::parameter(format!("bad {name} range {r:?}")));
            }
        }
        let h = self.hue;
        if !(h[0] <= h[1]) || h[0] < -0.5 || h[1] > 0.5 {
            return Err(Error::parameter(format!("bad hue range {h:?}")));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Random color jitter with factors drawn uniformly from the ranges.
pub fn color_jitter(tile: &ImageTile, ranges: &JitterRanges, rng: &mut ChaCha8Rng) -> Result<ImageTile> {
    ranges.validate()?;
    let mut buf: Vec<f64> = tile.pixels().iter().map(|&v| v as f64).collect();

    let b = draw(rng, ranges.brightness);
    if b != 1.0 {
        for v in buf.iter_mut() {
            *v *= b;
        }
    }

    let c = draw(rng, ranges.contrast);
    if c != 1.0 {
        let mut mean = 0.0;
        for px in buf.chunks_exact(3) {
            mean += luminance(px[0], px[1], px[2]);
        }
        mean /= (buf.len() / 3) as f64;
        for v in buf.iter_mut() {
            *v = mean + c * (*v - mean);
        }
    }

    let s = draw(rng, ranges.saturation);
    if s != 1.0 {
        for px in buf.chunks_exact_mut(3) {
            let gray = luminance(px[0], px[1], px[2]);
            for v in px.iter_mut() {
                *v = gray + s * (*v - gray);
            }
        }
    }

    let h = draw(rng, ranges.hue);
    if h != 0.0 {
        for px in buf.chunks_exact_mut(3) {
            for v in px.iter_mut() {
                *v = v.clamp(0.0, 255.0);
            }
            let (hh, ss, vv) = rgb_to_hsv(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0);
            let (r, g, bb) = hsv_to_rgb((hh + h).rem_euclid(1.0), ss, vv);
            px[0] = r * 255.0;
            px[1] = g * 255.0;
            px[2] = bb * 255.0;
        }
    }

    let pixels: Vec<u8> = buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    ImageTile::new(tile.side(), pixels)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
