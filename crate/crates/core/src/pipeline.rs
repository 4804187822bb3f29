//! Slide processing: cut rasters into a tile grid, normalize, encode,
//! score against the one-class model, and pool tile scores into a
//! slide verdict (anomalous-tile fraction plus a logistic sum).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, EncoderModel, ImageTensor};
use crate::ocsvm::{AnomalyScore, OneClassModel};
use crate::tile::ImageTile;

/// A tile cut from a larger raster, with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedTile {
    pub image: ImageTile,
    pub source_id: String,
    pub row: usize,
    pub col: usize,
    pub label: Option<usize>,
}

/// Tile grid over a raster. Partial edge tiles are discarded; an image
/// smaller than one tile yields an empty grid with `undersized` set.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub tiles: Vec<PlacedTile>,
    pub undersized: bool,
}

pub fn extract_tiles(
    width: usize,
    height: usize,
    pixels: &[u8],
    source_id: &str,
    side: usize,
    stride: usize,
) -> Result<TileGrid> {
    if pixels.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "raster byte length {} does not match {width}x{height}x3",
            pixels.len()
        )));
    }
    if side == 0 || stride == 0 {
        return Err(Error::parameter("tile side and stride must be positive"));
    }
    if width < side || height < side {
        return Ok(TileGrid { tiles: Vec::new(), undersized: true });
    }
    let rows = (height - side) / stride + 1;
    let cols = (width - side) / stride + 1;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * stride, c * stride);
            let mut data = Vec::with_capacity(side * side * 3);
            for y in y0..y0 + side {
                let start = (y * width + x0) * 3;
                data.extend_from_slice(&pixels[start..start + side * 3]);
            }
            tiles.push(PlacedTile {
                image: ImageTile::new(side, data)?,
                source_id: source_id.to_string(),
                row: r,
                col: c,
                label: None,
            });
        }
    }
    Ok(TileGrid { tiles, undersized: false })
}

pub fn extract_tiles_from_png(path: &Path, side: usize, stride: usize) -> Result<TileGrid> {
    let (width, height, pixels) = crate::tile::load_rgb(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    extract_tiles(width, height, &pixels, &id, side, stride)
}

/// Per-channel mean intensity (0..255 scale) over a tile set,
/// accumulated in one streaming pass.
pub fn channel_means<'a, I>(tiles: I) -> Result<[f64; 3]>
where
    I: IntoIterator<Item = &'a ImageTile>,
{
    let mut sums = [0.0f64; 3];
    let mut count = 0u64;
    for tile in tiles {
        for px in tile.pixels().chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        count += (tile.side() * tile.side()) as u64;
    }
    if count == 0 {
        return Err(Error::parameter("channel means need at least one tile"));
    }
    Ok(sums.map(|s| s / count as f64))
}

/// Scales to [0, 1] and removes the per-channel training mean; no
/// variance scaling.
pub fn normalize_tile(tile: &ImageTile, channel_means: [f64; 3]) -> ImageTensor {
    let side = tile.side();
    let mut data = vec![0.0; 3 * side * side];
    for (i, px) in tile.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * side * side + i] = (px[c] as f64 - channel_means[c]) / 255.0;
        }
    }
    ImageTensor::new(3, side, side, data).expect("dimensions agree")
}

/// One scored tile of a slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTile {
    pub source_id: String,
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub is_anomalous: bool,
}

/// Encodes and scores tiles one batch at a time. Errors carry the
/// offending tile's provenance.
pub fn score_tiles(
    encoder: &EncoderModel,
    svm: &OneClassModel,
    channel_means: [f64; 3],
    tiles: &[PlacedTile],
) -> Result<Vec<ScoredTile>> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(64.max(1)) {
        let inputs: Vec<ImageTensor> =
            chunk.iter().map(|t| normalize_tile(&t.image, channel_means)).collect();
        let feats = nn::features(encoder, &inputs).map_err(|e| {
            let t = &chunk[0];
            Error::data(format!("encoding tiles near {}:{}:{}: {e}", t.source_id, t.row, t.col))
        })?;
        for (t, row) in chunk.iter().zip(feats.iter_rows()) {
            let s: AnomalyScore = svm.decision(row).map_err(|e| {
                Error::data(format!("scoring tile {}:{}:{}: {e}", t.source_id, t.row, t.col))
            })?;
            out.push(ScoredTile {
                source_id: t.source_id.clone(),
                row: t.row,
                col: t.col,
                score: s.score,
                is_anomalous: s.is_anomalous,
            });
        }
    }
    Ok(out)
}

/// Fraction of scores strictly below the threshold; zero counts normal.
pub fn wsi_fraction(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::parameter("anomalous-tile fraction needs at least one score"));
    }
    let hits = scores.iter().filter(|&&s| s < threshold).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Σ 1/(1 + exp(growth·score)): each tile contributes its anomaly
/// evidence in (0, 1), so the sum grows as scores sink.
pub fn logistic_aggregate(scores: &[f64], growth: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::parameter("logistic aggregation needs at least one score"));
    }
    if !(growth > 0.0) {
        return Err(Error::parameter(format!("growth must be positive, got {growth}")));
    }
    Ok(scores.iter().map(|&s| 1.0 / (1.0 + (growth * s).exp())).sum())
}

/// Slide-level verdict with the per-tile evidence that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideReport {
    pub slide_id: String,
    pub threshold: f64,
    pub growth: f64,
    pub anomaly_fraction: f64,
    pub logistic_score: f64,
    pub tiles: Vec<ScoredTile>,
}

pub fn build_slide_report(
    slide_id: &str,
    scored: &[ScoredTile],
    threshold: f64,
    growth: f64,
) -> Result<SlideReport> {
    let scores: Vec<f64> = scored.iter().map(|t| t.score).collect();
    Ok(SlideReport {
        slide_id: slide_id.to_string(),
        threshold,
        growth,
        anomaly_fraction: wsi_fraction(&scores, threshold)?,
        logistic_score: logistic_aggregate(&scores, growth)?,
        tiles: scored.to_vec(),
    })
}

impl SlideReport {
    /// Flat table (slide id, row, col, score, anomaly flag) for
    /// plotting tools.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slide_id,row,col,score,is_anomalous\n");
        for t in &self.tiles {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.slide_id, t.row, t.col, t.score, t.is_anomalous
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocsvm::{fit, GammaChoice};
    use crate::synth;

    fn checker_raster(width: usize, height: usize) -> Vec<u8> {
        let mut px = vec![0u8; width * height * 3];
        for y in 0..height {
            for x in 0..width {
                let v = (((x / 7) + (y / 5)) % 2 * 200 + 20) as u8;
                let i = (y * width + x) * 3;
                px[i] = v;
                px[i + 1] = v.wrapping_add(10);
                px[i + 2] = x as u8;
            }
        }
        px
    }

    #[test]
    fn grid_counts_match_arithmetic() {
        let px = checker_raster(512, 512);
        let g = extract_tiles(512, 512, &px, "s", 256, 256).unwrap();
        assert_eq!(g.tiles.len(), 4);
        assert!(!g.undersized);
        let g = extract_tiles(512, 512, &px, "s", 256, 128).unwrap();
        assert_eq!(g.tiles.len(), 9);
        let px = checker_raster(300, 300);
        let g = extract_tiles(300, 300, &px, "s", 256, 256).unwrap();
        assert_eq!(g.tiles.len(), 1);
        let px = checker_raster(100, 300);
        let g = extract_tiles(100, 300, &px, "s", 256, 256).unwrap();
        assert!(g.tiles.is_empty());
        assert!(g.undersized);
    }

    #[test]
    fn grid_tiles_copy_the_right_pixels() {
        let px = checker_raster(96, 64);
        let g = extract_tiles(96, 64, &px, "s", 32, 32).unwrap();
        assert_eq!(g.tiles.len(), 6);
        let t = &g.tiles[4]; // row 1, col 1
        assert_eq!((t.row, t.col), (1, 1));
        for y in 0..32 {
            for x in 0..32 {
                let want = {
                    let i = ((y + 32) * 96 + x + 32) * 3;
                    [px[i], px[i + 1], px[i + 2]]
                };
                assert_eq!(t.image.get(x, y), want);
            }
        }
    }

    #[test]
    fn normalization_semantics() {
        let tile = ImageTile::filled(8, [100, 150, 200]);
        let t = normalize_tile(&tile, [100.0, 150.0, 200.0]);
        assert!(t.data.iter().all(|&v| v == 0.0), "mean pixel maps to zero");
        let t = normalize_tile(&tile, [0.0, 0.0, 0.0]);
        assert!((t.plane(0)[0] - 100.0 / 255.0).abs() < 1e-15);
        assert!((t.plane(2)[5] - 200.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn channel_means_match_brute_force() {
        let classes = synth::default_classes();
        let tiles: Vec<ImageTile> =
            (0..12).map(|i| synth::gen_tile(&classes[i % 4], 32, 900 + i as u64).unwrap()).collect();
        let fast = channel_means(tiles.iter()).unwrap();
        let mut slow = [0.0f64; 3];
        let mut n = 0.0;
        for t in &tiles {
            for px in t.pixels().chunks_exact(3) {
                for c in 0..3 {
                    slow[c] += px[c] as f64;
                }
                n += 1.0;
            }
        }
        for c in 0..3 {
            assert!((fast[c] - slow[c] / n).abs() < 1e-9);
        }
    }

    fn tiny_models(side: usize) -> (EncoderModel, OneClassModel, [f64; 3]) {
        let encoder = nn::init_model(7, 8, 4).unwrap();
        let means = [120.0, 118.0, 131.0];
        let classes = synth::default_classes();
        let tiles: Vec<ImageTile> = (0..40)
            .map(|i| synth::gen_tile(&classes[0], side, 4000 + i as u64).unwrap())
            .collect();
        let inputs: Vec<ImageTensor> =
            tiles.iter().map(|t| normalize_tile(t, means)).collect();
        let feats = nn::features(&encoder, &inputs).unwrap();
        let svm = fit(&feats, 0.2, GammaChoice::Auto).unwrap();
        (encoder, svm, means)
    }

    #[test]
    fn scoring_is_pure_and_composes() {
        let side = 32;
        let (encoder, svm, means) = tiny_models(side);
        let classes = synth::default_classes();
        let tiles: Vec<PlacedTile> = (0..5)
            .map(|i| PlacedTile {
                image: synth::gen_tile(&classes[0], side, 8000 + i as u64).unwrap(),
                source_id: "slide0".into(),
                row: 0,
                col: i as usize,
                label: None,
            })
            .collect();

        assert!(score_tiles(&encoder, &svm, means, &[]).unwrap().is_empty());

        let a = score_tiles(&encoder, &svm, means, &tiles).unwrap();
        let b = score_tiles(&encoder, &svm, means, &tiles).unwrap();
        assert_eq!(a, b, "scoring is deterministic");

        for (t, s) in tiles.iter().zip(&a) {
            let input = normalize_tile(&t.image, means);
            let feat = nn::features(&encoder, &[input]).unwrap();
            let manual = svm.decision(feat.row(0)).unwrap();
            assert_eq!(manual.score, s.score, "composition oracle");
            assert_eq!(manual.is_anomalous, s.is_anomalous);
        }
    }

    #[test]
    fn fraction_semantics() {
        let scores = [-1.0, 0.5, -0.2, 3.0];
        assert_eq!(wsi_fraction(&scores, 0.0).unwrap(), 0.5);
        assert_eq!(wsi_fraction(&[1.0, 2.0], 0.0).unwrap(), 0.0);
        assert_eq!(wsi_fraction(&[0.0], 0.0).unwrap(), 0.0, "exact zero is normal");
        assert!(wsi_fraction(&[], 0.0).is_err());

        let mut shuffled = scores;
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        assert_eq!(
            wsi_fraction(&scores, 0.0).unwrap(),
            wsi_fraction(&shuffled, 0.0).unwrap()
        );
        // Raising the threshold never decreases the fraction.
        let mut prev = 0.0;
        for t in [-2.0, -0.5, 0.0, 0.4, 1.0, 4.0] {
            let f = wsi_fraction(&scores, t).unwrap();
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn logistic_semantics() {
        assert!((logistic_aggregate(&[0.0], 3.7).unwrap() - 0.5).abs() < 1e-15);
        let n = 6;
        let deep = vec![-1e9; n];
        assert!((logistic_aggregate(&deep, 1.0).unwrap() - n as f64).abs() < 1e-12);
        let base = [0.3, -0.2, 1.4];
        let mut lower = base;
        lower[1] -= 0.5;
        assert!(
            logistic_aggregate(&lower, 1.0).unwrap() > logistic_aggregate(&base, 1.0).unwrap()
        );
        assert!(logistic_aggregate(&[], 1.0).is_err());
        assert!(logistic_aggregate(&[1.0], 0.0).is_err());
    }

    #[test]
    fn slide_report_is_consistent_and_deterministic() {
        let scored = vec![
            ScoredTile { source_id: "s".into(), row: 0, col: 0, score: -0.4, is_anomalous: true },
            ScoredTile { source_id: "s".into(), row: 0, col: 1, score: 0.2, is_anomalous: false },
            ScoredTile { source_id: "s".into(), row: 1, col: 0, score: 0.0, is_anomalous: false },
        ];
        let r = build_slide_report("s", &scored, 0.0, 1.0).unwrap();
        assert!((r.anomaly_fraction - 1.0 / 3.0).abs() < 1e-15);
        let csv = r.to_csv();
        assert!(csv.starts_with("slide_id,row,col,score,is_anomalous\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("s,0,0,-0.4,true"));

        let again = build_slide_report("s", &scored, 0.0, 1.0).unwrap();
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            serde_json::to_string(&again).unwrap(),
            "byte-identical reports"
        );
    }
}
