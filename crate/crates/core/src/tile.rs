use std::path::Path;

use crate::error::{Error, Result};

/// Square RGB raster, 8 bits per channel, row-major interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    side: usize,
    pixels: Vec<u8>,
}

impl ImageTile {
    pub fn new(side: usize, pixels: Vec<u8>) -> Result<ImageTile> {
        if side == 0 {
            return Err(Error::parameter("tile side must be positive"));
        }
        if pixels.len() != side * side * 3 {
            return Err(Error::shape(format!(
                "tile buffer has {} bytes, want {} for side {}",
                pixels.len(),
                side * side * 3,
                side
            )));
        }
        Ok(ImageTile { side, pixels })
    }

    pub fn filled(side: usize, rgb: [u8; 3]) -> ImageTile {
        let mut pixels = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            pixels.extend_from_slice(&rgb);
        }
        ImageTile { side, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.side + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            sums[0] += px[0] as f64;
            sums[1] += px[1] as f64;
            sums[2] += px[2] as f64;
        }
        let n = (self.side * self.side) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.pixels,
            self.side as u32,
            self.side as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
    }

    pub fn load_png(path: &Path) -> Result<ImageTile> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::data(format!(
                "{}: tile must be square, got {}x{}",
                path.display(),
                w,
                h
            )));
        }
        ImageTile::new(w as usize, img.into_raw())
    }
}

/// Loads an arbitrary raster as interleaved RGB, for slide-style inputs
/// that get cut into tiles downstream.
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_length_is_enforced() {
        assert!(ImageTile::new(4, vec![0; 4 * 4 * 3]).is_ok());
        assert!(ImageTile::new(4, vec![0; 47]).is_err());
        assert!(ImageTile::new(0, vec![]).is_err());
    }

    #[test]
    fn png_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut tile = ImageTile::filled(8, [10, 20, 30]);
        tile.set(3, 5, [200, 100, 50]);
        tile.save_png(&path).unwrap();
        let back = ImageTile::load_png(&path).unwrap();
        assert_eq!(tile, back);
    }

    #[test]
    fn mean_rgb_on_constant_tile() {
        let tile = ImageTile::filled(16, [7, 8, 9]);
        assert_eq!(tile.mean_rgb(), [7.0, 8.0, 9.0]);
    }
}
