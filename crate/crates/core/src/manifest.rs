//! Corpus manifest: the delimited index of every tile a corpus
//! directory holds (path, class, stain group, split, anomaly flag,
//! per-tile seed).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four corpus splits. The string forms double as directory names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train-aux")]
    TrainAux,
    #[serde(rename = "train-target")]
    TrainTarget,
    #[serde(rename = "test-normal")]
    TestNormal,
    #[serde(rename = "test-anomalous")]
    TestAnomalous,
}

impl Split {
    pub const ALL: [Split; 4] =
        [Split::TrainAux, Split::TrainTarget, Split::TestNormal, Split::TestAnomalous];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainAux => "train-aux",
            Split::TrainTarget => "train-target",
            Split::TestNormal => "test-normal",
            Split::TestAnomalous => "test-anomalous",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::data(format!("unknown split name {s:?}")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One tile's manifest entry. `path` is relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: usize,
    pub stain_group: usize,
    pub split: Split,
    pub anomaly: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Manifest {
        Manifest { rows }
    }

    /// Duplicate paths would let one file claim two splits; reject them.
    pub fn validate(&self) -> Result<()> {
        let mut paths: Vec<&str> = self.rows.iter().map(|r| r.path.as_str()).collect();
        paths.sort_unstable();
        if let Some(w) = paths.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::data(format!("path {:?} appears in two manifest rows", w[0])));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io_err = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
            other => Error::data(format!("writing manifest {}: {other:?}", path.display())),
        };
        let mut w = csv::Writer::from_path(path)
            .map_err(io_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(io_err)?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
            other => Error::data(format!("opening manifest {}: {other:?}", path.display())),
        })?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let row: ManifestRow = rec.map_err(|e| {
                Error::data(format!("parsing manifest {}: {e}", path.display()))
            })?;
            rows.push(row);
        }
        let m = Manifest::new(rows);
        m.validate()?;
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn class_ids(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self.split(split).map(|r| r.class).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Loads every tile of one split from disk, in manifest order.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<LoadedTile>> {
        self.split(split)
            .map(|row| {
                Ok(LoadedTile {
                    image: crate::tile::ImageTile::load_png(&root.join(&row.path))?,
                    class: row.class,
                    anomaly: row.anomaly,
                    path: row.path.clone(),
                })
            })
            .collect()
    }
}

/// A manifest row joined with its decoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedTile {
    pub image: crate::tile::ImageTile,
    pub class: usize,
    pub anomaly: bool,
    pub path: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        let mut rows = Vec::new();
        for (i, &split) in Split::ALL.iter().enumerate() {
            for j in 0..3usize {
                rows.push(ManifestRow {
                    path: format!("{split}/c{j}_{i}.png"),
                    class: j,
                    stain_group: j / 2,
                    split,
                    anomaly: split == Split::TestAnomalous,
                    seed: (i * 100 + j) as u64,
                });
            }
        }
        Manifest::new(rows)
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(Split::parse(s.as_str()).unwrap(), s);
        }
        assert!(matches!(Split::parse("validation"), Err(Error::Data(_))));
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = sample();
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(m, back);

        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "path,class,stain_group,split,anomaly,seed");
        assert!(text.contains("train-aux"));
        assert!(text.contains("true"));
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut m = sample();
        let dup = m.rows[0].clone();
        m.rows.push(ManifestRow { split: Split::TestNormal, ..dup });
        assert!(matches!(m.validate(), Err(Error::Data(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let mut w = csv::Writer::from_path(&path).unwrap();
        for row in &m.rows {
            w.serialize(row).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        assert!(Manifest::read(&path).is_err(), "read re-validates");
    }

    #[test]
    fn malformed_rows_error_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "path,class,stain_group,split,anomaly,seed\na.png,0,0,holdout,false,1\n",
        )
        .unwrap();
        let err = Manifest::read(&path).unwrap_err();
        assert!(err.to_string().contains("manifest"), "error names the file: {err}");
    }

    #[test]
    fn split_queries_filter_and_dedup() {
        let m = sample();
        assert_eq!(m.split(Split::TrainAux).count(), 3);
        assert_eq!(m.class_ids(Split::TrainAux), vec![0, 1, 2]);
        assert!(m
            .split(Split::TestAnomalous)
            .all(|r| r.anomaly && r.split == Split::TestAnomalous));
    }
}
