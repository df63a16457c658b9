use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSample, SplitTag};
use crate::augment::Image;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a binary P6 PPM with maxval 255.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(
        img.pixels()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        loop {
            match self.rest.first() {
                Some(c) if c.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self.rest.iter().position(|&c| c == b'\n').unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => return,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let end = self
            .rest
            .iter()
            .position(|c| !c.is_ascii_digit())
            .unwrap_or(self.rest.len());
        let n = std::str::from_utf8(&self.rest[..end]).ok()?.parse().ok()?;
        self.rest = &self.rest[end..];
        Some(n)
    }
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Ppm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if !bytes.starts_with(b"P6") {
        return Err(fail("not a binary P6 file"));
    }
    let mut h = Header { rest: &bytes[2..] };
    let (w, ht, maxval) = match (h.number(), h.number(), h.number()) {
        (Some(w), Some(ht), Some(m)) => (w, ht, m),
        _ => return Err(fail("malformed header")),
    };
    if maxval == 0 || maxval > 255 {
        return Err(fail("only maxval 1..=255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match h.rest.first() {
        Some(c) if c.is_ascii_whitespace() => {}
        _ => return Err(fail("missing raster separator")),
    }
    let raster = &h.rest[1..];
    let n = w * ht * 3;
    if raster.len() < n {
        return Err(fail("truncated raster"));
    }
    let pixels = raster[..n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(ht, w, pixels)
}

/// Parses `<id>_c<cam>_<seq>.ppm` into `(id, cam, seq)`.
pub fn parse_file_name(name: &str) -> Option<(usize, usize, usize)> {
    let stem = name.strip_suffix(".ppm")?;
    let mut parts = stem.split('_');
    let id = parts.next()?.parse().ok()?;
    let cam = parts.next()?.strip_prefix('c')?.parse().ok()?;
    let seq = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((id, cam, seq))
}

/// Loads every `.ppm` in `dir` in file-name order, tagged as training data.
pub fn load_ppm_dir(dir: &Path) -> Result<Dataset> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    let mut samples = Vec::new();
    for path in names {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some((identity, camera, _)) = parse_file_name(name) else {
            warn!("skipping {}: name is not <id>_c<cam>_<seq>.ppm", path.display());
            continue;
        };
        samples.push(ImageSample {
            image: read_ppm(&path)?,
            identity,
            camera,
        });
    }
    Ok(Dataset::new(samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Writes every sample as a PPM plus `manifest.json` with ids, cameras and tags.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seq = std::collections::HashMap::new();
    let mut entries = Vec::with_capacity(ds.len());
    for (s, &tag) in ds.samples.iter().zip(&ds.tags) {
        let k = seq.entry(s.identity).or_insert(0usize);
        let name = format!("{:04}_c{}_{:03}.ppm", s.identity, s.camera, *k);
        *k += 1;
        write_ppm(&dir.join(&name), &s.image)?;
        entries.push(ManifestEntry {
            path: name,
            identity: s.identity,
            camera: s.camera,
            split: tag,
        });
    }
    let manifest = Manifest { entries };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a directory written by [`write_dataset`], restoring the split tags.
pub fn load_manifest(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut tags = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        samples.push(ImageSample {
            image: read_ppm(&dir.join(&e.path))?,
            identity: e.identity,
            camera: e.camera,
        });
        tags.push(e.split);
    }
    Dataset::new(samples).with_tags(tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_name_rule() {
        assert_eq!(parse_file_name("0007_c2_001.ppm"), Some((7, 2, 1)));
        assert_eq!(parse_file_name("7_2_001.ppm"), None);
        assert_eq!(parse_file_name("0007_c2_001.png"), None);
        assert_eq!(parse_file_name("0007_c2_001_x.ppm"), None);
    }

    #[test]
    fn full_byte_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        fs::write(&p, bytes).unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.2]);
    }

    #[test]
    fn wrong_magic_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        fs::write(&p, b"P3\n1 1\n255\n0 0 0").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Ppm { .. })));
        let missing = dir.path().join("none.ppm");
        match read_ppm(&missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 17.0).collect();
        let img = Image::new(2, 3, pixels).unwrap();
        let p = dir.path().join("0001_c0_000.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn malformed_names_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(2, 2, [0.5; 3]);
        write_ppm(&dir.path().join("0003_c1_000.ppm"), &img).unwrap();
        write_ppm(&dir.path().join("junk.ppm"), &img).unwrap();
        let ds = load_ppm_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds.samples[0].identity, ds.samples[0].camera), (3, 1));
    }
}
