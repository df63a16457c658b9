//! Synthetic color-confounded identity data, the train/query/gallery split,
//! and PPM ingestion.
//!
//! Identity is carried by stripe texture and camera by a strong color tint,
//! so raw color statistics group images by camera while grayscale keeps the
//! identity signal.

mod ppm;
mod synthetic;

pub use ppm::{
    load_manifest, load_ppm_dir, parse_file_name, read_ppm, write_dataset, write_ppm, Manifest, ManifestEntry,
    MANIFEST_FILE,
};
pub use synthetic::{camera_tints, generate, identity_textures, IdentityTexture, Stripes, SyntheticSpec};

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Image,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Query,
    Gallery,
    /// Evaluation identity seen by a single camera; unused.
    Excluded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub tags: Vec<SplitTag>,
}

impl Dataset {
    /// All samples tagged as training data.
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let tags = vec![SplitTag::Train; samples.len()];
        Dataset { samples, tags }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_tags(mut self, tags: Vec<SplitTag>) -> Result<Self> {
        if tags.len() != self.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "{} split tags for {} samples",
                tags.len(),
                self.samples.len()
            )));
        }
        self.tags = tags;
        Ok(self)
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    pub fn images(&self, indices: &[usize]) -> Vec<&Image> {
        indices.iter().map(|&i| &self.samples[i].image).collect()
    }
}

/// Half of the identities (rounded down) train; the rest are evaluated. For
/// each evaluation identity one image per camera becomes a query, provided a
/// gallery image of the same identity from another camera remains.
pub fn split(dataset: &Dataset, rng: &mut Rng) -> Result<Vec<SplitTag>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_id.entry(s.identity).or_default().push(i);
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("split needs at least two identities".into()));
    }
    ids.shuffle(rng);
    let n_train = ids.len() / 2;

    let mut tags = vec![SplitTag::Train; dataset.len()];
    for &id in &ids[n_train..] {
        let members = &by_id[&id];
        let cams: BTreeSet<usize> = members.iter().map(|&i| dataset.samples[i].camera).collect();
        if cams.len() < 2 {
            warn!("identity {id} is seen by a single camera; excluded from evaluation");
            for &i in members {
                tags[i] = SplitTag::Excluded;
            }
            continue;
        }
        for &i in members {
            tags[i] = SplitTag::Gallery;
        }
        let mut queries = Vec::new();
        for &cam in &cams {
            let in_cam: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| dataset.samples[i].camera == cam)
                .collect();
            let &q = in_cam.choose(rng).expect("camera has members");
            tags[q] = SplitTag::Query;
            queries.push(q);
        }
        // A query needs a cross-camera gallery match; otherwise it stays in the gallery.
        for q in queries {
            let cam = dataset.samples[q].camera;
            let matched = members
                .iter()
                .any(|&j| tags[j] == SplitTag::Gallery && dataset.samples[j].camera != cam);
            if !matched {
                tags[q] = SplitTag::Gallery;
            }
        }
    }
    Ok(tags)
}

/// Generates `spec` and splits it with a stream derived from `spec.seed`.
pub fn generate_split(spec: &SyntheticSpec) -> Result<Dataset> {
    let ds = generate(spec)?;
    let tags = split(&ds, &mut crate::rng::seeded(crate::rng::derive(spec.seed, 4)))?;
    ds.with_tags(tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn default_split(seed: u64) -> (Dataset, Vec<SplitTag>) {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let tags = split(&ds, &mut seeded(seed)).unwrap();
        (ds, tags)
    }

    #[test]
    fn half_of_identities_train() {
        let (ds, tags) = default_split(3);
        let train: BTreeSet<usize> = (0..ds.len())
            .filter(|&i| tags[i] == SplitTag::Train)
            .map(|i| ds.samples[i].identity)
            .collect();
        let eval: BTreeSet<usize> = (0..ds.len())
            .filter(|&i| tags[i] != SplitTag::Train)
            .map(|i| ds.samples[i].identity)
            .collect();
        assert_eq!((train.len(), eval.len()), (10, 10));
        assert!(train.is_disjoint(&eval));
    }

    #[test]
    fn every_query_has_a_cross_camera_match() {
        let (ds, tags) = default_split(4);
        let queries: Vec<usize> = (0..ds.len()).filter(|&i| tags[i] == SplitTag::Query).collect();
        assert_eq!(queries.len(), 30);
        for q in queries {
            let s = &ds.samples[q];
            assert!((0..ds.len()).any(|j| tags[j] == SplitTag::Gallery
                && ds.samples[j].identity == s.identity
                && ds.samples[j].camera != s.camera));
        }
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(default_split(9).1, default_split(9).1);
    }

    #[test]
    fn single_camera_identity_is_excluded() {
        let img = Image::filled(4, 4, [0.5; 3]);
        let sample = |identity, camera| ImageSample {
            image: img.clone(),
            identity,
            camera,
        };
        let ds = Dataset::new(vec![sample(0, 0), sample(0, 0), sample(1, 0), sample(1, 0)]);
        let tags = split(&ds, &mut seeded(0)).unwrap();
        assert_eq!(tags.iter().filter(|&&t| t == SplitTag::Train).count(), 2);
        assert_eq!(tags.iter().filter(|&&t| t == SplitTag::Excluded).count(), 2);
    }

    fn mean_color(img: &Image) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in img.pixels().chunks(3) {
            for c in 0..3 {
                m[c] += p[c];
            }
        }
        let n = (img.pixels().len() / 3) as f64;
        m.map(|v| v / n)
    }

    #[test]
    fn raw_color_groups_by_camera_and_gray_texture_by_identity() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let colors: Vec<[f64; 3]> = ds.samples.iter().map(|s| mean_color(&s.image)).collect();
        let gray: Vec<Vec<f64>> = ds
            .samples
            .iter()
            .map(|s| crate::augment::to_grayscale(&s.image).pixels().to_vec())
            .collect();
        let nn = |d: &dyn Fn(usize, usize) -> f64, i: usize| {
            (0..ds.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| d(i, a).total_cmp(&d(i, b)))
                .unwrap()
        };
        let color_d = |i: usize, j: usize| (0..3).map(|c| (colors[i][c] - colors[j][c]).powi(2)).sum::<f64>();
        let gray_d = |i: usize, j: usize| gray[i].iter().zip(&gray[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let (mut cam_hits, mut id_hits, mut gray_id_hits) = (0, 0, 0);
        for i in 0..ds.len() {
            let j = nn(&color_d, i);
            cam_hits += (ds.samples[j].camera == ds.samples[i].camera) as usize;
            id_hits += (ds.samples[j].identity == ds.samples[i].identity) as usize;
            let j = nn(&gray_d, i);
            gray_id_hits += (ds.samples[j].identity == ds.samples[i].identity) as usize;
        }
        assert!(cam_hits > id_hits, "camera {cam_hits} identity {id_hits}");
        assert!(gray_id_hits > ds.len() / 2, "gray identity hits {gray_id_hits}");
    }
}
