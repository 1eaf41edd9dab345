//! On-disk scene collections: one sub-directory per scene plus `dataset.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::seeded_rng;
use crate::scene::{generate_scene_set, read_pointmaps, read_scene_json, write_scene_dir, Pointmap, Scene, SceneError, SceneSetSpec};

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: SceneSetSpec,
    pub scenes: Vec<String>,
}

/// Generates a scene set from `seed` and writes it under `dir`.
pub fn write_dataset(dir: &Path, spec: &SceneSetSpec, seed: u64) -> Result<DatasetManifest, SceneError> {
    let scenes = generate_scene_set(spec, &mut seeded_rng(seed))?;
    fs::create_dir_all(dir)?;
    let res = (spec.image_height, spec.image_width);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        scenes.par_iter().try_for_each(|s| write_scene_dir(&dir.join(&s.name), s, res))?;
    }
    #[cfg(not(feature = "parallel"))]
    for s in &scenes {
        write_scene_dir(&dir.join(&s.name), s, res)?;
    }
    let manifest = DatasetManifest { seed, spec: spec.clone(), scenes: scenes.iter().map(|s| s.name.clone()).collect() };
    fs::write(dir.join(DATASET_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, SceneError> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(DATASET_FILE))?)?)
}

/// Every scene with its stored pointmaps, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(Scene, Vec<Pointmap>)>, SceneError> {
    read_manifest(dir)?
        .scenes
        .iter()
        .map(|name| {
            let sdir = dir.join(name);
            let scene = read_scene_json(&sdir)?;
            let pms = read_pointmaps(&sdir, scene.cameras.len())?;
            Ok((scene, pms))
        })
        .collect()
}
