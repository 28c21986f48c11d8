//! Training-triple datasets on disk.
//!
//! Layout: `data/<split>/<index>.{mask,path,healthy}.ubt` plus a JSON
//! manifest recording counts, the generating specs, and the base seed.
//! Each triple satisfies `pathological = embed_lesion(healthy, mask, ...)`
//! by construction, so the healthy image is the exact ground truth for
//! lesion-free pixels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::field::{BinaryMask, Field};
use crate::parallel::par_map_indexed;
use crate::phantom::{self, LesionSpec, PhantomSpec};
use crate::rng::Stream;
use crate::ubt;
use crate::{Error, Result};

/// One pseudo-pathological training case.
#[derive(Clone, Debug)]
pub struct Triple {
    pub mask: BinaryMask,
    pub pathological: Field,
    pub healthy: Field,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub count: usize,
    pub base_seed: u64,
    pub phantom: PhantomSpec,
    pub lesion: LesionSpec,
}

/// Generates `count` triples; item `i` uses substream `i` of `base`, with
/// fixed inner substreams for phantom, mask, and embedding.
pub fn build_triples(
    phantom_spec: &PhantomSpec,
    lesion_spec: &LesionSpec,
    count: usize,
    base: &Stream,
) -> Result<Vec<Triple>> {
    phantom_spec.validate()?;
    let results = par_map_indexed(count, |i| {
        let item = base.substream(i as u64);
        let (healthy, interior) =
            phantom::generate_healthy_with_interior(phantom_spec, &mut item.substream(0));
        let mask = phantom::generate_lesion_mask(lesion_spec, &interior, &mut item.substream(1));
        let pathological = phantom::embed_lesion(&healthy, &mask, lesion_spec, &mut item.substream(2))
            .expect("shapes agree by construction");
        Triple {
            mask,
            pathological,
            healthy,
        }
    });
    Ok(results)
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes triples and the manifest under `root/<split>/`.
pub fn write_dataset(
    root: &Path,
    split: &str,
    triples: &[Triple],
    manifest: &DatasetManifest,
) -> Result<()> {
    let dir = split_dir(root, split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, t) in triples.iter().enumerate() {
        ubt::save_field(&dir.join(format!("{i}.mask.ubt")), &t.mask.to_field01())?;
        ubt::save_field(&dir.join(format!("{i}.path.ubt")), &t.pathological)?;
        ubt::save_field(&dir.join(format!("{i}.healthy.ubt")), &t.healthy)?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(root: &Path, split: &str) -> Result<DatasetManifest> {
    let path = split_dir(root, split).join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<Triple>> {
    let manifest = read_manifest(root, split)?;
    let dir = split_dir(root, split);
    let mut triples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let mask_field = ubt::load_field(&dir.join(format!("{i}.mask.ubt")))?;
        let pathological = ubt::load_field(&dir.join(format!("{i}.path.ubt")))?;
        let healthy = ubt::load_field(&dir.join(format!("{i}.healthy.ubt")))?;
        triples.push(Triple {
            mask: mask_field.binarize(0.5),
            pathological,
            healthy,
        });
    }
    Ok(triples)
}

/// Convenience wrapper: generate and persist one split.
pub fn generate_split(
    root: &Path,
    split: &str,
    phantom_spec: &PhantomSpec,
    lesion_spec: &LesionSpec,
    count: usize,
    base_seed: u64,
) -> Result<Vec<Triple>> {
    let base = Stream::new(base_seed);
    let triples = build_triples(phantom_spec, lesion_spec, count, &base)?;
    let manifest = DatasetManifest {
        count,
        base_seed,
        phantom: phantom_spec.clone(),
        lesion: lesion_spec.clone(),
    };
    write_dataset(root, split, &triples, &manifest)?;
    Ok(triples)
}
