//! Dataset directories: cloud files plus a `manifest.txt` index.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gemlab::geometry::{generate_scene, PointCloud, SceneSpec};
use gemlab::{Error, Result};
use rand::RngCore;

pub const MANIFEST: &str = "manifest.txt";

/// Generates `count` scenes into `out` and writes the manifest. Scene `i`
/// uses the `i`-th draw of the `data` stream of `seed`.
pub fn generate(spec: &SceneSpec, out: &Path, count: usize, seed: u64, command: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut stream = gemlab::rng::stream(seed, "data");
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# command: {command}");
    let _ = writeln!(manifest, "# created_unix: {stamp}");
    let _ = writeln!(manifest, "spec_hash={}", spec.hash());
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "count={count}");
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = stream.next_u64();
        let cloud = generate_scene(scene_seed, spec)?;
        let name = format!("cloud_{i:04}.txt");
        let text = format!("{}# command: {command}\n# spec_hash: {}\n", cloud.to_text(), spec.hash());
        let path = out.join(&name);
        std::fs::write(&path, text)?;
        let _ = writeln!(manifest, "file={name} seed={scene_seed}");
        paths.push(path);
    }
    std::fs::write(out.join(MANIFEST), manifest)?;
    Ok(paths)
}

/// Loads every cloud listed in the manifest of `dir`, in manifest order.
pub fn load_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Data(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let clouds = manifest
        .lines()
        .filter_map(|l| l.split_whitespace().find_map(|t| t.strip_prefix("file=")))
        .map(|name| PointCloud::load(dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    if clouds.is_empty() {
        return Err(Error::Data(format!("dataset {} lists no clouds", dir.display())));
    }
    Ok(clouds)
}

/// Loads a dataset directory or a single cloud file.
pub fn load_any(path: &Path) -> Result<Vec<PointCloud>> {
    if path.is_dir() {
        load_dir(path)
    } else {
        Ok(vec![PointCloud::load(path)?])
    }
}
