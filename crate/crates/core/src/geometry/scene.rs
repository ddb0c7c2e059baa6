//! Synthetic labeled indoor scenes built from geometric primitives.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config_text::digest;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng;

/// Feature channels of generated clouds: xyz plus an estimated normal.
pub const SCENE_CHANNELS: usize = 6;

const NORMAL_NEIGHBORS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Floor,
    Wall,
    Box,
    Sphere,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneClass {
    pub primitive: Primitive,
    pub label: usize,
    pub points: usize,
}

/// Primitive mix, point budgets, noise and scale of a scene distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub classes: Vec<SceneClass>,
    pub noise_sigma: f64,
    pub scale: f64,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Budget {
    Each(usize),
    PerClass(Vec<usize>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    classes: Vec<Primitive>,
    points_per_class: Budget,
    noise_sigma: f64,
    #[serde(default)]
    seed: u64,
    scale: Option<f64>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl SceneSpec {
    /// Primitives labeled by their position in `classes`.
    pub fn new(classes: &[(Primitive, usize)], noise_sigma: f64, scale: f64, seed: u64) -> Self {
        let classes: Vec<SceneClass> = classes
            .iter()
            .enumerate()
            .map(|(label, &(primitive, points))| SceneClass { primitive, label, points })
            .collect();
        let num_classes = classes.len();
        Self { classes, noise_sigma, scale, num_classes, seed }
    }

    /// Source distribution: floor, wall and box, low noise, unit scale.
    pub fn source(points_per_class: [usize; 3], seed: u64) -> Self {
        Self::new(
            &[
                (Primitive::Floor, points_per_class[0]),
                (Primitive::Wall, points_per_class[1]),
                (Primitive::Box, points_per_class[2]),
            ],
            0.01,
            1.0,
            seed,
        )
    }

    /// Shifted target distribution: spheres join the object class, noise
    /// triples and the scene is scaled by 1.5.
    pub fn target(points_per_class: [usize; 4], seed: u64) -> Self {
        let mut spec = Self::new(
            &[
                (Primitive::Floor, points_per_class[0]),
                (Primitive::Wall, points_per_class[1]),
                (Primitive::Box, points_per_class[2]),
                (Primitive::Sphere, points_per_class[3]),
            ],
            0.03,
            1.5,
            seed,
        );
        spec.classes[3].label = 2;
        spec.num_classes = 3;
        spec
    }

    /// Parses the TOML scene-spec format:
    ///
    /// ```toml
    /// classes = ["floor", "wall", "box", "sphere"]
    /// points_per_class = [64, 64, 48, 48]   # or a single integer
    /// noise_sigma = 0.03
    /// seed = 7
    /// scale = 1.5          # optional, default 1
    /// labels = [0, 1, 2, 2] # optional, default = position
    /// num_classes = 3       # optional, default = max label + 1
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.classes.is_empty() {
            return Err(Error::Argument("scene spec lists no classes".into()));
        }
        let points = match raw.points_per_class {
            Budget::Each(p) => vec![p; raw.classes.len()],
            Budget::PerClass(v) => v,
        };
        if points.len() != raw.classes.len() {
            return Err(Error::Config("points_per_class must match classes".into()));
        }
        let labels = raw.labels.unwrap_or_else(|| (0..raw.classes.len()).collect());
        if labels.len() != raw.classes.len() {
            return Err(Error::Config("labels must match classes".into()));
        }
        let num_classes = raw.num_classes.unwrap_or(labels.iter().max().map_or(0, |m| m + 1));
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Config("label outside num_classes".into()));
        }
        let classes = raw
            .classes
            .iter()
            .zip(&points)
            .zip(&labels)
            .map(|((&primitive, &points), &label)| SceneClass { primitive, label, points })
            .collect();
        let spec = Self {
            classes,
            noise_sigma: raw.noise_sigma,
            scale: raw.scale.unwrap_or(1.0),
            num_classes,
            seed: raw.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let names: Vec<String> = self
            .classes
            .iter()
            .map(|c| format!("\"{}\"", format!("{:?}", c.primitive).to_lowercase()))
            .collect();
        let pts: Vec<String> = self.classes.iter().map(|c| c.points.to_string()).collect();
        let labels: Vec<String> = self.classes.iter().map(|c| c.label.to_string()).collect();
        format!(
            "classes = [{}]\npoints_per_class = [{}]\nnoise_sigma = {:?}\nseed = {}\nscale = {:?}\nlabels = [{}]\nnum_classes = {}\n",
            names.join(", "),
            pts.join(", "),
            self.noise_sigma,
            self.seed,
            self.scale,
            labels.join(", "),
            self.num_classes
        )
    }

    pub fn hash(&self) -> String {
        digest(&self.to_toml())
    }

    pub fn total_points(&self) -> usize {
        self.classes.iter().map(|c| c.points).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.total_points() == 0 {
            return Err(Error::Argument("scene spec generates no points".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Argument("noise_sigma must be finite and non-negative".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Argument("scale must be positive".into()));
        }
        if self.classes.iter().any(|c| c.label >= self.num_classes) {
            return Err(Error::Argument("label outside num_classes".into()));
        }
        Ok(())
    }
}

struct Aabb {
    min: [f64; 3],
    size: [f64; 3],
}

struct Ball {
    center: [f64; 3],
    radius: f64,
}

/// Room layout at unit scale; sampled before any points so the layout of
/// a seed does not depend on which primitives the spec requests.
struct Layout {
    extent: [f64; 2],
    height: f64,
    boxes: Vec<Aabb>,
    balls: Vec<Ball>,
}

impl Layout {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let extent = [rng.random_range(1.6..2.4), rng.random_range(1.6..2.4)];
        let height = rng.random_range(0.8..1.2);
        let nb = rng.random_range(1..=2);
        let boxes = (0..nb)
            .map(|_| {
                let size = [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.2..0.6)];
                let min = [
                    rng.random_range(0.2..extent[0] - 0.2 - size[0]),
                    rng.random_range(0.2..extent[1] - 0.2 - size[1]),
                    0.0,
                ];
                Aabb { min, size }
            })
            .collect();
        let ns = rng.random_range(1..=2);
        let balls = (0..ns)
            .map(|_| {
                let radius: f64 = rng.random_range(0.12..0.3);
                let center = [
                    rng.random_range(radius + 0.2..extent[0] - radius - 0.2),
                    rng.random_range(radius + 0.2..extent[1] - radius - 0.2),
                    radius,
                ];
                Ball { center, radius }
            })
            .collect();
        Self { extent, height, boxes, balls }
    }

    fn sample_point(&self, prim: Primitive, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let [lx, ly] = self.extent;
        match prim {
            Primitive::Floor => [rng.random_range(0.0..lx), rng.random_range(0.0..ly), 0.0],
            Primitive::Wall => {
                let t = rng.random_range(0.0..2.0 * (lx + ly));
                let z = rng.random_range(0.0..self.height);
                if t < lx {
                    [t, 0.0, z]
                } else if t < lx + ly {
                    [lx, t - lx, z]
                } else if t < 2.0 * lx + ly {
                    [t - lx - ly, ly, z]
                } else {
                    [0.0, t - 2.0 * lx - ly, z]
                }
            }
            Primitive::Box => {
                let b = &self.boxes[rng.random_range(0..self.boxes.len())];
                let [sx, sy, sz] = b.size;
                // top, then the four sides; the bottom rests on the floor
                let areas = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
                let mut t = rng.random_range(0.0..areas.iter().sum::<f64>());
                let mut face = 0;
                while t >= areas[face] && face < 4 {
                    t -= areas[face];
                    face += 1;
                }
                let (u, v): (f64, f64) = (rng.random(), rng.random());
                let local = match face {
                    0 => [u * sx, v * sy, sz],
                    1 => [u * sx, 0.0, v * sz],
                    2 => [u * sx, sy, v * sz],
                    3 => [0.0, u * sy, v * sz],
                    _ => [sx, u * sy, v * sz],
                };
                [b.min[0] + local[0], b.min[1] + local[1], b.min[2] + local[2]]
            }
            Primitive::Sphere => {
                let s = &self.balls[rng.random_range(0..self.balls.len())];
                let mut d: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                for c in &mut d {
                    *c /= norm;
                }
                [
                    s.center[0] + s.radius * d[0],
                    s.center[1] + s.radius * d[1],
                    s.center[2] + s.radius * d[2],
                ]
            }
        }
    }
}

/// Generates one labeled scene. Deterministic in `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "scene");
    let layout = Layout::sample(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut coords = Vec::with_capacity(spec.total_points());
    let mut labels = Vec::with_capacity(spec.total_points());
    for class in &spec.classes {
        for _ in 0..class.points {
            let p = layout.sample_point(class.primitive, &mut rng);
            let mut q = [0.0; 3];
            for (dst, v) in q.iter_mut().zip(p) {
                *dst = v * spec.scale + noise.sample(&mut rng);
            }
            coords.push(q);
            labels.push(class.label);
        }
    }
    // Shuffle so that file order carries no label information.
    for i in (1..coords.len()).rev() {
        let j = rng.random_range(0..=i);
        coords.swap(i, j);
        labels.swap(i, j);
    }
    let normals = estimate_normals(&coords, NORMAL_NEIGHBORS);
    let feats = coords
        .iter()
        .zip(&normals)
        .flat_map(|(p, nrm)| p.iter().chain(nrm.iter()).copied().collect::<Vec<_>>())
        .collect();
    PointCloud::new(coords, feats, SCENE_CHANNELS, Some(labels), spec.num_classes)
}

/// Unit normals from the smallest-eigenvalue eigenvector of the local
/// covariance of the `k` nearest points (brute force). Signs are fixed by
/// making the largest-magnitude component positive.
pub fn estimate_normals(coords: &[[f64; 3]], k: usize) -> Vec<[f64; 3]> {
    let n = coords.len();
    let mut out = Vec::with_capacity(n);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in coords {
        dists.clear();
        dists.extend(coords.iter().enumerate().map(|(j, q)| {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            (d, j)
        }));
        let take = k.min(n);
        if take < 3 {
            out.push([0.0, 0.0, 1.0]);
            continue;
        }
        dists.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nbrs = &dists[..take];
        let mut mean = [0.0; 3];
        for &(_, j) in nbrs {
            for a in 0..3 {
                mean[a] += coords[j][a] / take as f64;
            }
        }
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        for &(_, j) in nbrs {
            let d = nalgebra::Vector3::new(coords[j][0] - mean[0], coords[j][1] - mean[1], coords[j][2] - mean[2]);
            cov += d * d.transpose();
        }
        let eig = cov.symmetric_eigen();
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("three eigenvalues");
        let v = eig.eigenvectors.column(imin);
        let mut nrm = [v[0], v[1], v[2]];
        let big = (0..3).max_by(|&a, &b| nrm[a].abs().total_cmp(&nrm[b].abs())).expect("3 axes");
        if nrm[big] < 0.0 {
            nrm.iter_mut().for_each(|c| *c = -*c);
        }
        out.push(nrm);
    }
    out
}
