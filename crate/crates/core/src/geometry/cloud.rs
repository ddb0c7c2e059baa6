use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Coordinates, per-point features and optional per-point class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    feats: Vec<f64>,
    channels: usize,
    labels: Option<Vec<usize>>,
    classes: usize,
}

impl PointCloud {
    pub fn new(
        coords: Vec<[f64; 3]>,
        feats: Vec<f64>,
        channels: usize,
        labels: Option<Vec<usize>>,
        classes: usize,
    ) -> Result<Self> {
        let n = coords.len();
        if n == 0 {
            return Err(Error::Argument("a point cloud needs at least one point".into()));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Data("non-finite coordinate".into()));
        }
        if channels == 0 || feats.len() != n * channels {
            return Err(Error::shape(format!("{} feature values for {n} points x {channels} channels", feats.len())));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape(format!("{} labels for {n} points", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&x| x >= classes) {
                return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(Self { coords, feats, channels, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feat_row(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn coords_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 3, self.coords.iter().flatten().copied().collect()).expect("n x 3")
    }

    pub fn feats_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.channels, self.feats.clone()).expect("n x c")
    }

    /// New cloud whose point `i` is point `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if !is_permutation(perm, self.len()) {
            return Err(Error::Argument("not a permutation of the point indices".into()));
        }
        let coords = perm.iter().map(|&j| self.coords[j]).collect();
        let feats = perm.iter().flat_map(|&j| self.feat_row(j).iter().copied()).collect();
        let labels = self.labels.as_ref().map(|l| perm.iter().map(|&j| l[j]).collect());
        Self::new(coords, feats, self.channels, labels, self.classes)
    }

    /// Sub-cloud of the listed points, in the listed order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let coords = idx.iter().map(|&j| self.coords[j]).collect();
        let feats = idx.iter().flat_map(|&j| self.feat_row(j).iter().copied()).collect();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&j| l[j]).collect());
        Self::new(coords, feats, self.channels, labels, self.classes)
    }

    /// Text form: a `#points n channels c classes C` header, then one
    /// `x y z f1 … fc label` line per point (label -1 when unannotated).
    /// Other lines starting with `#` are comments.
    pub fn to_text(&self) -> String {
        let mut out = format!("#points {} channels {} classes {}\n", self.len(), self.channels, self.classes);
        for i in 0..self.len() {
            let [x, y, z] = self.coords[i];
            let _ = write!(out, "{x} {y} {z}");
            for f in self.feat_row(i) {
                let _ = write!(out, " {f}");
            }
            match &self.labels {
                Some(l) => {
                    let _ = writeln!(out, " {}", l[i]);
                }
                None => out.push_str(" -1\n"),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !(l.starts_with('#') && !l.starts_with("#points")));
        let header = lines.next().ok_or_else(|| Error::parse("empty point cloud file"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let (n, c, classes) = match h[..] {
            ["#points", n, "channels", c, "classes", k] => (
                n.parse::<usize>().map_err(|_| Error::parse("bad point count"))?,
                c.parse::<usize>().map_err(|_| Error::parse("bad channel count"))?,
                k.parse::<usize>().map_err(|_| Error::parse("bad class count"))?,
            ),
            _ => return Err(Error::parse(format!("bad point cloud header `{header}`"))),
        };
        let mut coords = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * c);
        let mut labels = Vec::with_capacity(n);
        let mut annotated = None;
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 + c + 1 {
                return Err(Error::parse(format!("expected {} fields, got {}", 4 + c, fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(format!("bad number `{s}`")));
            coords.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
            for f in &fields[3..3 + c] {
                feats.push(num(f)?);
            }
            let label: i64 = fields[3 + c].parse().map_err(|_| Error::parse("bad label"))?;
            let has = label >= 0;
            if *annotated.get_or_insert(has) != has {
                return Err(Error::parse("mixed annotated and unannotated points"));
            }
            labels.push(label.max(0) as usize);
        }
        if coords.len() != n {
            return Err(Error::parse(format!("header says {n} points, found {}", coords.len())));
        }
        let labels = if annotated == Some(true) { Some(labels) } else { None };
        Self::new(coords, feats, c, labels, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}
