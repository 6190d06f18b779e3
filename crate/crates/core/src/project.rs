//! Two-dimensional PCA projection of one or more domains, for eyeballing
//! cluster overlap between source and target.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainTag};
use crate::error::{Error, Result};
use crate::model::BackendModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Array1<f64>,
    /// 2×D, rows are unit principal directions in decreasing variance order.
    pub components: Array2<f64>,
    pub explained_variance: [f64; 2],
}

impl Pca2 {
    /// Fits on the rows of `x`. When D < 2 the missing component is zero.
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::Degenerate("PCA needs a non-empty matrix".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let centered = &x - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut components = Array2::zeros((2, d));
        let mut explained_variance = [0.0; 2];
        for (r, &k) in order.iter().take(2).enumerate() {
            let v = eig.eigenvectors.column(k);
            let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[[r, j]] = sign * v[j];
            }
            explained_variance[r] = eig.eigenvalues[k].max(0.0);
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "width {} but PCA was fit on {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        Ok((&x - &self.mean).dot(&self.components.t()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedRow {
    pub x: f64,
    pub y: f64,
    pub domain: DomainTag,
    pub label: Option<usize>,
}

/// Projects the union of `datasets` with a PCA fit on that union. With a
/// model, the projected features are its length-normalized latents.
pub fn project_datasets(datasets: &[&Dataset], model: Option<&BackendModel>) -> Result<Vec<ProjectedRow>> {
    if datasets.is_empty() {
        return Err(Error::Degenerate("nothing to project".into()));
    }
    let features: Vec<Array2<f64>> = datasets
        .iter()
        .map(|ds| match model {
            Some(m) => m.forward(ds.to_f64().view()).map(|t| t.latent),
            None => Ok(ds.to_f64()),
        })
        .collect::<Result<_>>()?;
    let width = features[0].ncols();
    if features.iter().any(|f| f.ncols() != width) {
        return Err(Error::Shape("datasets have different widths".into()));
    }
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let all = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let pca = Pca2::fit(all.view())?;
    let coords = pca.transform(all.view())?;

    let mut rows = Vec::with_capacity(coords.nrows());
    let mut offset = 0;
    for ds in datasets {
        let labels = ds.labels();
        for i in 0..ds.len() {
            rows.push(ProjectedRow {
                x: coords[[offset + i, 0]],
                y: coords[[offset + i, 1]],
                domain: ds.domain(),
                label: labels.map(|l| l[i]),
            });
        }
        offset += ds.len();
    }
    Ok(rows)
}

/// CSV with header `x,y,domain,label`.
pub fn projection_csv(rows: &[ProjectedRow]) -> String {
    let mut out = String::from("x,y,domain,label\n");
    for r in rows {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.x, r.y, r.domain, label));
    }
    out
}

/// Mean distance between the source and target centroids of each class
/// present in both domains.
pub fn mean_same_class_centroid_distance(rows: &[ProjectedRow]) -> Option<f64> {
    let mut sums: BTreeMap<(usize, DomainTag), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let Some(label) = r.label else { continue };
        let key = (label, r.domain);
        let e = sums.entry(key).or_insert((0.0, 0.0, 0));
        e.0 += r.x;
        e.1 += r.y;
        e.2 += 1;
    }
    let centroid = |k| sums.get(&k).map(|&(x, y, n)| (x / n as f64, y / n as f64));
    let labels: BTreeSet<usize> = sums.keys().map(|(l, _)| *l).collect();
    let mut distances = Vec::new();
    for label in labels {
        if let (Some(a), Some(b)) = (
            centroid((label, DomainTag::Source)),
            centroid((label, DomainTag::Target)),
        ) {
            distances.push(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
        }
    }
    (!distances.is_empty()).then(|| distances.iter().sum::<f64>() / distances.len() as f64)
}
