use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Principal axes of a point cloud and its coordinates along them.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// One unit-norm row per component.
    pub components: Array2<f64>,
    /// Share of total variance per component, descending.
    pub explained_ratio: Vec<f64>,
    /// `n x components`.
    pub coords: Array2<f64>,
    /// Set when fewer components than requested carry variance.
    pub warning: Option<String>,
}

/// Eigendecomposition of the sample covariance. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_fit(data: &Array2<f64>, components: usize) -> Result<Pca> {
    let (n, d) = data.dim();
    if components == 0 || components > d {
        return Err(Error::Contract(format!(
            "requested {components} components of a {d}-dimensional space"
        )));
    }
    if n < components {
        return Err(Error::Contract(format!(
            "{n} vectors cannot span {components} components"
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "pca input".into(),
        });
    }
    let mean = data.mean_axis(Axis(0)).expect("n >= 1");
    let centered = data - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let cov = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();

    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let supported = values.iter().filter(|&&v| v > tol).count();
    let (kept, warning) = if supported < components {
        let kept = supported.max(1);
        (
            kept,
            Some(format!(
                "data supports only {supported} of {components} requested components"
            )),
        )
    } else {
        (components, None)
    };

    let mut comps = Array2::zeros((kept, d));
    for (c, &idx) in order.iter().take(kept).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            comps[[c, j]] = sign * col[j];
        }
    }
    let coords = centered.dot(&comps.t());
    let explained_ratio = values
        .iter()
        .take(kept)
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(Pca {
        mean,
        components: comps,
        explained_ratio,
        coords,
        warning,
    })
}

/// L2-normalizes each vector, then fits.
pub fn pca_embed(vectors: &[Array1<f64>], components: usize) -> Result<Pca> {
    let d = vectors
        .first()
        .map(|v| v.len())
        .ok_or_else(|| Error::Contract("no vectors to embed".into()))?;
    let mut data = Array2::zeros((vectors.len(), d));
    for (mut row, v) in data.rows_mut().into_iter().zip(vectors) {
        if v.len() != d {
            return Err(Error::Shape(format!(
                "vector of dim {} among dim {d}",
                v.len()
            )));
        }
        let norm = v.dot(v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateVector { norm, floor: 0.0 });
        }
        row.assign(&(v / norm));
    }
    pca_fit(&data, components)
}
