//! Reading trained adapters: per-component importance, task similarity and
//! a two-dimensional map of tasks.
//!
//! A component's importance is the Frobenius norm of its effective update
//! `(α/r)·B·A`; a layer's importance is the sum over its sites. Task
//! similarity is the Pearson correlation between flattened adapter sets,
//! turned into the distance `1 − ρ` and embedded with classical MDS.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{ComponentId, LoraAdapterSet};
use crate::model::Site;
use crate::tensor::Scalar;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// One score per component, layer-major in site order.
    pub scores: Vec<(ComponentId, f64)>,
    pub layer_scores: Vec<f64>,
    pub peak_layer: usize,
}

impl ImportanceReport {
    pub fn score(&self, layer: usize, site: Site) -> f64 {
        self.scores[ComponentId::new(layer, site).flat_index()].1
    }

    /// Components sorted by descending score; ties keep layer then site
    /// order.
    pub fn ranked(&self) -> Vec<(ComponentId, f64)> {
        let mut out = self.scores.clone();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
        w.write_record(["layer", "site", "score"]).map_err(err)?;
        for (c, s) in &self.scores {
            w.write_record([
                c.layer.to_string(),
                c.site.name().to_string(),
                format!("{s:.9e}"),
            ])
            .map_err(err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv: {e}")))
    }

    /// Bar chart of the per-layer aggregate, peak layer highlighted.
    pub fn to_svg(&self, title: &str) -> String {
        let n = self.layer_scores.len().max(1);
        let (w, h, pad) = (60.0 * n as f64 + 80.0, 260.0, 40.0);
        let max = self.layer_scores.iter().cloned().fold(0.0, f64::max);
        let mut s = svg_open(w, h, title);
        for (i, &v) in self.layer_scores.iter().enumerate() {
            let bh = if max > 0.0 {
                v / max * (h - 2.0 * pad - 20.0)
            } else {
                0.0
            };
            let x = pad + 60.0 * i as f64;
            let y = h - pad - bh;
            let fill = if i == self.peak_layer {
                "#c0392b"
            } else {
                "#2c7fb8"
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="40" height="{bh:.1}" fill="{fill}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">L{i}</text>"#,
                x + 20.0,
                h - pad + 14.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.3}</text>"#,
                x + 20.0,
                y - 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Per-component `‖(α/r)·B·A‖_F` with layer sums and the peak layer
/// (smallest index on ties).
pub fn layer_importance<T: Scalar>(adapters: &LoraAdapterSet<T>) -> ImportanceReport {
    let scale = adapters.scale();
    let scores: Vec<(ComponentId, f64)> = adapters
        .sites()
        .iter()
        .map(|s| {
            (
                s.id(),
                scale * product_frobenius(s.b.data(), s.a.data(), adapters.rank()),
            )
        })
        .collect();
    let n_layers = adapters.dims().n_layers;
    let mut layer_scores = vec![0.0; n_layers];
    for (c, v) in &scores {
        layer_scores[c.layer] += v;
    }
    let peak_layer = argmax_first(&layer_scores);
    ImportanceReport {
        scores,
        layer_scores,
        peak_layer,
    }
}

/// `‖B·A‖_F` through the `r × r` Gram matrices, `tr((BᵀB)(AAᵀ))`, so the
/// product is never materialized.
fn product_frobenius<T: Scalar>(b: &[T], a: &[T], r: usize) -> f64 {
    let d_out = b.len() / r;
    let d_in = a.len() / r;
    let mut btb = vec![0.0; r * r];
    let mut aat = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            btb[i * r + j] = (0..d_out)
                .map(|o| b[o * r + i].as_f64() * b[o * r + j].as_f64())
                .sum();
            aat[i * r + j] = (0..d_in)
                .map(|k| a[i * d_in + k].as_f64() * a[j * d_in + k].as_f64())
                .sum();
        }
    }
    let tr: f64 = (0..r)
        .flat_map(|i| (0..r).map(move |j| (i, j)))
        .map(|(i, j)| btb[i * r + j] * aat[j * r + i])
        .sum();
    tr.max(0.0).sqrt()
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Pearson correlation, accumulated in a single streaming pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Config(format!(
            "cannot correlate vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(
            "correlation needs at least two entries".into(),
        ));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate(
            "correlation of a constant vector is undefined".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub names: Vec<String>,
    pub rho: Matrix,
}

impl SimilarityMatrix {
    /// `1 − ρ`, zero on the diagonal.
    pub fn distances(&self) -> Matrix {
        self.rho
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, r)| if i == j { 0.0 } else { 1.0 - r })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        matrix_csv(&self.names, &self.rho)
    }
}

pub fn matrix_csv(names: &[String], m: &Matrix) -> Result<Vec<u8>> {
    let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["task".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for (n, row) in names.iter().zip(m) {
        let mut rec = vec![n.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.9}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv: {e}")))
}

/// Pairwise correlations of already flattened vectors.
pub fn similarity_from_vectors(names: &[String], vectors: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    if vectors.len() < 2 || names.len() != vectors.len() {
        return Err(Error::Input(
            "similarity needs at least two named vectors".into(),
        ));
    }
    let n = vectors.len();
    let mut rho = vec![vec![1.0; n]; n];
    for i in 0..n {
        // self-correlation is 1 by definition but a constant vector is still
        // rejected
        pearson(&vectors[i], &vectors[i])?;
        for j in i + 1..n {
            let r = pearson(&vectors[i], &vectors[j])?;
            rho[i][j] = r;
            rho[j][i] = r;
        }
    }
    Ok(SimilarityMatrix {
        names: names.to_vec(),
        rho,
    })
}

/// Correlates the flattened adapter sets of several tasks.
pub fn task_similarity<T: Scalar>(sets: &[(&str, &LoraAdapterSet<T>)]) -> Result<SimilarityMatrix> {
    let names: Vec<String> = sets.iter().map(|(n, _)| n.to_string()).collect();
    let vectors: Vec<Vec<f64>> = sets
        .iter()
        .map(|(_, a)| a.flatten().iter().map(|v| v.as_f64()).collect())
        .collect();
    similarity_from_vectors(&names, &vectors)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues come back in descending order; `vectors[k]` is the unit
/// eigenvector of `values[k]`.
pub fn jacobi_eigen(m: &Matrix, tolerance: f64) -> Result<(Vec<f64>, Matrix)> {
    let n = m.len();
    if m.iter().any(|r| r.len() != n) {
        return Err(Error::Input(
            "eigen-decomposition needs a square matrix".into(),
        ));
    }
    for i in 0..n {
        for j in 0..i {
            if (m[i][j] - m[j][i]).abs() > 1e-9 * (1.0 + m[i][j].abs()) {
                return Err(Error::Input(
                    "eigen-decomposition needs a symmetric matrix".into(),
                ));
            }
        }
    }
    let mut a = m.clone();
    let mut v: Matrix = (0..n)
        .map(|i| (0..n).map(|j| f64::from(i == j)).collect())
        .collect();
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= tolerance * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&k| a[k][k]).collect();
    let vectors = order
        .iter()
        .map(|&k| v.iter().map(|row| row[k]).collect())
        .collect();
    Ok((values, vectors))
}

/// `−½·J·D²·J` with `J` the centering matrix.
pub fn double_center(distances: &Matrix) -> Matrix {
    let n = distances.len();
    let sq: Matrix = distances
        .iter()
        .map(|r| r.iter().map(|d| d * d).collect())
        .collect();
    let row_mean: Vec<f64> = sq
        .iter()
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| -0.5 * (sq[i][j] - row_mean[i] - row_mean[j] + grand))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub names: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    /// The two leading eigenvalues of the double-centered matrix, before
    /// clamping.
    pub eigenvalues: [f64; 2],
    pub stress: f64,
}

impl Embedding2D {
    pub fn distances(&self) -> Matrix {
        self.coords
            .iter()
            .map(|a| {
                self.coords
                    .iter()
                    .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "x", "y"]).map_err(err)?;
        for (n, (x, y)) in self.names.iter().zip(&self.coords) {
            w.write_record([n.clone(), format!("{x:.9}"), format!("{y:.9}")])
                .map_err(err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv: {e}")))
    }

    /// Labeled scatter plot.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (420.0, 420.0, 50.0);
        let xs = self.coords.iter().map(|c| c.0);
        let ys = self.coords.iter().map(|c| c.1);
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                (l.min(v), h.max(v))
            });
            if hi - lo > 1e-12 {
                (lo, hi)
            } else {
                (lo - 1.0, hi + 1.0)
            }
        };
        let (x0, x1) = span(&mut xs.into_iter());
        let (y0, y1) = span(&mut ys.into_iter());
        let mut s = svg_open(w, h, title);
        for (n, (x, y)) in self.names.iter().zip(&self.coords) {
            let px = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
            let py = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
            let _ = writeln!(
                s,
                r##"<circle cx="{px:.1}" cy="{py:.1}" r="4" fill="#2c7fb8"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
                px + 6.0,
                py - 6.0,
                xml_escape(n)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Classical MDS into two dimensions. Axis signs are fixed so that the
/// first point with a non-zero coordinate on an axis lies on its positive
/// side.
pub fn mds_embed(names: &[String], distances: &Matrix) -> Result<Embedding2D> {
    let n = distances.len();
    if n < 2 || names.len() != n {
        return Err(Error::Input("MDS needs at least two named points".into()));
    }
    if distances.iter().any(|r| r.len() != n) {
        return Err(Error::Input("distance matrix must be square".into()));
    }
    if distances
        .iter()
        .flatten()
        .any(|d| !d.is_finite() || *d < 0.0)
    {
        return Err(Error::Input(
            "distances must be finite and non-negative".into(),
        ));
    }
    let b = double_center(distances);
    let (values, vectors) = jacobi_eigen(&b, 1e-10)?;
    let mut axes = [vec![0.0; n], vec![0.0; n]];
    let mut eig = [0.0; 2];
    for k in 0..2.min(n) {
        eig[k] = values[k];
        let s = values[k].max(0.0).sqrt();
        let mut col: Vec<f64> = vectors[k].iter().map(|v| v * s).collect();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
        axes[k] = col;
    }
    let coords: Vec<(f64, f64)> = (0..n).map(|i| (axes[0][i], axes[1][i])).collect();
    let mut emb = Embedding2D {
        names: names.to_vec(),
        coords,
        eigenvalues: eig,
        stress: 0.0,
    };
    let fitted = emb.distances();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            num += (distances[i][j] - fitted[i][j]).powi(2);
            den += distances[i][j].powi(2);
        }
    }
    emb.stress = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    Ok(emb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Mean distance over pairs sharing a label; absent without such pairs.
    pub intra: Option<f64>,
    /// Mean distance over pairs with different labels.
    pub inter: Option<f64>,
    pub ratio: Option<f64>,
}

/// Compares within-label and across-label distances.
pub fn cluster_report(distances: &Matrix, labels: &[&str]) -> Result<ClusterReport> {
    let n = distances.len();
    if labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            let acc = if labels[i] == labels[j] {
                &mut intra
            } else {
                &mut inter
            };
            acc.0 += distances[i][j];
            acc.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    let (intra, inter) = (mean(intra), mean(inter));
    let ratio = match (intra, inter) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    Ok(ClusterReport {
        intra,
        inter,
        ratio,
    })
}

fn svg_open(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"10\" y=\"20\" font-size=\"13\">{}</text>\n",
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::util::write_bytes(path, text.as_bytes())
}
