//! Toy 2D source/target dataset generation, CSV ingestion, and
//! decision-boundary grid export.
//!
//! The toy task is two interleaving half-moon classes as the source domain;
//! the target domain is a fresh draw from the same arcs rotated about the
//! origin, with fresh noise. Features are standardized with source-domain
//! statistics only, applied to both domains, so nothing about the target
//! distribution leaks into preprocessing.
//!
//! CSV format (documented, bit-exact): comma-separated, optional header
//! row, feature columns followed by an integer label column. The target
//! file may omit the label column, in which case target accuracy is
//! unavailable.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Matrix;
use crate::model::MultiClassifierModel;
use crate::{Error, Result};

/// Labeled source batch plus unlabeled target batch with a shared class
/// count. Target labels exist only for evaluation; training code consumes
/// a [`TrainView`], which has no way to reach them.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub target_x: Matrix,
    pub target_y_eval: Option<Vec<usize>>,
    pub k: usize,
}

/// The training-facing view of a split: no target labels, by construction.
#[derive(Clone, Copy)]
pub struct TrainView<'a> {
    pub source_x: &'a Matrix,
    pub source_y: &'a [usize],
    pub target_x: &'a Matrix,
    pub k: usize,
}

impl DatasetSplit {
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            source_x: &self.source_x,
            source_y: &self.source_y,
            target_x: &self.target_x,
            k: self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub n_per_domain: usize,
    /// Target domain rotation about the origin, degrees.
    pub rotation_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_per_domain: 300,
            rotation_deg: 30.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_domain == 0 {
            return Err(Error::InvalidConfig("n-per-domain must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise-sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One half-moon domain: class 0 on the upper arc, class 1 on the lower
/// interleaved arc, rotated by `rot_deg` about the origin, Gaussian noise
/// added after rotation.
fn moons(n: usize, sigma: f64, rot_deg: f64, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let n0 = n - n / 2;
    let (sin_r, cos_r) = rot_deg.to_radians().sin_cos();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n0);
        let t = rng.gen::<f64>() * PI;
        let (px, py) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (rx, ry) = (cos_r * px - sin_r * py, sin_r * px + cos_r * py);
        let nx: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
        let ny: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
        rows.push(vec![rx + nx, ry + ny]);
        labels.push(class);
    }
    (Matrix::from_rows(&rows), labels)
}

fn raw_toy(spec: &ToySpec) -> (Matrix, Vec<usize>, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (sx, sy) = moons(spec.n_per_domain, spec.noise_sigma, 0.0, &mut rng);
    let (tx, ty) = moons(spec.n_per_domain, spec.noise_sigma, spec.rotation_deg, &mut rng);
    (sx, sy, tx, ty)
}

/// Column means and stds of the source batch; stds floored at 1e-12.
fn source_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (s, (&v, &m)) in std.iter_mut().zip(x.row(r).iter().zip(&mean)) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-12);
    }
    (mean, std)
}

fn standardize(x: &mut Matrix, mean: &[f64], std: &[f64]) {
    for r in 0..x.rows {
        for c in 0..x.cols {
            let i = r * x.cols + c;
            x.data[i] = (x.data[i] - mean[c]) / std[c];
        }
    }
}

/// Generate the toy adaptation task. Both domains are standardized with
/// source statistics only.
pub fn make_toy(spec: &ToySpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let (mut sx, sy, mut tx, ty) = raw_toy(spec);
    let (mean, std) = source_stats(&sx);
    standardize(&mut sx, &mean, &std);
    standardize(&mut tx, &mean, &std);
    Ok(DatasetSplit {
        source_x: sx,
        source_y: sy,
        target_x: tx,
        target_y_eval: Some(ty),
        k: 2,
    })
}

struct Table {
    rows: Vec<Vec<f64>>,
    cols: usize,
    /// Line number of the first data row, for error reporting.
    first_data_line: usize,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut cols = None;
    let mut first_data_line = 1;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let fields = match parsed {
            Ok(f) => f,
            Err(_) if rows.is_empty() && idx == 0 => {
                // non-numeric first line: header
                first_data_line = 2;
                continue;
            }
            Err(_) => {
                return Err(Error::Csv {
                    file,
                    line: lineno,
                    msg: format!("malformed row: '{trimmed}'"),
                });
            }
        };
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::Csv {
                    file,
                    line: lineno,
                    msg: format!("expected {c} columns, found {}", fields.len()),
                });
            }
            _ => {}
        }
        rows.push(fields);
    }
    let cols = cols.ok_or_else(|| Error::Csv {
        file,
        line: 1,
        msg: "file contains no data rows".into(),
    })?;
    Ok(Table {
        rows,
        cols,
        first_data_line,
    })
}

fn split_labels(table: &Table, path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let d = table.cols - 1;
    let mut labels = Vec::with_capacity(table.rows.len());
    let mut feats = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let raw = row[d];
        if raw < 0.0 || raw.fract() != 0.0 {
            return Err(Error::Csv {
                file: path.display().to_string(),
                line: table.first_data_line + i,
                msg: format!("label column must be a nonnegative integer, got {raw}"),
            });
        }
        labels.push(raw as usize);
        feats.push(row[..d].to_vec());
    }
    Ok((Matrix::from_rows(&feats), labels))
}

/// Load a source/target split from two CSV files. The source file must
/// carry labels; the target file carries them only if it has the same
/// column count as the source (one fewer column means unlabeled). K is
/// inferred as max label + 1 across both files.
pub fn load_csv(source: &Path, target: &Path) -> Result<DatasetSplit> {
    let st = read_table(source)?;
    if st.cols < 2 {
        return Err(Error::Csv {
            file: source.display().to_string(),
            line: st.first_data_line,
            msg: "source file needs at least one feature column and a label column".into(),
        });
    }
    let (source_x, source_y) = split_labels(&st, source)?;
    let tt = read_table(target)?;
    let (target_x, target_y_eval) = if tt.cols == st.cols {
        let (x, y) = split_labels(&tt, target)?;
        (x, Some(y))
    } else if tt.cols == st.cols - 1 {
        (Matrix::from_rows(&tt.rows), None)
    } else {
        return Err(Error::Csv {
            file: target.display().to_string(),
            line: tt.first_data_line,
            msg: format!(
                "target has {} columns; expected {} (labeled) or {} (unlabeled)",
                tt.cols,
                st.cols,
                st.cols - 1
            ),
        });
    };
    let mut k = source_y.iter().copied().max().unwrap_or(0) + 1;
    if let Some(ty) = &target_y_eval {
        k = k.max(ty.iter().copied().max().unwrap_or(0) + 1);
    }
    Ok(DatasetSplit {
        source_x,
        source_y,
        target_x,
        target_y_eval,
        k,
    })
}

/// One lattice point with the model's predictions at it.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub consensus: usize,
    pub per_head: Vec<usize>,
}

/// Bounding box of both domains with a 10% margin, for boundary export.
pub fn data_bounds(split: &DatasetSplit) -> (f64, f64, f64, f64) {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for m in [&split.source_x, &split.target_x] {
        for r in 0..m.rows {
            xmin = xmin.min(m.get(r, 0));
            xmax = xmax.max(m.get(r, 0));
            ymin = ymin.min(m.get(r, 1));
            ymax = ymax.max(m.get(r, 1));
        }
    }
    let (mx, my) = ((xmax - xmin) * 0.1, (ymax - ymin) * 0.1);
    (xmin - mx, xmax + mx, ymin - my, ymax + my)
}

/// Evaluate the model's consensus and per-head labels over a
/// `resolution x resolution` lattice. Points are emitted row-major with
/// the top row at `ymax`, matching image orientation.
pub fn boundary_grid(
    model: &MultiClassifierModel,
    bounds: (f64, f64, f64, f64),
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if model.spec.input_dim != 2 {
        return Err(Error::Contract(format!(
            "boundary_grid requires a 2D model, got input-dim {}",
            model.spec.input_dim
        )));
    }
    if resolution < 2 {
        return Err(Error::Contract("resolution must be at least 2".into()));
    }
    let (xmin, xmax, ymin, ymax) = bounds;
    let step_x = (xmax - xmin) / (resolution - 1) as f64;
    let step_y = (ymax - ymin) / (resolution - 1) as f64;
    let mut points = Vec::with_capacity(resolution * resolution);
    for iy in 0..resolution {
        for ix in 0..resolution {
            points.push(vec![
                xmin + ix as f64 * step_x,
                ymax - iy as f64 * step_y,
            ]);
        }
    }
    let batch = Matrix::from_rows(&points);
    let pred = model.predict(&batch)?;
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| GridPoint {
            x: p[0],
            y: p[1],
            consensus: pred.consensus[i],
            per_head: pred.per_head.iter().map(|h| h[i]).collect(),
        })
        .collect())
}

/// Column schema: `x,y,consensus,head_1,...,head_n`, one row per grid point.
pub fn write_boundary_csv<W: Write>(w: &mut W, grid: &[GridPoint], n_heads: usize) -> Result<()> {
    let heads: Vec<String> = (1..=n_heads).map(|i| format!("head_{i}")).collect();
    writeln!(w, "x,y,consensus,{}", heads.join(","))?;
    for p in grid {
        let labels: Vec<String> = p.per_head.iter().map(|l| l.to_string()).collect();
        writeln!(w, "{},{},{},{}", p.x, p.y, p.consensus, labels.join(","))?;
    }
    Ok(())
}

/// Fixed class palette for boundary images; classes beyond 8 cycle.
pub const CLASS_PALETTE: [[u8; 3]; 8] = [
    [220, 50, 47],   // class 0: red
    [38, 139, 210],  // class 1: blue
    [133, 153, 0],   // class 2: olive
    [211, 54, 130],  // class 3: magenta
    [42, 161, 152],  // class 4: cyan
    [181, 137, 0],   // class 5: yellow
    [108, 113, 196], // class 6: violet
    [88, 110, 117],  // class 7: gray
];

/// Binary PPM (P6), one pixel per grid cell, consensus label colored by
/// [`CLASS_PALETTE`]. The grid must come from [`boundary_grid`] (row-major,
/// top row first).
pub fn write_boundary_ppm<W: Write>(w: &mut W, grid: &[GridPoint], resolution: usize) -> Result<()> {
    assert_eq!(grid.len(), resolution * resolution);
    write!(w, "P6\n{resolution} {resolution}\n255\n")?;
    let mut pixels = Vec::with_capacity(grid.len() * 3);
    for p in grid {
        pixels.extend_from_slice(&CLASS_PALETTE[p.consensus % CLASS_PALETTE.len()]);
    }
    w.write_all(&pixels)?;
    Ok(())
}
