//! Gradient projection memory.
//!
//! For every layer we keep an orthonormal basis `M` of the input subspace that
//! past tasks' exemplars occupy. Weight gradients are projected off that
//! subspace (`G <- G - G M M^T`), so updates leave responses to old inputs
//! (approximately) unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, svd, Matrix};
use crate::nn::{Gradients, MlpModel};

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.97;
pub const DEFAULT_EXEMPLAR_COUNT: usize = 10_000;

/// New basis candidates whose norm falls below this after re-orthogonalization
/// are treated as already spanned.
const REORTHO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpmMemory {
    pub bases: Vec<Matrix>,
    pub thresholds: Vec<f64>,
    pub exemplar_count: usize,
}

/// Per-layer column counts added by one update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub added: Vec<usize>,
    pub exemplars_used: usize,
}

impl GpmMemory {
    /// Empty memory shaped for `model`, one `input_dim x 0` basis per layer.
    pub fn new(model: &MlpModel, threshold: f64, exemplar_count: usize) -> Result<Self> {
        Self::with_thresholds(model, vec![threshold; model.layers.len()], exemplar_count)
    }

    pub fn with_thresholds(
        model: &MlpModel,
        thresholds: Vec<f64>,
        exemplar_count: usize,
    ) -> Result<Self> {
        if thresholds.len() != model.layers.len() {
            return Err(Error::dims(
                format!("{} thresholds", model.layers.len()),
                thresholds.len(),
            ));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!(
                "energy threshold {t} outside (0, 1]"
            )));
        }
        if exemplar_count == 0 {
            return Err(Error::Config("exemplar count must be positive".into()));
        }
        let bases = model
            .layers
            .iter()
            .map(|l| Matrix::zeros(l.input_dim(), 0))
            .collect();
        Ok(GpmMemory {
            bases,
            thresholds,
            exemplar_count,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.iter().all(|b| b.cols() == 0)
    }

    pub fn basis_dims(&self) -> Vec<usize> {
        self.bases.iter().map(Matrix::cols).collect()
    }

    /// Largest `||M^T M - I||_max` over layers.
    pub fn orthonormality_error(&self) -> f64 {
        self.bases
            .iter()
            .map(Matrix::orthonormality_error)
            .fold(0.0, f64::max)
    }

    /// `R - M M^T R` for layer `layer`.
    pub fn remove_shared_basis(&self, r: &Matrix, layer: usize) -> Result<Matrix> {
        let basis = self
            .bases
            .get(layer)
            .ok_or_else(|| Error::dims(format!("layer < {}", self.bases.len()), layer))?;
        remove_shared_basis(r, basis)
    }

    /// Add the subspace occupied by `exemplars` (one per row) to every layer.
    ///
    /// Only the first `exemplar_count` rows are used. On the first update the
    /// basis is the minimal rank-q left singular subspace meeting the energy
    /// threshold. Afterwards the energy already captured by the memory counts
    /// towards the threshold, and only the residual's leading directions are
    /// added, so exemplars fully inside the memory add nothing.
    pub fn update(&mut self, model: &MlpModel, exemplars: &Matrix) -> Result<UpdateSummary> {
        if exemplars.rows() == 0 {
            return Err(Error::NoExemplars);
        }
        self.check_model(model)?;
        let used = exemplars.rows().min(self.exemplar_count);
        let exemplars = if used < exemplars.rows() {
            exemplars.select_rows(&(0..used).collect::<Vec<_>>())
        } else {
            exemplars.clone()
        };
        let reps = representation_matrices(model, &exemplars)?;
        let mut added = Vec::with_capacity(reps.len());
        for (k, r) in reps.iter().enumerate() {
            let basis = &self.bases[k];
            let delta = self.thresholds[k];
            let new_cols = if basis.cols() == 0 {
                extract_basis(r, delta)?.columns()
            } else {
                let total = r.frobenius_norm().powi(2);
                let residual = remove_shared_basis(r, basis)?;
                let captured = (total - residual.frobenius_norm().powi(2)).max(0.0);
                residual_directions(&residual, captured, total, delta)?
            };
            let mut cols = basis.columns();
            let room = r.rows() - cols.len();
            let mut count = 0;
            for mut c in new_cols {
                if count == room {
                    break;
                }
                if orthogonalize_against(&mut c, &cols) {
                    cols.push(c);
                    count += 1;
                }
            }
            if count > 0 {
                self.bases[k] = if cols.is_empty() {
                    Matrix::zeros(r.rows(), 0)
                } else {
                    Matrix::from_columns(&cols)?
                };
            }
            added.push(count);
        }
        log::debug!("gpm update: added {added:?} from {used} exemplars");
        Ok(UpdateSummary {
            added,
            exemplars_used: used,
        })
    }

    /// `G <- G - G M M^T` on every layer's weight gradient. Bias and batchnorm
    /// gradients are left alone.
    pub fn project(&self, g: &mut Gradients) -> Result<()> {
        if g.layers.len() != self.bases.len() {
            return Err(Error::dims(
                format!("{} gradient layers", self.bases.len()),
                g.layers.len(),
            ));
        }
        for (lg, basis) in g.layers.iter_mut().zip(&self.bases) {
            if lg.weights.cols() != basis.rows() {
                return Err(Error::dims(
                    format!("weight gradient with {} columns", basis.rows()),
                    lg.weights.cols(),
                ));
            }
            if basis.cols() == 0 {
                continue;
            }
            let coeffs = lg.weights.matmul(basis)?;
            let inside = coeffs.matmul_nt(basis)?;
            lg.weights = lg.weights.sub(&inside)?;
        }
        Ok(())
    }

    fn check_model(&self, model: &MlpModel) -> Result<()> {
        let dims: Vec<usize> = model.layers.iter().map(|l| l.input_dim()).collect();
        let ours: Vec<usize> = self.bases.iter().map(Matrix::rows).collect();
        if dims != ours {
            return Err(Error::dims(
                format!("layer inputs {ours:?}"),
                format!("{dims:?}"),
            ));
        }
        Ok(())
    }
}

pub fn project_gradients(g: &Gradients, mem: &GpmMemory) -> Result<Gradients> {
    let mut out = g.clone();
    mem.project(&mut out)?;
    Ok(out)
}

pub fn update_gpm(mem: &GpmMemory, model: &MlpModel, exemplars: &Matrix) -> Result<GpmMemory> {
    let mut next = mem.clone();
    next.update(model, exemplars)?;
    Ok(next)
}

/// Input representation of layer `layer` for each exemplar row, one column per
/// exemplar (`input_dim(layer) x n`). Uses eval-mode statistics.
pub fn build_representation_matrix(
    model: &MlpModel,
    exemplars: &Matrix,
    layer: usize,
) -> Result<Matrix> {
    if layer >= model.layers.len() {
        return Err(Error::dims(
            format!("layer < {}", model.layers.len()),
            layer,
        ));
    }
    let mut all = representation_matrices(model, exemplars)?;
    Ok(all.swap_remove(layer))
}

/// Representation matrices for every layer from a single forward pass.
pub fn representation_matrices(model: &MlpModel, exemplars: &Matrix) -> Result<Vec<Matrix>> {
    if exemplars.rows() == 0 {
        return Err(Error::EmptyInput("no exemplars".into()));
    }
    let (_, trace) = model.forward_trace_batch(exemplars)?;
    let mut out = Vec::with_capacity(model.layers.len());
    out.push(exemplars.transpose());
    out.extend(trace.iter().map(Matrix::transpose));
    Ok(out)
}

/// First `q` left singular vectors of `r`, `q` minimal with
/// `sum_{i<=q} s_i^2 >= delta * sum_i s_i^2`. A zero matrix gives `d x 0`.
pub fn extract_basis(r: &Matrix, delta: f64) -> Result<Matrix> {
    check_delta(delta)?;
    if r.rows() == 0 || r.cols() == 0 || r.max_abs() == 0.0 {
        return Ok(Matrix::zeros(r.rows(), 0));
    }
    let s = svd(r)?;
    let total: f64 = s.singular_values.iter().map(|v| v * v).sum();
    let q = minimal_rank(&s.singular_values, 0.0, total, delta);
    let cols: Vec<Vec<f64>> = (0..q).map(|j| s.left_vectors.column(j)).collect();
    if cols.is_empty() {
        return Ok(Matrix::zeros(r.rows(), 0));
    }
    Matrix::from_columns(&cols)
}

/// `R - M M^T R`.
pub fn remove_shared_basis(r: &Matrix, basis: &Matrix) -> Result<Matrix> {
    if r.rows() != basis.rows() {
        return Err(Error::dims(format!("{} rows", basis.rows()), r.rows()));
    }
    if basis.cols() == 0 || r.cols() == 0 {
        return Ok(r.clone());
    }
    let coeffs = basis.matmul_tn(r)?;
    let inside = basis.matmul(&coeffs)?;
    r.sub(&inside)
}

/// Smallest `q` with `captured + sum_{i<q} s_i^2 >= delta * total`, counting
/// only singular values above round-off relative to `sqrt(total)`.
fn minimal_rank(singular_values: &[f64], captured: f64, total: f64, delta: f64) -> usize {
    let target = delta * total;
    if captured >= target {
        return 0;
    }
    let tiny = singular_values.len().max(1) as f64 * f64::EPSILON * 16.0 * total.sqrt();
    let mut acc = captured;
    for (i, s) in singular_values.iter().enumerate() {
        if *s <= tiny {
            return i;
        }
        acc += s * s;
        if acc >= target {
            return i + 1;
        }
    }
    singular_values.len()
}

fn residual_directions(
    residual: &Matrix,
    captured: f64,
    total: f64,
    delta: f64,
) -> Result<Vec<Vec<f64>>> {
    if residual.max_abs() == 0.0 || captured >= delta * total {
        return Ok(Vec::new());
    }
    let s = svd(residual)?;
    let q = minimal_rank(&s.singular_values, captured, total, delta);
    Ok((0..q).map(|j| s.left_vectors.column(j)).collect())
}

/// Two rounds of Gram-Schmidt against `basis`, then normalize. Returns false
/// if nothing is left.
fn orthogonalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
    let n = norm(v);
    if n < REORTHO_TOL {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "energy threshold {delta} outside (0, 1]"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::rng_from_seed;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn small_model(seed: u64) -> MlpModel {
        let spec = ModelSpec {
            input_dim: 6,
            hidden: vec![5, 4],
            batchnorm: true,
            dropout: 0.2,
        };
        MlpModel::new(&spec, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn diag_example_picks_one_vector() {
        let r = Matrix::from_diag(&[10.0, 1.0]);
        let b = extract_basis(&r, 0.9).unwrap();
        assert_eq!(b.shape(), (2, 1));
        assert!((b[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_threshold_keeps_rank() {
        let a = random(7, 3, 1);
        let b = random(3, 9, 2);
        let r = a.matmul(&b).unwrap();
        assert_eq!(extract_basis(&r, 1.0).unwrap().cols(), 3);
        assert_eq!(extract_basis(&r, 1e-9).unwrap().cols(), 1);
    }

    #[test]
    fn zero_matrix_gives_empty_basis() {
        let b = extract_basis(&Matrix::zeros(4, 3), 0.97).unwrap();
        assert_eq!(b.shape(), (4, 0));
        assert!(extract_basis(&Matrix::zeros(4, 3), 0.0).is_err());
    }

    #[test]
    fn representation_columns_match_single_forward() {
        let model = small_model(3);
        let ex = random(3, 6, 4);
        for k in 0..model.layers.len() {
            let r = build_representation_matrix(&model, &ex, k).unwrap();
            assert_eq!(r.shape(), (model.layers[k].input_dim(), 3));
            for j in 0..3 {
                let (_, trace) = model.forward_with_activations(ex.row(j)).unwrap();
                let expected = if k == 0 {
                    ex.row(j).to_vec()
                } else {
                    trace.0[k - 1].clone()
                };
                for (i, e) in expected.iter().enumerate() {
                    assert!((r[(i, j)] - e).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(
            build_representation_matrix(&model, &Matrix::zeros(0, 6), 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn shared_basis_removal_is_orthogonal() {
        let m = svd(&random(8, 3, 5)).unwrap().left_vectors;
        let r = random(8, 10, 6);
        let res = remove_shared_basis(&r, &m).unwrap();
        assert!(m.matmul_tn(&res).unwrap().max_abs() <= 1e-6);
        let inside = m.matmul(&random(3, 4, 7)).unwrap();
        assert!(remove_shared_basis(&inside, &m).unwrap().max_abs() <= 1e-8);
        assert!(remove_shared_basis(&random(7, 2, 1), &m).is_err());
        assert_eq!(remove_shared_basis(&r, &Matrix::zeros(8, 0)).unwrap(), r);
    }

    #[test]
    fn identical_exemplars_add_nothing_second_time() {
        let model = small_model(8);
        let mut mem = GpmMemory::new(&model, 0.97, 100).unwrap();
        let ex = random(20, 6, 9);
        let first = mem.update(&model, &ex).unwrap();
        assert!(first.added.iter().all(|&a| a > 0));
        let second = mem.update(&model, &ex).unwrap();
        assert_eq!(second.added, vec![0, 0, 0]);
    }

    #[test]
    fn two_dimensional_span_with_full_threshold() {
        let spec = ModelSpec {
            input_dim: 5,
            hidden: vec![],
            batchnorm: false,
            dropout: 0.0,
        };
        let model = MlpModel::new(&spec, &mut rng_from_seed(1)).unwrap();
        let span = random(2, 5, 2);
        let ex = random(12, 2, 3).matmul(&span).unwrap();
        let mut mem = GpmMemory::new(&model, 1.0, 100).unwrap();
        assert_eq!(mem.update(&model, &ex).unwrap().added, vec![2]);
    }

    #[test]
    fn bases_stay_bounded_and_orthonormal() {
        let model = small_model(10);
        let mut mem = GpmMemory::new(&model, 0.99, 50).unwrap();
        for t in 0..5 {
            mem.update(&model, &random(30, 6, 100 + t)).unwrap();
            for (b, l) in mem.bases.iter().zip(&model.layers) {
                assert!(b.cols() <= l.input_dim());
            }
            assert!(mem.orthonormality_error() <= 1e-6);
        }
        assert!(matches!(
            mem.update(&model, &Matrix::zeros(0, 6)),
            Err(Error::NoExemplars)
        ));
    }

    #[test]
    fn projection_is_idempotent_and_orthogonal() {
        let model = small_model(11);
        let mut mem = GpmMemory::new(&model, 0.9, 100).unwrap();
        mem.update(&model, &random(4, 6, 12)).unwrap();
        let mut g = Gradients::zeros_like(&model);
        for (k, lg) in g.layers.iter_mut().enumerate() {
            let (r, c) = lg.weights.shape();
            lg.weights = random(r, c, 200 + k as u64);
            lg.bias.iter_mut().for_each(|b| *b = 1.5);
        }
        let once = project_gradients(&g, &mem).unwrap();
        let twice = project_gradients(&once, &mem).unwrap();
        for ((a, b), basis) in once.layers.iter().zip(&twice.layers).zip(&mem.bases) {
            assert!(a.weights.max_abs_diff(&b.weights).unwrap() <= 1e-9);
            assert!(a.weights.matmul(basis).unwrap().max_abs() <= 1e-6);
            assert!(a.bias.iter().all(|&x| x == 1.5));
        }
        let empty = GpmMemory::new(&model, 0.9, 100).unwrap();
        assert_eq!(project_gradients(&g, &empty).unwrap(), g);
    }

    #[test]
    fn projection_of_in_span_rows_vanishes() {
        let model = small_model(13);
        let mut mem = GpmMemory::new(&model, 0.9, 100).unwrap();
        mem.update(&model, &random(5, 6, 14)).unwrap();
        let mut g = Gradients::zeros_like(&model);
        for (lg, basis) in g.layers.iter_mut().zip(&mem.bases) {
            let coeffs = random(lg.weights.rows(), basis.cols(), 15);
            lg.weights = coeffs.matmul_nt(basis).unwrap();
        }
        mem.project(&mut g).unwrap();
        assert!(g.layers.iter().all(|l| l.weights.max_abs() <= 1e-8));
    }
}
