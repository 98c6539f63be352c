//! Named parameter collections.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter tensor was initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Random orthogonal matrix over the flattened `[out, rest]` view.
    Orthogonal { gain: f64 },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub init: Init,
}

/// Ordered, named parameter tensors of a model.
#[derive(Clone, Debug, Default)]
pub struct ModelParams<F: Scalar> {
    params: Vec<Param<F>>,
    skeleton: bool,
}

impl<F: Scalar> ModelParams<F> {
    pub fn new() -> Self {
        ModelParams {
            params: Vec::new(),
            skeleton: false,
        }
    }

    /// A collection whose `add` allocates zeros instead of running the
    /// initializer; for shape queries and for loading stored weights.
    pub fn skeleton() -> Self {
        ModelParams {
            params: Vec::new(),
            skeleton: true,
        }
    }

    pub fn is_skeleton(&self) -> bool {
        self.skeleton
    }

    /// Adds a parameter initialized according to `init`.
    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let tensor = match init {
            _ if self.skeleton => Tensor::zeros(shape),
            Init::Orthogonal { gain } => {
                let out = shape.first().copied().unwrap_or(1);
                let rest = shape.iter().skip(1).product::<usize>().max(1);
                let w = orthogonal(out, rest, gain, rng);
                Tensor::from_vec(shape, w.into_iter().map(F::lit).collect()).expect("orthogonal shape")
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, F::lit(v)),
        };
        self.push(name, tensor, init)
    }

    /// Adds a parameter with explicit values.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>, init: Init) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            init,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect()
    }

    /// Records every parameter on `g` as a gradient-requiring leaf. The
    /// returned vars are indexed like the parameters.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.tensor.clone())).collect()
    }

    /// Same as [`bind`](Self::bind) but as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.tensor.clone())).collect()
    }

    /// Replaces all tensors, checking that names and shapes line up.
    pub fn load_from(&mut self, other: &ModelParams<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// Random `rows x cols` matrix (row-major, `f64`) whose rows (`rows <= cols`)
/// or columns (`rows > cols`) are orthonormal, scaled by `gain`.
///
/// A standard Gaussian matrix is orthonormalized with two passes of
/// modified Gram-Schmidt, i.e. the Q factor of its QR decomposition with a
/// positive diagonal in R.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    assert!(rows >= 1 && cols >= 1, "orthogonal init needs a non-empty shape");
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` column vectors of length `long`
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..short {
        for _pass in 0..2 {
            for i in 0..j {
                let d: f64 = q[j].iter().zip(&q[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = q.split_at_mut(j);
                tail[0].iter_mut().zip(&head[i]).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows <= cols { q[r][c] } else { q[c][r] };
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(w: &[f64], rows: usize, cols: usize) -> nalgebra::DMatrix<f64> {
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, w);
        if rows <= cols {
            &m * m.transpose()
        } else {
            m.transpose() * &m
        }
    }

    #[test]
    fn square_orthogonal_has_identity_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = orthogonal(4, 4, 1.0, &mut rng);
        let g = gram(&w, 4, 4);
        assert!((g - nalgebra::DMatrix::identity(4, 4)).amax() <= 1e-5);
    }

    #[test]
    fn gain_scales_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = orthogonal(4, 4, 2.0, &mut rng);
        let g = gram(&w, 4, 4);
        assert!((g - nalgebra::DMatrix::identity(4, 4) * 4.0).amax() <= 1e-4);
    }

    #[test]
    fn singular_values_equal_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c, gain) in &[(3, 7, 1.0), (9, 2, 1.5), (5, 5, 0.5), (1, 4, 1.0), (6, 1, 2.0)] {
            let w = orthogonal(r, c, gain, &mut rng);
            let svd = nalgebra::DMatrix::from_row_slice(r, c, &w).svd(false, false);
            for s in svd.singular_values.iter() {
                assert!((s - gain).abs() <= 1e-5, "{r}x{c}: singular value {s}");
            }
        }
    }

    #[test]
    fn conv_kernels_flatten_non_output_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ModelParams::<f64>::new();
        let id = p.add("k", &[4, 2, 3, 3], Init::Orthogonal { gain: 1.0 }, &mut rng);
        let w = p.get(id).tensor.data().to_vec();
        let g = gram(&w, 4, 18);
        assert!((g - nalgebra::DMatrix::identity(4, 4)).amax() <= 1e-10);
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut p = ModelParams::<f32>::new();
            p.add("a", &[3, 5], Init::Orthogonal { gain: 1.0 }, &mut rng);
            p.add("b", &[3], Init::Zeros, &mut rng);
            p
        };
        let (a, b) = (build(), build());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.tensor, y.tensor);
        }
    }
}
