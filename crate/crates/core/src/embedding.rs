//! Label embeddings: the m×m similarity table and its low-rank form.
//!
//! Row `y` of the table is the embedding of label `y`; after a softmax its
//! `i`-th entry reads as how similar label `y` is to label `i`. The
//! compressed form stores `A` (m×h) and `B` (h×m) and reconstructs row `y`
//! as `ReLU(A_y · B)`, cutting storage by a factor of `m / 2h`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Full m×m embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct FullEmbedding<T: Scalar = f32> {
    table: Tensor<T>,
}

impl<T: Scalar> FullEmbedding<T> {
    /// Trainable table initialized to the identity matrix.
    pub fn identity(labels: usize) -> Self {
        FullEmbedding { table: Tensor::identity(labels).with_grad() }
    }

    pub fn from_table(table: Tensor<T>) -> Result<Self> {
        match table.shape() {
            [r, c] if r == c && *r > 0 => Ok(FullEmbedding { table }),
            s => Err(Error::Dimension(format!("embedding table must be square, got {:?}", s))),
        }
    }

    pub fn labels(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor<T> {
        &mut self.table
    }
}

/// Low-rank embedding `ReLU(A · B)` with `A: m×h`, `B: h×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEmbedding<T: Scalar = f32> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> CompressedEmbedding<T> {
    /// Gaussian factors with standard deviation `1/sqrt(h)`.
    pub fn random<R: Rng + ?Sized>(labels: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if labels == 0 || dim == 0 {
            return Err(Error::Parameter(format!(
                "compressed embedding needs m ≥ 1 and h ≥ 1, got m={} h={}",
                labels, dim
            )));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let a = Tensor::randn([labels, dim], std, rng).with_grad();
        let b = Tensor::randn([dim, labels], std, rng).with_grad();
        Ok(CompressedEmbedding { a, b })
    }

    pub fn from_factors(a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        match (a.shape(), b.shape()) {
            ([m, h], [h2, m2]) if m == m2 && h == h2 && *m > 0 && *h > 0 => Ok(CompressedEmbedding { a, b }),
            (sa, sb) => Err(Error::Dimension(format!(
                "compressed factors must be m×h and h×m, got {:?} and {:?}",
                sa, sb
            ))),
        }
    }

    pub fn labels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    /// Storage reduction `m / 2h` relative to the full table.
    pub fn compression_factor(&self) -> f64 {
        self.labels() as f64 / (2.0 * self.dim() as f64)
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Either embedding form, as used by the objective and the file format.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelEmbedding<T: Scalar = f32> {
    Full(FullEmbedding<T>),
    Compressed(CompressedEmbedding<T>),
}

/// An embedding recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub enum BoundEmbedding {
    Full { table: Var },
    Compressed { a: Var, b: Var },
}

impl BoundEmbedding {
    /// Embedding rows for `labels`, as a `labels.len() × m` matrix that
    /// carries gradients back to the table (or to both factors).
    pub fn rows<T: Scalar>(&self, tape: &mut Tape<T>, labels: &[usize]) -> Result<Var> {
        match *self {
            BoundEmbedding::Full { table } => tape.gather_rows(table, labels),
            BoundEmbedding::Compressed { a, b } => {
                let ay = tape.gather_rows(a, labels)?;
                let prod = tape.matmul(ay, b)?;
                Ok(tape.relu(prod))
            }
        }
    }
}

impl<T: Scalar> From<FullEmbedding<T>> for LabelEmbedding<T> {
    fn from(e: FullEmbedding<T>) -> Self {
        LabelEmbedding::Full(e)
    }
}

impl<T: Scalar> From<CompressedEmbedding<T>> for LabelEmbedding<T> {
    fn from(e: CompressedEmbedding<T>) -> Self {
        LabelEmbedding::Compressed(e)
    }
}

impl<T: Scalar> LabelEmbedding<T> {
    pub fn identity(labels: usize) -> Self {
        FullEmbedding::identity(labels).into()
    }

    pub fn labels(&self) -> usize {
        match self {
            LabelEmbedding::Full(e) => e.labels(),
            LabelEmbedding::Compressed(e) => e.labels(),
        }
    }

    /// Compressed dimension `h`, or 0 for the full form.
    pub fn compressed_dim(&self) -> usize {
        match self {
            LabelEmbedding::Full(_) => 0,
            LabelEmbedding::Compressed(e) => e.dim(),
        }
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.labels() {
            return Err(Error::Index { index: y, len: self.labels() });
        }
        Ok(())
    }

    /// Embedding of label `y`: row `y` of the table, or `ReLU(A_y · B)`.
    pub fn row(&self, y: usize) -> Result<Vec<T>> {
        self.check_label(y)?;
        match self {
            LabelEmbedding::Full(e) => Ok(e.table.row(y).to_vec()),
            LabelEmbedding::Compressed(e) => {
                let (m, h) = (e.labels(), e.dim());
                let ay = e.a.row(y);
                let mut out = vec![T::zero(); m];
                for (k, &w) in ay.iter().enumerate() {
                    let brow = &e.b.data()[k * m..(k + 1) * m];
                    for (o, &bv) in out.iter_mut().zip(brow) {
                        *o += w * bv;
                    }
                }
                debug_assert_eq!(ay.len(), h);
                Ok(out.into_iter().map(|v| v.max(T::zero())).collect())
            }
        }
    }

    /// `softmax(row(y))`.
    pub fn normalized_row(&self, y: usize) -> Result<Vec<T>> {
        Ok(softmax(&self.row(y)?))
    }

    /// The m×m matrix of embedding rows (reconstructed for the compressed form).
    pub fn matrix(&self) -> Tensor<T> {
        let m = self.labels();
        let data = (0..m).flat_map(|y| self.row(y).expect("label in range")).collect();
        Tensor::new([m, m], data).expect("m×m")
    }

    /// The m×m matrix of normalized rows, `σ(E_i)_j`.
    pub fn similarity(&self) -> Tensor<T> {
        let m = self.labels();
        let data = (0..m).flat_map(|y| self.normalized_row(y).expect("label in range")).collect();
        Tensor::new([m, m], data).expect("m×m")
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            LabelEmbedding::Full(e) => vec![&e.table],
            LabelEmbedding::Compressed(e) => vec![&e.a, &e.b],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            LabelEmbedding::Full(e) => vec![&mut e.table],
            LabelEmbedding::Compressed(e) => vec![&mut e.a, &mut e.b],
        }
    }

    /// A fixed embedding is recorded as a constant and never updated.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.params().iter().all(|p| p.requires_grad())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundEmbedding {
        match self {
            LabelEmbedding::Full(e) => BoundEmbedding::Full { table: tape.param(&e.table) },
            LabelEmbedding::Compressed(e) => BoundEmbedding::Compressed { a: tape.param(&e.a), b: tape.param(&e.b) },
        }
    }

    /// Adds the gradients left on the tape into the embedding parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundEmbedding) -> Result<()> {
        match (self, bound) {
            (LabelEmbedding::Full(e), BoundEmbedding::Full { table }) => tape.accumulate_into(*table, &mut e.table),
            (LabelEmbedding::Compressed(e), BoundEmbedding::Compressed { a, b }) => {
                tape.accumulate_into(*a, &mut e.a)?;
                tape.accumulate_into(*b, &mut e.b)
            }
            _ => Err(Error::Usage("embedding bound with a different form".into())),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LabelEmbedding<U> {
        match self {
            LabelEmbedding::Full(e) => LabelEmbedding::Full(FullEmbedding { table: e.table.cast() }),
            LabelEmbedding::Compressed(e) => {
                LabelEmbedding::Compressed(CompressedEmbedding { a: e.a.cast(), b: e.b.cast() })
            }
        }
    }
}
