use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{gram, vec_norm, Matrix};
use crate::rng::{stream, StreamRng};

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, 77)
}

pub fn random_matrix(r: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Matrix::from_row_major(rows, cols, data).unwrap()
}

pub fn random_vec(r: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

pub fn random_unit(r: &mut StreamRng, n: usize) -> Vec<f64> {
    let v = random_vec(r, n);
    let norm = vec_norm(&v);
    v.into_iter().map(|x| x / norm).collect()
}

pub fn random_symmetric(r: &mut StreamRng, n: usize) -> Matrix {
    let m = random_matrix(r, n, n);
    m.add(&m.transpose()).unwrap().scaled(0.5)
}

pub fn random_spd(r: &mut StreamRng, n: usize) -> Matrix {
    gram(&random_matrix(r, n + 3, n)).add_diagonal(0.1)
}
