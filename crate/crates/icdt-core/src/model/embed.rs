//! Fixed (non-learned) embeddings: the frequency embedding of the diffusion
//! timestep and the 2D sine-cosine positional table for patch tokens.

use crate::tensor::{Scalar, Tensor};

/// Size of the timestep frequency embedding fed to the conditioning MLP.
pub const TIMESTEP_EMBED_DIM: usize = 256;

/// Frequency embedding of a timestep: first half sin(t * w_j), second half
/// cos(t * w_j), with w_j geometrically spaced from 1 down to ~1/10000.
pub fn timestep_frequency_embedding<E: Scalar>(t: f64, dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut data = vec![E::zero(); dim];
    for j in 0..half {
        let omega = (-(10000.0f64.ln()) * j as f64 / half as f64).exp();
        data[j] = E::from_f64((t * omega).sin());
        data[half + j] = E::from_f64((t * omega).cos());
    }
    Tensor::from_vec(vec![1, dim], data).expect("timestep embedding shape")
}

/// 1D sine-cosine code of a position, `dim` must be even: `dim/2` sin
/// coordinates followed by `dim/2` cos coordinates.
fn sincos_1d(pos: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for j in 0..half {
        let omega = 1.0 / 10000f64.powf(j as f64 / half as f64);
        out[j] = (pos * omega).sin();
        out[half + j] = (pos * omega).cos();
    }
}

/// Positional table for a `grid x grid` token layout, `[grid*grid, dim]`.
/// The embedding width is split evenly between the row code and the column
/// code; tokens are ordered row-major to match patchify.
pub fn sincos_pos_table_2d<E: Scalar>(grid: usize, dim: usize) -> Tensor<E> {
    assert!(dim % 4 == 0, "positional table needs dim divisible by 4");
    let half = dim / 2;
    let mut data = vec![E::zero(); grid * grid * dim];
    let mut row_code = vec![0.0; half];
    let mut col_code = vec![0.0; half];
    for gy in 0..grid {
        sincos_1d(gy as f64, half, &mut row_code);
        for gx in 0..grid {
            sincos_1d(gx as f64, half, &mut col_code);
            let base = (gy * grid + gx) * dim;
            for j in 0..half {
                data[base + j] = E::from_f64(row_code[j]);
                data[base + half + j] = E::from_f64(col_code[j]);
            }
        }
    }
    Tensor::from_vec(vec![grid * grid, dim], data).expect("pos table shape")
}
