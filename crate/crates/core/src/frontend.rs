//! Learnable radar preprocessing: residual windows in the log domain and
//! near-unitary DFTs along fast time (range) and slow time (Doppler),
//! with the mirrored inverse used on the decoder side.
//!
//! Batched complex data is laid out as `[2, n * antennas, samples, chirps]`
//! with the real part first.

use serde::{Deserialize, Serialize};
use vibeam_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::scene::ComplexCube;

/// Smallest window product accepted by de-windowing.
pub const DEWINDOW_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    #[default]
    Hamming,
    Rectangular,
}

pub fn base_window(kind: WindowKind, n: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rectangular => vec![1.0; n],
        WindowKind::Hamming if n == 1 => vec![1.0],
        WindowKind::Hamming => (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect(),
    }
}

/// Unitary DFT `exp(-j 2 pi k n / N) / sqrt(N)` as `[2, N, N]`; the
/// conjugate matrix when `conjugate` is set.
pub fn dft_matrix(n: usize, conjugate: bool) -> Tensor {
    let scale = 1.0 / (n as f64).sqrt();
    let sign = if conjugate { 1.0 } else { -1.0 };
    let mut data = vec![0.0; 2 * n * n];
    for k in 0..n {
        for j in 0..n {
            // reduce k*j mod n first so large products keep full precision
            let phase = sign * 2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            data[k * n + j] = scale * phase.cos();
            data[n * n + k * n + j] = scale * phase.sin();
        }
    }
    Tensor::new(vec![2, n, n], data).expect("dft shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontendDims {
    pub antennas: usize,
    pub samples: usize,
    pub chirps: usize,
    /// Chirp extent after zero padding.
    pub padded: usize,
}

impl FrontendDims {
    pub fn input_dim(&self) -> usize {
        2 * self.antennas * self.samples * self.chirps
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.antennas * self.samples * self.padded
    }
}

/// Learnable residuals: window log-gains and complex DFT offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontendParams {
    pub delta_s: Tensor,
    pub delta_c: Tensor,
    pub delta_r: Tensor,
    pub delta_d: Tensor,
}

impl FrontendParams {
    pub fn zeros(dims: FrontendDims) -> Self {
        Self {
            delta_s: Tensor::zeros(vec![dims.samples]),
            delta_c: Tensor::zeros(vec![dims.padded]),
            delta_r: Tensor::zeros(vec![2, dims.samples, dims.samples]),
            delta_d: Tensor::zeros(vec![2, dims.padded, dims.padded]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> FrontendVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        FrontendVars {
            delta_s: leaf(&self.delta_s),
            delta_c: leaf(&self.delta_c),
            delta_r: leaf(&self.delta_r),
            delta_d: leaf(&self.delta_d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FrontendVars {
    pub delta_s: Var,
    pub delta_c: Var,
    pub delta_r: Var,
    pub delta_d: Var,
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub dims: FrontendDims,
    pub window: WindowKind,
}

impl Frontend {
    pub fn new(dims: FrontendDims, window: WindowKind) -> Result<Self> {
        if dims.chirps > dims.padded {
            return Err(Error::Dimension(format!(
                "{} chirps do not fit a padded extent of {}",
                dims.chirps, dims.padded
            )));
        }
        Ok(Self { dims, window })
    }

    /// Unit-norm window `w0 * exp(delta) / ||w0 * exp(delta)||`.
    pub fn effective_window(&self, g: &mut Graph, delta: Var) -> Result<Var> {
        let n = g.shape(delta)[0];
        let base = g.constant(Tensor::vector(base_window(self.window, n)));
        let e = g.exp(delta)?;
        let u = g.mul(base, e)?;
        let sq = g.square(u)?;
        let s = g.sum(sq)?;
        let norm = g.sqrt(s)?;
        Ok(g.div(u, norm)?)
    }

    /// `W = w_s w_c^T` as `[S, C']`.
    pub fn window_matrix(&self, g: &mut Graph, v: &FrontendVars) -> Result<Var> {
        let (s, c) = (self.dims.samples, self.dims.padded);
        let ws = self.effective_window(g, v.delta_s)?;
        let wc = self.effective_window(g, v.delta_c)?;
        let ws = g.reshape(ws, &[s, 1])?;
        let wc = g.reshape(wc, &[1, c])?;
        Ok(g.matmul(ws, wc)?)
    }

    fn tiled_window(&self, g: &mut Graph, w: Var, n: usize) -> Result<Var> {
        let copies = 2 * n * self.dims.antennas;
        let parts = vec![w; copies];
        let t = g.concat(&parts, 0)?;
        Ok(g.reshape(t, &[2, n * self.dims.antennas, self.dims.samples, self.dims.padded])?)
    }

    /// `F_r = F_r0 + delta_r` (forward DFT) and `F_d = F_d0 + delta_d`
    /// where `F_d0` is the conjugate DFT, so that right-multiplying by
    /// `F_d^H` applies a forward DFT along chirps.
    pub fn dft_matrices(&self, g: &mut Graph, v: &FrontendVars) -> Result<(Var, Var)> {
        let fr0 = g.constant(dft_matrix(self.dims.samples, false));
        let fd0 = g.constant(dft_matrix(self.dims.padded, true));
        let fr = g.add(fr0, v.delta_r)?;
        let fd = g.add(fd0, v.delta_d)?;
        Ok((fr, fd))
    }

    /// Zero-padded batch tensor from rows in real-channel layout
    /// (`[2, antennas, samples, chirps]` flattened per row).
    pub fn input_tensor(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let FrontendDims { antennas: a, samples: s, chirps: c, padded: cp } = self.dims;
        let n = rows.len();
        let per = a * s * c;
        let mut data = vec![0.0; 2 * n * a * s * cp];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != 2 * per {
                return Err(Error::Dimension(format!("radar row of {} values, expected {}", row.len(), 2 * per)));
            }
            for part in 0..2 {
                for k in 0..a * s {
                    let src = &row[part * per + k * c..part * per + (k + 1) * c];
                    let dst = ((part * n + i) * a * s + k) * cp;
                    data[dst..dst + c].copy_from_slice(src);
                }
            }
        }
        Ok(Tensor::new(vec![2, n * a, s, cp], data)?)
    }

    /// `Y = F_r (X * W) F_d^H` per antenna slice, returned as `[n, 2 A S C']`
    /// with real parts of all antennas before imaginary parts.
    pub fn forward(&self, g: &mut Graph, v: &FrontendVars, x: Var) -> Result<Var> {
        let FrontendDims { antennas: a, samples: s, padded: cp, .. } = self.dims;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[0] != 2 || shape[1] % a != 0 || shape[2] != s || shape[3] != cp {
            return Err(Error::Dimension(format!("frontend input {shape:?}")));
        }
        let n = shape[1] / a;
        let w = self.window_matrix(g, v)?;
        let wt = self.tiled_window(g, w, n)?;
        let xw = g.mul(x, wt)?;
        let (fr, fd) = self.dft_matrices(g, v)?;
        // range DFT: F_r on the left of every slice
        let cols = g.permute(xw, &[0, 2, 1, 3])?;
        let cols = g.reshape(cols, &[2, s, n * a * cp])?;
        let yr = g.complex_matmul(fr, cols)?;
        // Doppler DFT: F_d^H on the right of every slice
        let yr = g.reshape(yr, &[2, s, n * a, cp])?;
        let rows = g.permute(yr, &[0, 2, 1, 3])?;
        let rows = g.reshape(rows, &[2, n * a * s, cp])?;
        let fdh = g.conj_transpose(fd)?;
        let y = g.complex_matmul(rows, fdh)?;
        let y = g.reshape(y, &[2, n, a * s * cp])?;
        let y = g.permute(y, &[1, 0, 2])?;
        Ok(g.reshape(y, &[n, 2 * a * s * cp])?)
    }

    /// Mirror of [`Frontend::forward`]: `F_r^H Y F_d`, de-windowed and
    /// cropped back to the unpadded chirps, as `[n, 2 A S C]`.
    pub fn inverse(&self, g: &mut Graph, v: &FrontendVars, z: Var) -> Result<Var> {
        let FrontendDims { antennas: a, samples: s, chirps: c, padded: cp } = self.dims;
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.dims.feature_dim() {
            return Err(Error::Dimension(format!("frontend features {shape:?}")));
        }
        let n = shape[0];
        let w = self.window_matrix(g, v)?;
        let wmin = g.value(w).data().iter().copied().fold(f64::INFINITY, f64::min);
        if wmin < DEWINDOW_MIN {
            return Err(Error::InvalidArgument(format!(
                "singular de-window: window entry {wmin:e} below {DEWINDOW_MIN:e}"
            )));
        }
        let (fr, fd) = self.dft_matrices(g, v)?;
        let y = g.reshape(z, &[n, 2, a * s * cp])?;
        let y = g.permute(y, &[1, 0, 2])?;
        let y = g.reshape(y, &[2, n * a * s, cp])?;
        let u = g.complex_matmul(y, fd)?;
        let u = g.reshape(u, &[2, n * a, s, cp])?;
        let cols = g.permute(u, &[0, 2, 1, 3])?;
        let cols = g.reshape(cols, &[2, s, n * a * cp])?;
        let frh = g.conj_transpose(fr)?;
        let xw = g.complex_matmul(frh, cols)?;
        let xw = g.reshape(xw, &[2, s, n * a, cp])?;
        let xw = g.permute(xw, &[0, 2, 1, 3])?;
        let wt = self.tiled_window(g, w, n)?;
        let x = g.div(xw, wt)?;
        let x = if c < cp { g.slice(x, 3, 0, c)? } else { x };
        let x = g.reshape(x, &[2, n, a * s * c])?;
        let x = g.permute(x, &[1, 0, 2])?;
        Ok(g.reshape(x, &[n, 2 * a * s * c])?)
    }

    /// `||F_r^H F_r - I||_F^2 + ||F_d^H F_d - I||_F^2`
    pub fn unitarity_penalty(&self, g: &mut Graph, v: &FrontendVars) -> Result<Var> {
        let (fr, fd) = self.dft_matrices(g, v)?;
        let a = gram_defect(g, fr)?;
        let b = gram_defect(g, fd)?;
        Ok(g.add(a, b)?)
    }

    /// Convenience wrapper: forward transform of one cube.
    pub fn forward_cube(&self, params: &FrontendParams, cube: &ComplexCube) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = params.bind(&mut g, false);
        let row = cube.to_real_channels();
        let x = g.constant(self.input_tensor(&[&row])?);
        let z = self.forward(&mut g, &v, x)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Convenience wrapper: inverse transform of one feature row.
    pub fn inverse_row(&self, params: &FrontendParams, z: &[f64]) -> Result<ComplexCube> {
        let mut g = Graph::new();
        let v = params.bind(&mut g, false);
        let zv = g.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let x = self.inverse(&mut g, &v, zv)?;
        let d = self.dims;
        ComplexCube::from_real_channels(d.antennas, d.samples, d.chirps, g.value(x).data())
    }

    pub fn penalty_value(&self, params: &FrontendParams) -> Result<f64> {
        let mut g = Graph::new();
        let v = params.bind(&mut g, false);
        let p = self.unitarity_penalty(&mut g, &v)?;
        Ok(g.value(p).item())
    }
}

fn gram_defect(g: &mut Graph, f: Var) -> Result<Var> {
    let n = g.shape(f)[1];
    let fh = g.conj_transpose(f)?;
    let gram = g.complex_matmul(fh, f)?;
    let mut eye = vec![0.0; 2 * n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let eye = g.constant(Tensor::new(vec![2, n, n], eye)?);
    let d = g.sub(gram, eye)?;
    let sq = g.square(d)?;
    Ok(g.sum(sq)?)
}

/// Zero-extends the chirp axis to `padded`.
pub fn pad_cube(cube: &ComplexCube, padded: usize) -> Result<ComplexCube> {
    if cube.chirps > padded {
        return Err(Error::Dimension(format!("{} chirps exceed padded extent {padded}", cube.chirps)));
    }
    let mut out = ComplexCube::zeros(cube.antennas, cube.samples, padded);
    for a in 0..cube.antennas {
        for s in 0..cube.samples {
            for c in 0..cube.chirps {
                out.data[(a * cube.samples + s) * padded + c] = cube.at(a, s, c);
            }
        }
    }
    Ok(out)
}
