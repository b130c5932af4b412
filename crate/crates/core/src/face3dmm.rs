//! Linear PCA face model: `S = S̄ + B_id·α + B_exp·β`.
//!
//! Meshes are flat `3N` vectors laid out vertex-major (`x0, y0, z0, x1, ...`).
//! Bases are stored row-major with one row per mesh coordinate.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{normal, stream, StreamRng};

pub const ID_DIM: usize = 80;
pub const EXP_DIM: usize = 64;
pub const ROT_DIM: usize = 3;
pub const MOUTH_DIM: usize = 13;
pub const REST_DIM: usize = EXP_DIM - MOUTH_DIM;

pub const DESK_VERTICES: usize = 68;
pub const DESK_LIP_FRACTION: f64 = 20.0 / 68.0;

/// Minimum share of squared mass each mouth column keeps on lip coordinates.
pub const MOUTH_LIP_MASS: f64 = 0.9;

const MOUTH_LIP_SHARE: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MouthParams(pub [f64; MOUTH_DIM]);

impl MouthParams {
    pub fn zeros() -> Self {
        Self([0.0; MOUTH_DIM])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; MOUTH_DIM] = values.try_into().map_err(|_| {
            Error::Invalid(format!("mouth params need {MOUTH_DIM} values, got {}", values.len()))
        })?;
        Ok(Self(arr))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: [f64; ROT_DIM],
}

impl FaceParams {
    pub fn neutral() -> Self {
        Self {
            alpha: vec![0.0; ID_DIM],
            beta: vec![0.0; EXP_DIM],
            gamma: [0.0; ROT_DIM],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceBasis {
    mean_shape: Vec<f64>,
    id_basis: Vec<f64>,
    exp_basis: Vec<f64>,
    lip_idx: Vec<usize>,
    mouth_idx: Vec<usize>,
}

impl FaceBasis {
    pub fn new(
        mean_shape: Vec<f64>,
        id_basis: Vec<f64>,
        exp_basis: Vec<f64>,
        lip_idx: Vec<usize>,
        mouth_idx: Vec<usize>,
    ) -> Result<Self> {
        let rows = mean_shape.len();
        if rows == 0 || rows % 3 != 0 {
            return Err(Error::Construction(format!("mean shape length {rows} is not 3N")));
        }
        if id_basis.len() != rows * ID_DIM || exp_basis.len() != rows * EXP_DIM {
            return Err(Error::Construction("basis sizes disagree with mean shape".into()));
        }
        let n = rows / 3;
        if lip_idx.is_empty() || lip_idx.iter().any(|&i| i >= n) {
            return Err(Error::Construction("lip vertex indices empty or out of range".into()));
        }
        let mut seen = [false; EXP_DIM];
        if mouth_idx.len() != MOUTH_DIM {
            return Err(Error::Construction(format!("need {MOUTH_DIM} mouth dims")));
        }
        for &m in &mouth_idx {
            if m >= EXP_DIM || seen[m] {
                return Err(Error::Construction("mouth dims must be distinct and < 64".into()));
            }
            seen[m] = true;
        }
        Ok(Self {
            mean_shape,
            id_basis,
            exp_basis,
            lip_idx,
            mouth_idx,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn mean_shape(&self) -> &[f64] {
        &self.mean_shape
    }

    /// Row-major `3N × 80`.
    pub fn id_basis(&self) -> &[f64] {
        &self.id_basis
    }

    /// Row-major `3N × 64`.
    pub fn exp_basis(&self) -> &[f64] {
        &self.exp_basis
    }

    pub fn lip_idx(&self) -> &[usize] {
        &self.lip_idx
    }

    pub fn mouth_idx(&self) -> &[usize] {
        &self.mouth_idx
    }

    /// Expression dims outside the mouth set, ascending.
    pub fn rest_idx(&self) -> Vec<usize> {
        (0..EXP_DIM).filter(|k| !self.mouth_idx.contains(k)).collect()
    }

    pub fn id_column(&self, j: usize) -> Vec<f64> {
        self.id_basis.iter().skip(j).step_by(ID_DIM).copied().collect()
    }

    pub fn exp_column(&self, k: usize) -> Vec<f64> {
        self.exp_basis.iter().skip(k).step_by(EXP_DIM).copied().collect()
    }

    /// Mesh coordinate indices of the lip vertices, in vertex order.
    pub fn lip_coords(&self) -> Vec<usize> {
        self.lip_idx.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect()
    }

    /// Row-major `13 × 3L` map from mouth params to lip coordinate offsets.
    pub fn lip_geometry(&self) -> Vec<f64> {
        let coords = self.lip_coords();
        let mut out = Vec::with_capacity(MOUTH_DIM * coords.len());
        for &m in &self.mouth_idx {
            for &c in &coords {
                out.push(self.exp_basis[c * EXP_DIM + m]);
            }
        }
        out
    }

    /// Uniformly rescales the mean shape and both bases.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect();
        Self {
            mean_shape: s(&self.mean_shape),
            id_basis: s(&self.id_basis),
            exp_basis: s(&self.exp_basis),
            lip_idx: self.lip_idx.clone(),
            mouth_idx: self.mouth_idx.clone(),
        }
    }
}

pub fn assemble_mesh(basis: &FaceBasis, p: &FaceParams) -> Result<Vec<f64>> {
    if p.alpha.len() != ID_DIM || p.beta.len() != EXP_DIM {
        return Err(Error::Invalid(format!(
            "face params have {} identity and {} expression values, expected {ID_DIM} and {EXP_DIM}",
            p.alpha.len(),
            p.beta.len()
        )));
    }
    let mut mesh = basis.mean_shape.clone();
    for (i, s) in mesh.iter_mut().enumerate() {
        let id_row = &basis.id_basis[i * ID_DIM..(i + 1) * ID_DIM];
        let exp_row = &basis.exp_basis[i * EXP_DIM..(i + 1) * EXP_DIM];
        let mut acc = 0.0;
        for (b, a) in id_row.iter().zip(&p.alpha) {
            acc += b * a;
        }
        for (b, e) in exp_row.iter().zip(&p.beta) {
            acc += b * e;
        }
        *s += acc;
    }
    Ok(mesh)
}

pub fn embed_mouth_params(m: &MouthParams, beta_rest: &[f64], basis: &FaceBasis) -> Result<Vec<f64>> {
    if beta_rest.len() != REST_DIM {
        return Err(Error::Invalid(format!(
            "expected {REST_DIM} non-mouth expression values, got {}",
            beta_rest.len()
        )));
    }
    let mut beta = vec![0.0; EXP_DIM];
    for (&k, &v) in basis.mouth_idx.iter().zip(&m.0) {
        beta[k] = v;
    }
    for (k, &v) in basis.rest_idx().into_iter().zip(beta_rest) {
        beta[k] = v;
    }
    Ok(beta)
}

pub fn extract_mouth(beta: &[f64], basis: &FaceBasis) -> MouthParams {
    let mut m = [0.0; MOUTH_DIM];
    for (dst, &k) in m.iter_mut().zip(&basis.mouth_idx) {
        *dst = beta[k];
    }
    MouthParams(m)
}

pub fn extract_rest(beta: &[f64], basis: &FaceBasis) -> Vec<f64> {
    basis.rest_idx().into_iter().map(|k| beta[k]).collect()
}

pub fn lip_vertices(mesh: &[f64], basis: &FaceBasis) -> Vec<[f64; 3]> {
    basis
        .lip_idx
        .iter()
        .map(|&v| [mesh[3 * v], mesh[3 * v + 1], mesh[3 * v + 2]])
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Jaw(f64),
    Feature,
    Lip { outer: bool, angle: f64 },
}

struct Layout {
    points: Vec<[f64; 2]>,
    roles: Vec<Role>,
    lip_idx: Vec<usize>,
}

fn arc(out: &mut Layout, count: usize, f: impl Fn(f64) -> ([f64; 2], Role)) {
    for i in 0..count {
        let (p, role) = f((i as f64 + 0.5) / count as f64);
        out.points.push(p);
        out.roles.push(role);
    }
}

fn face_layout(n: usize, lips: usize) -> Layout {
    let rest = n - lips;
    let jaw = (rest * 17 + 24) / 48;
    let brows = (rest * 10 + 24) / 48;
    let nose = (rest * 9 + 24) / 48;
    let eyes = rest - jaw - brows - nose;
    let mut out = Layout {
        points: Vec::with_capacity(n),
        roles: Vec::with_capacity(n),
        lip_idx: Vec::with_capacity(lips),
    };
    arc(&mut out, jaw, |u| {
        let th = PI + PI * u;
        ([0.9 * th.cos(), 0.15 + 1.05 * th.sin()], Role::Jaw(u))
    });
    let left_brow = brows / 2;
    arc(&mut out, left_brow, |u| ([-0.7 + 0.5 * u, 0.55 + 0.08 * (PI * u).sin()], Role::Feature));
    arc(&mut out, brows - left_brow, |u| ([0.2 + 0.5 * u, 0.55 + 0.08 * (PI * u).sin()], Role::Feature));
    arc(&mut out, nose, |u| ([0.08 * (2.0 * PI * u).sin(), 0.35 - 0.55 * u], Role::Feature));
    let left_eye = eyes / 2;
    for (count, cx) in [(left_eye, -0.4), (eyes - left_eye, 0.4)] {
        arc(&mut out, count, |u| {
            let th = 2.0 * PI * u;
            ([cx + 0.15 * th.cos(), 0.35 + 0.06 * th.sin()], Role::Feature)
        });
    }
    let outer = (lips * 12 + 10) / 20;
    for (count, rx, ry, is_outer) in [(outer, 0.45, 0.2, true), (lips - outer, 0.3, 0.07, false)] {
        for k in 0..count {
            let th = PI - 2.0 * PI * k as f64 / count as f64;
            out.lip_idx.push(out.points.len());
            out.points.push([rx * th.cos(), -0.5 + ry * th.sin()]);
            out.roles.push(Role::Lip {
                outer: is_outer,
                angle: th,
            });
        }
    }
    out
}

fn harmonic(rng: &mut StreamRng, order: usize) -> Vec<(f64, f64)> {
    (0..=order)
        .map(|k| {
            let s = 1.0 / ((1 + k) * (1 + k)) as f64;
            (normal(rng) * s, if k == 0 { 0.0 } else { normal(rng) * s })
        })
        .collect()
}

fn eval_harmonic(h: &[(f64, f64)], th: f64) -> f64 {
    h.iter()
        .enumerate()
        .map(|(k, &(a, b))| a * (k as f64 * th).cos() + b * (k as f64 * th).sin())
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt, applied twice for stability, against `fixed` and earlier columns.
fn orthonormalize(cols: &mut [Vec<f64>], fixed: &[Vec<f64>]) -> Result<()> {
    for i in 0..cols.len() {
        for _ in 0..2 {
            for f in fixed {
                let p = dot(&cols[i], f);
                cols[i].iter_mut().zip(f).for_each(|(c, q)| *c -= p * q);
            }
            for j in 0..i {
                let (done, cur) = cols.split_at_mut(i);
                let p = dot(&cur[0], &done[j]);
                cur[0].iter_mut().zip(&done[j]).for_each(|(c, q)| *c -= p * q);
            }
            let norm = dot(&cols[i], &cols[i]).sqrt();
            if norm < 1e-9 {
                return Err(Error::Construction(format!("basis column {i} is degenerate")));
            }
            cols[i].iter_mut().for_each(|c| *c /= norm);
        }
    }
    Ok(())
}

fn pack(cols: &[Vec<f64>], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols.len()];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[i * cols.len() + j] = v;
        }
    }
    out
}

/// Share of a column's squared mass on the given coordinates.
pub fn mass_ratio(col: &[f64], coords: &[usize]) -> f64 {
    let on: f64 = coords.iter().map(|&c| col[c] * col[c]).sum();
    on / dot(col, col)
}

/// Builds a face-like landmark basis whose first 13 expression columns move the lips.
pub fn make_synthetic_basis(seed: u64, n: usize, lip_fraction: f64) -> Result<FaceBasis> {
    if n < 32 {
        return Err(Error::Construction(format!("need at least 32 vertices, got {n}")));
    }
    if !(lip_fraction > 0.0 && lip_fraction < 0.5) {
        return Err(Error::Construction(format!("lip fraction {lip_fraction} outside (0, 0.5)")));
    }
    let lips = ((n as f64 * lip_fraction).round() as usize).max(6);
    let layout = face_layout(n, lips);
    let rows = 3 * n;
    let mut mean_shape = vec![0.0; rows];
    for (v, p) in layout.points.iter().enumerate() {
        mean_shape[3 * v] = p[0];
        mean_shape[3 * v + 1] = p[1];
    }
    let lip_coords: Vec<usize> = layout.lip_idx.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();

    let mut rng = stream(seed, "basis-mouth", 0);
    let mut lip_parts = Vec::with_capacity(MOUTH_DIM);
    let mut jaw_parts = Vec::with_capacity(MOUTH_DIM);
    for _ in 0..MOUTH_DIM {
        let outer: Vec<_> = (0..3).map(|_| harmonic(&mut rng, 3)).collect();
        let inner_own: Vec<_> = (0..3).map(|_| harmonic(&mut rng, 3)).collect();
        let jaw: Vec<_> = (0..2).map(|_| harmonic(&mut rng, 6)).collect();
        let mut lip = vec![0.0; rows];
        let mut chin = vec![0.0; rows];
        for (v, role) in layout.roles.iter().enumerate() {
            match *role {
                Role::Lip { outer: is_outer, angle } => {
                    for axis in 0..3 {
                        let base = eval_harmonic(&outer[axis], angle);
                        let val = if is_outer {
                            base
                        } else {
                            0.8 * base + 0.5 * eval_harmonic(&inner_own[axis], angle)
                        };
                        lip[3 * v + axis] = if axis == 2 { 0.3 * val } else { val };
                    }
                }
                Role::Jaw(u) => {
                    for axis in 0..2 {
                        chin[3 * v + axis] = eval_harmonic(&jaw[axis], PI * u);
                    }
                }
                Role::Feature => {}
            }
        }
        lip_parts.push(lip);
        jaw_parts.push(chin);
    }
    orthonormalize(&mut lip_parts, &[])?;
    orthonormalize(&mut jaw_parts, &[])?;
    let (lip_w, jaw_w) = (MOUTH_LIP_SHARE.sqrt(), (1.0 - MOUTH_LIP_SHARE).sqrt());
    let mouth: Vec<Vec<f64>> = lip_parts
        .iter()
        .zip(&jaw_parts)
        .map(|(l, j)| l.iter().zip(j).map(|(a, b)| lip_w * a + jaw_w * b).collect())
        .collect();
    for (j, col) in mouth.iter().enumerate() {
        let ratio = mass_ratio(col, &lip_coords);
        if ratio < MOUTH_LIP_MASS {
            return Err(Error::Construction(format!(
                "mouth column {j} keeps only {ratio:.3} of its mass on the lips"
            )));
        }
    }

    let mut rng = stream(seed, "basis-expression", 0);
    let mut rest: Vec<Vec<f64>> = (0..REST_DIM)
        .map(|_| {
            let mut col: Vec<f64> = (0..rows).map(|_| normal(&mut rng)).collect();
            for &c in &lip_coords {
                col[c] *= 0.02;
            }
            col
        })
        .collect();
    let fixed: Vec<Vec<f64>> = jaw_parts.into_iter().chain(mouth.iter().cloned()).collect();
    orthonormalize(&mut rest, &fixed)?;

    let mut rng = stream(seed, "basis-identity", 0);
    const FEATURES: usize = 48;
    let feats: Vec<([f64; 2], f64)> = (0..FEATURES)
        .map(|_| {
            let w = [1.5 * normal(&mut rng), 1.5 * normal(&mut rng)];
            (w, rng.random::<f64>() * 2.0 * PI)
        })
        .collect();
    let mut ident: Vec<Vec<f64>> = (0..ID_DIM)
        .map(|_| {
            let coef: Vec<f64> = (0..3 * FEATURES).map(|_| normal(&mut rng)).collect();
            let mut col = vec![0.0; rows];
            for (v, p) in layout.points.iter().enumerate() {
                for axis in 0..3 {
                    col[3 * v + axis] = feats
                        .iter()
                        .enumerate()
                        .map(|(f, (w, ph))| coef[axis * FEATURES + f] * (w[0] * p[0] + w[1] * p[1] + ph).cos())
                        .sum();
                }
            }
            col
        })
        .collect();
    orthonormalize(&mut ident, &[])?;

    let exp_cols: Vec<Vec<f64>> = mouth.into_iter().chain(rest).collect();
    FaceBasis::new(
        mean_shape,
        pack(&ident, rows),
        pack(&exp_cols, rows),
        layout.lip_idx,
        (0..MOUTH_DIM).collect(),
    )
}

pub fn desk_basis(seed: u64) -> Result<FaceBasis> {
    make_synthetic_basis(seed, DESK_VERTICES, DESK_LIP_FRACTION)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> FaceBasis {
        desk_basis(3).unwrap()
    }

    fn randn(seed: u64, n: usize) -> Vec<f64> {
        let mut r = stream(seed, "test", 0);
        (0..n).map(|_| normal(&mut r)).collect()
    }

    #[test]
    fn desk_layout_has_twenty_lip_vertices() {
        let b = basis();
        assert_eq!(b.num_vertices(), 68);
        assert_eq!(b.lip_idx(), (48..68).collect::<Vec<_>>().as_slice());
        assert!(b.lip_idx().iter().all(|&v| b.mean_shape()[3 * v + 1] < 0.0));
    }

    #[test]
    fn zero_params_give_mean_shape() {
        let b = basis();
        assert_eq!(assemble_mesh(&b, &FaceParams::neutral()).unwrap(), b.mean_shape());
    }

    #[test]
    fn unit_identity_adds_first_column() {
        let b = basis();
        let mut p = FaceParams::neutral();
        p.alpha[0] = 1.0;
        let mesh = assemble_mesh(&b, &p).unwrap();
        let col = b.id_column(0);
        for i in 0..mesh.len() {
            assert_eq!(mesh[i], b.mean_shape()[i] + col[i]);
        }
    }

    #[test]
    fn assemble_matches_column_loop() {
        let b = basis();
        let p = FaceParams {
            alpha: randn(1, ID_DIM),
            beta: randn(2, EXP_DIM),
            gamma: [0.0; 3],
        };
        let mesh = assemble_mesh(&b, &p).unwrap();
        let mut oracle = b.mean_shape().to_vec();
        for j in 0..ID_DIM {
            for (o, c) in oracle.iter_mut().zip(b.id_column(j)) {
                *o += c * p.alpha[j];
            }
        }
        for k in 0..EXP_DIM {
            for (o, c) in oracle.iter_mut().zip(b.exp_column(k)) {
                *o += c * p.beta[k];
            }
        }
        for (a, o) in mesh.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_rejects_wrong_lengths() {
        let mut p = FaceParams::neutral();
        p.beta.pop();
        assert!(assemble_mesh(&basis(), &p).is_err());
    }

    #[test]
    fn mouth_embedding_places_and_round_trips() {
        let b = basis();
        let zero = embed_mouth_params(&MouthParams::zeros(), &[0.0; REST_DIM], &b).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let ones = embed_mouth_params(&MouthParams([1.0; MOUTH_DIM]), &[0.0; REST_DIM], &b).unwrap();
        for (k, v) in ones.iter().enumerate() {
            assert_eq!(*v, if b.mouth_idx().contains(&k) { 1.0 } else { 0.0 });
        }
        let m = MouthParams::from_slice(&randn(4, MOUTH_DIM)).unwrap();
        let rest = randn(5, REST_DIM);
        let beta = embed_mouth_params(&m, &rest, &b).unwrap();
        assert_eq!(extract_mouth(&beta, &b), m);
        assert_eq!(extract_rest(&beta, &b), rest);
    }

    #[test]
    fn lip_gather_matches_manual() {
        let b = basis();
        let mesh = randn(6, 3 * 68);
        let lips = lip_vertices(&mesh, &b);
        assert_eq!(lips.len(), 20);
        for (k, v) in lips.iter().enumerate() {
            let i = 48 + k;
            assert_eq!(*v, [mesh[3 * i], mesh[3 * i + 1], mesh[3 * i + 2]]);
        }
        let mut moved = mesh.clone();
        for c in 0..3 * 48 {
            moved[c] += 1.0;
        }
        assert_eq!(lip_vertices(&moved, &b), lips);
    }

    #[test]
    fn bases_are_orthonormal() {
        let b = basis();
        for (cols, width) in [(b.exp_basis(), EXP_DIM), (b.id_basis(), ID_DIM)] {
            let rows = cols.len() / width;
            for i in 0..width {
                for j in 0..width {
                    let g: f64 = (0..rows).map(|r| cols[r * width + i] * cols[r * width + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g - want).abs() < 1e-10, "gram[{i}][{j}] = {g}");
                }
            }
        }
    }

    #[test]
    fn mouth_columns_concentrate_on_lips() {
        let b = basis();
        let coords = b.lip_coords();
        for &m in b.mouth_idx() {
            assert!(mass_ratio(&b.exp_column(m), &coords) >= MOUTH_LIP_MASS);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(desk_basis(11).unwrap(), desk_basis(11).unwrap());
        assert_ne!(desk_basis(11).unwrap(), desk_basis(12).unwrap());
    }

    #[test]
    fn other_sizes_build() {
        for (n, f) in [(32, 0.25), (100, 0.3), (200, 0.1)] {
            let b = make_synthetic_basis(0, n, f).unwrap();
            assert_eq!(b.num_vertices(), n);
        }
        assert!(make_synthetic_basis(0, 31, 0.3).is_err());
        assert!(make_synthetic_basis(0, 68, 0.5).is_err());
    }

    #[test]
    fn assembly_is_affine_in_beta() {
        let b = basis();
        let alpha = randn(7, ID_DIM);
        let b1 = randn(8, EXP_DIM);
        let b2 = randn(9, EXP_DIM);
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let mk = |beta: &[f64]| {
            assemble_mesh(&b, &FaceParams { alpha: alpha.clone(), beta: beta.to_vec(), gamma: [0.0; 3] }).unwrap()
        };
        let diff: Vec<f64> = mk(&sum).iter().zip(mk(&b1)).map(|(x, y)| x - y).collect();
        let direct = assemble_mesh(&b, &FaceParams { alpha: vec![0.0; ID_DIM], beta: b2, gamma: [0.0; 3] }).unwrap();
        for (d, (s, m)) in diff.iter().zip(direct.iter().zip(b.mean_shape())) {
            assert!((d - (s - m)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_mouth_dims_barely_move_lips() {
        let b = basis();
        let lip_shift = |beta: &[f64]| -> f64 {
            let mesh = assemble_mesh(&b, &FaceParams { alpha: vec![0.0; ID_DIM], beta: beta.to_vec(), gamma: [0.0; 3] }).unwrap();
            b.lip_coords().iter().map(|&c| (mesh[c] - b.mean_shape()[c]).powi(2)).sum::<f64>().sqrt()
        };
        for trial in 0..50 {
            let m = randn(100 + trial, MOUTH_DIM);
            let r = randn(200 + trial, REST_DIM);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r: Vec<f64> = r.iter().map(|x| x * norm(&m) / norm(&r)).collect();
            let mouth_beta = embed_mouth_params(&MouthParams::from_slice(&m).unwrap(), &[0.0; REST_DIM], &b).unwrap();
            let rest_beta = embed_mouth_params(&MouthParams::zeros(), &r, &b).unwrap();
            let ratio = lip_shift(&rest_beta) / lip_shift(&mouth_beta);
            assert!(ratio < 0.1, "ratio {ratio}");
        }
    }
}
