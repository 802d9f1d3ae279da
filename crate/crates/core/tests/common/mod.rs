//! Independent reference computations for the integration tests.
//!
//! Everything here works on nested `Vec`s with explicit loops; model
//! parameters are copied out of the library types once and never pass
//! through library arithmetic.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use attnflow::attention::{AttentionBlock, CbamBlock, Mlp, SeBlock};
use attnflow::flow::{FlowConfig, FlowModel};
use attnflow::nn::{self, Conv2d, Linear};
use attnflow::rng;
use ndarray::{Array2, Array3};
use rand::Rng;

pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(a: &Array3<f64>) -> Map {
    let (c, h, w) = a.dim();
    (0..c).map(|ci| (0..h).map(|y| (0..w).map(|x| a[[ci, y, x]]).collect()).collect()).collect()
}

pub fn to_grid(a: &Array2<f64>) -> Vec<Vec<f64>> {
    let (h, w) = a.dim();
    (0..h).map(|y| (0..w).map(|x| a[[y, x]]).collect()).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct Dense {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Dense {
    fn from(l: &Linear) -> Self {
        let (o, i) = l.weight.dim();
        Dense {
            w: (0..o).map(|r| (0..i).map(|c| l.weight[[r, c]]).collect()).collect(),
            b: (0..o).map(|r| l.bias[r]).collect(),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w.len());
        for (row, b) in self.w.iter().zip(&self.b) {
            let mut acc = *b;
            for (wi, vi) in row.iter().zip(v) {
                acc += wi * vi;
            }
            out.push(acc);
        }
        out
    }
}

pub fn mlp(m: &Mlp, v: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = Dense::from(&m.fc1).apply(v).into_iter().map(|a| if a > 0.0 { a } else { 0.0 }).collect();
    Dense::from(&m.fc2).apply(&h)
}

fn channel_mean(x: &Map, c: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for row in &x[c] {
        for v in row {
            s += v;
            n += 1.0;
        }
    }
    s / n
}

fn channel_max(x: &Map, c: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for row in &x[c] {
        for &v in row {
            if v > m {
                m = v;
            }
        }
    }
    m
}

pub fn se(x: &Map, b: &SeBlock) -> Map {
    let pooled: Vec<f64> = (0..x.len()).map(|c| channel_mean(x, c)).collect();
    let gate: Vec<f64> = mlp(&b.mlp, &pooled).into_iter().map(sigmoid).collect();
    let mut y = x.clone();
    for c in 0..x.len() {
        for row in y[c].iter_mut() {
            for v in row.iter_mut() {
                *v *= gate[c];
            }
        }
    }
    y
}

pub fn cbam_channel_gate(x: &Map, b: &CbamBlock) -> Vec<f64> {
    let avg: Vec<f64> = (0..x.len()).map(|c| channel_mean(x, c)).collect();
    let max: Vec<f64> = (0..x.len()).map(|c| channel_max(x, c)).collect();
    let a = mlp(&b.mlp, &avg);
    let m = mlp(&b.mlp, &max);
    a.iter().zip(&m).map(|(p, q)| sigmoid(p + q)).collect()
}

pub fn cbam_spatial_gate(x: &Map, b: &CbamBlock) -> Vec<Vec<f64>> {
    let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let mut pooled = vec![vec![vec![0.0; w]; h]; 2];
    for yy in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            let mut m = f64::NEG_INFINITY;
            for ch in x.iter() {
                s += ch[yy][xx];
                if ch[yy][xx] > m {
                    m = ch[yy][xx];
                }
            }
            pooled[0][yy][xx] = s / c as f64;
            pooled[1][yy][xx] = m;
        }
    }
    conv(&pooled, &b.spatial)[0].iter().map(|r| r.iter().map(|&v| sigmoid(v)).collect()).collect()
}

pub fn cbam(x: &Map, b: &CbamBlock) -> Map {
    let gate = cbam_channel_gate(x, b);
    let mut refined = x.clone();
    for (c, ch) in refined.iter_mut().enumerate() {
        for row in ch.iter_mut() {
            for v in row.iter_mut() {
                *v *= gate[c];
            }
        }
    }
    let s = cbam_spatial_gate(&refined, b);
    for ch in refined.iter_mut() {
        for (yy, row) in ch.iter_mut().enumerate() {
            for (xx, v) in row.iter_mut().enumerate() {
                *v *= s[yy][xx];
            }
        }
    }
    refined
}

pub fn attention(x: &Map, b: &AttentionBlock) -> Map {
    match b {
        AttentionBlock::Se(s) => se(x, s),
        AttentionBlock::Cbam(c) => cbam(x, c),
    }
}

/// Direct-sum convolution with zero padding.
pub fn conv(x: &Map, c: &Conv2d) -> Map {
    let (o, i, k, _) = c.weight.dim();
    let (h, w) = (x[0].len() as isize, x[0][0].len() as isize);
    let (s, p) = (c.stride as isize, c.padding as isize);
    let oh = ((h + 2 * p - k as isize) / s + 1) as usize;
    let ow = ((w + 2 * p - k as isize) / s + 1) as usize;
    let mut out = vec![vec![vec![0.0; ow]; oh]; o];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = c.bias[oc];
                for ic in 0..i {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            let ix = ox as isize * s + kx as isize - p;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                acc += c.weight[[oc, ic, ky, kx]] * x[ic][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[oc][oy][ox] = acc;
            }
        }
    }
    out
}

pub fn relu(x: &Map) -> Map {
    x.iter()
        .map(|ch| ch.iter().map(|r| r.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()).collect())
        .collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

/// `relu(Σ_k mean(G_k)·A_k)` by loops.
pub fn gradcam(act: &Map, grad: &Map) -> Vec<Vec<f64>> {
    let (h, w) = (act[0].len(), act[0][0].len());
    let mut out = vec![vec![0.0; w]; h];
    for k in 0..act.len() {
        let mut alpha = 0.0;
        for row in &grad[k] {
            for g in row {
                alpha += g;
            }
        }
        alpha /= (h * w) as f64;
        for yy in 0..h {
            for xx in 0..w {
                out[yy][xx] += alpha * act[k][yy][xx];
            }
        }
    }
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Map, b: &Map) -> f64 {
    let mut m: f64 = 0.0;
    for (ca, cb) in a.iter().zip(b) {
        for (ra, rb) in ca.iter().zip(cb) {
            assert_eq!(ra.len(), rb.len());
            for (x, y) in ra.iter().zip(rb) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}

/// `log|det A|` by LU decomposition with partial pivoting.
pub fn slogdet(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        let d = a[col][col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / d;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    acc
}

/// Jacobian of `f` at `x` by central differences; `jac[i][j] = ∂f_i/∂x_j`.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; f(x).len()];
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..fp.len() {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn random_map<R: Rng>(r: &mut R, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((c, h, w), || r.random_range(-2.0..2.0))
}

/// Flow with every subnet parameter redrawn uniformly from `±spread`.
pub fn random_flow(dim: usize, blocks: usize, seed: u64, spread: f64) -> FlowModel {
    let cfg = FlowConfig {
        blocks,
        ..Default::default()
    };
    let mut flow = FlowModel::new(dim, &cfg, &mut rng::stream(seed, "perm")).unwrap();
    let mut r = rng::stream(seed, "params");
    let n = nn::param_count(&flow);
    let values: Vec<f64> = (0..n).map(|_| r.random_range(-spread..spread)).collect();
    nn::unflatten(&mut flow, &values);
    flow
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Reads a golden file; with `ATTNFLOW_BLESS=1` (re)writes it from `actual` first.
pub fn golden(name: &str, actual: &[u8]) -> Vec<u8> {
    let path = golden_dir().join(name);
    if std::env::var("ATTNFLOW_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    std::fs::read(&path).unwrap_or_else(|e| panic!("golden file {} unreadable: {e}", path.display()))
}
