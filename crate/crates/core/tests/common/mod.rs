//! Helpers shared by the integration tests: independent oracles and random
//! inputs. Nothing here calls the library code it is used to check.

#![allow(dead_code)]

use egic::image::LabelMap;
use egic_tensor::check::{central_difference, relative_error};
use egic_tensor::{Array, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Array {
    let mut r = rng(seed);
    Array::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Largest relative error between tape gradients and central differences of
/// step `h`, over every input.
pub fn grad_check(inputs: &[Array], h: f64, f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let grads = tape.backward(f(&vars));
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        let numeric = central_difference(
            |x| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let v = if j == k { Array::new(a.shape(), x.to_vec()) } else { a.clone() };
                        tape.constant(v)
                    })
                    .collect();
                f(&vars).item()
            },
            input.data(),
            h,
        );
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Label map of random axis-aligned rectangles over a random background,
/// classes `1..=classes`.
pub fn random_label_map(r: &mut impl Rng, h: usize, w: usize, classes: u16) -> LabelMap {
    let mut m = LabelMap::filled(h, w, r.random_range(1..=classes));
    for _ in 0..r.random_range(0..8) {
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (y1, x1) = (r.random_range(y0..h) + 1, r.random_range(x0..w) + 1);
        let c = r.random_range(1..=classes);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, c);
            }
        }
    }
    m
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Per-pixel size of the 4-connected same-class component, by union-find.
pub fn component_areas(m: &LabelMap) -> Vec<usize> {
    let (h, w) = m.size();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (ny, nx) in [(y + 1, x), (y, x + 1)] {
                if ny < h && nx < w && m.get(ny, nx) == m.get(y, x) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, ny * w + nx));
                    parent[a] = b;
                }
            }
        }
    }
    let roots: Vec<usize> = (0..h * w).map(|i| find(&mut parent, i)).collect();
    let mut size = vec![0usize; h * w];
    for &r in &roots {
        size[r] += 1;
    }
    roots.iter().map(|&r| size[r]).collect()
}

/// Matrix square root by Denman–Beavers iteration.
pub fn sqrtm_denman_beavers(a: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = nalgebra::DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta < 1e-14 * y.norm() {
            break;
        }
    }
    y
}

/// Random symmetric positive definite matrix `B Bᵀ + εI`.
pub fn random_spd(n: usize, seed: u64) -> nalgebra::DMatrix<f64> {
    let mut r = rng(seed);
    let b = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    &b * b.transpose() + nalgebra::DMatrix::<f64>::identity(n, n) * 0.05
}
