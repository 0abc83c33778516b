//! Brute-force double-loop reference implementations, written straight from
//! the loss definitions and sharing no code with the library.

#![allow(dead_code)]

use projnce::numerics::{Mat64, RngState};

pub fn random_sphere(n: usize, d: usize, rng: &mut RngState) -> Mat64 {
    let mut z = Mat64::zeros(n, d);
    for i in 0..n {
        let u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        for t in 0..d {
            z[(i, t)] = u[t] / norm;
        }
    }
    z
}

/// Labels in `0..m` with every class at least twice.
pub fn random_labels(n: usize, m: usize, rng: &mut RngState) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| if i < 2 * m { i % m } else { rng.below(m) }).collect();
    rng.shuffle(&mut y);
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() {
        s += a[t] * b[t];
    }
    s
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Identity,
    Centroid,
    Nw,
    Median,
}

pub struct Oracle<'a> {
    pub z: &'a Mat64,
    pub y: &'a [usize],
    pub m: usize,
    pub tau: f64,
    pub h: f64,
}

impl<'a> Oracle<'a> {
    fn n(&self) -> usize {
        self.z.rows()
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.z.row(i).to_vec()
    }

    fn members(&self, c: usize) -> Vec<usize> {
        (0..self.n()).filter(|&k| self.y[k] == c).collect()
    }

    pub fn partner(&self, i: usize) -> usize {
        let n = self.n();
        (1..n).map(|s| (i + s) % n).find(|&k| self.y[k] == self.y[i]).expect("class of size ≥ 2")
    }

    pub fn class_mean(&self, c: usize) -> Vec<f64> {
        let mem = self.members(c);
        let mut s = vec![0.0; self.z.cols()];
        for &k in &mem {
            for t in 0..s.len() {
                s[t] += self.z[(k, t)];
            }
        }
        s.iter().map(|v| v / mem.len() as f64).collect()
    }

    pub fn leave_out_mean(&self, i: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.z.cols()];
        let mut cnt = 0.0;
        for k in 0..self.n() {
            if k != i && self.y[k] == self.y[i] {
                cnt += 1.0;
                for t in 0..s.len() {
                    s[t] += self.z[(k, t)];
                }
            }
        }
        s.iter().map(|v| v / cnt).collect()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        if d <= self.h {
            (1.0 - (d / self.h).powi(2)) / self.h
        } else {
            0.0
        }
    }

    /// `p̂(c | z_j)` with the whole batch (self included) as reference.
    pub fn soft(&self, j: usize, c: usize) -> f64 {
        let zj = self.row(j);
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..self.n() {
            let w = self.kernel(&zj, &self.row(l));
            den += w;
            if self.y[l] == c {
                num += w;
            }
        }
        num / den
    }

    pub fn fhat(&self, c: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.z.cols()];
        let mut den = 0.0;
        for j in 0..self.n() {
            let w = self.soft(j, c);
            den += w;
            for t in 0..s.len() {
                s[t] += w * self.z[(j, t)];
            }
        }
        s.iter().map(|v| v / den).collect()
    }

    pub fn median(&self, c: usize) -> Vec<f64> {
        let mem = self.members(c);
        (0..self.z.cols())
            .map(|t| {
                let mut v: Vec<f64> = mem.iter().map(|&k| self.z[(k, t)]).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            })
            .collect()
    }

    fn class_value(&self, role: Role, c: usize) -> Vec<f64> {
        match role {
            Role::Centroid => self.class_mean(c),
            Role::Nw => self.fhat(c),
            Role::Median => self.median(c),
            Role::Identity => unreachable!(),
        }
    }

    pub fn positive(&self, role: Role, i: usize) -> Vec<f64> {
        match role {
            Role::Identity => self.row(self.partner(i)),
            Role::Centroid => self.leave_out_mean(i),
            r => self.class_value(r, self.y[i]),
        }
    }

    /// Value a sample `k` contributes in a denominator.
    pub fn sample(&self, role: Role, k: usize) -> Vec<f64> {
        match role {
            Role::Identity => self.row(k),
            r => self.class_value(r, self.y[k]),
        }
    }

    pub fn selfp(&self, pos: Role, neg: Role, include_anchor: bool) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            let zi = self.row(i);
            let mut den = 0.0;
            for k in 0..n {
                if k != i || include_anchor {
                    den += (dot(&zi, &self.sample(neg, k)) / self.tau).exp();
                }
            }
            total += -dot(&zi, &self.positive(pos, i)) / self.tau + den.ln();
        }
        total / n as f64
    }

    pub fn r(&self, pos: Role, neg: Role, class_exclusion: bool) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            let zi = self.row(i);
            let (mut a, mut b) = (0.0, 0.0);
            for k in 0..n {
                if k == i || (class_exclusion && self.y[k] == self.y[i]) {
                    continue;
                }
                a += (dot(&zi, &self.sample(pos, k)) / self.tau).exp();
                b += (dot(&zi, &self.sample(neg, k)) / self.tau).exp();
            }
            total += a / b;
        }
        total / n as f64
    }

    pub fn supcon(&self) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            let zi = self.row(i);
            let den: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(&zi, &self.row(j)) / self.tau).exp())
                .sum();
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && self.y[p] == self.y[i]).collect();
            let s: f64 = pos
                .iter()
                .map(|&p| ((dot(&zi, &self.row(p)) / self.tau).exp() / den).ln())
                .sum();
            total -= s / pos.len() as f64;
        }
        total / n as f64
    }
}
