//! Direct vs. indirect attention and the consistency loss between them.
//!
//! For a German word `m`, the direct attention over regions is row `m` of
//! `A_de`. Chaining its attention over English positions (row `m` of `B`)
//! through the English attention over regions gives the indirect attention
//! `(B·A_en)[m]`. If region, English word and German word behave like a
//! Markov chain X → Y → Z, both are the same conditional distribution.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const STOCHASTIC_TOL: f64 = 1e-6;

/// The three attention matrices of one caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `N × L`: English positions over regions.
    pub a_en: Tensor,
    /// `M × L`: German positions over regions.
    pub a_de: Tensor,
    /// `M × N`: German positions over English positions.
    pub b: Tensor,
}

pub fn check_row_stochastic(name: &str, t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::input(format!("{name} row {r} has entry {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::input(format!("{name} row {r} sums to {s}")));
        }
    }
    Ok(())
}

impl AttentionRecord {
    pub fn new(a_en: Tensor, a_de: Tensor, b: Tensor) -> Result<Self> {
        let rec = AttentionRecord { a_en, a_de, b };
        rec.check_shapes()?;
        check_row_stochastic("A_en", &rec.a_en)?;
        check_row_stochastic("A_de", &rec.a_de)?;
        check_row_stochastic("B", &rec.b)?;
        Ok(rec)
    }

    fn check_shapes(&self) -> Result<()> {
        let (n, l) = self.a_en.dims();
        let (m, l2) = self.a_de.dims();
        let (m2, n2) = self.b.dims();
        if l != l2 {
            return Err(Error::dim("attention record (A_en vs A_de)", self.a_en.shape(), self.a_de.shape()));
        }
        if m != m2 || n != n2 {
            return Err(Error::dim("attention record (B)", self.b.shape(), &[m, n]));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.a_en.cols()
    }

    pub fn english_len(&self) -> usize {
        self.a_en.rows()
    }

    pub fn german_len(&self) -> usize {
        self.a_de.rows()
    }

    /// Writes all three matrices as text. Values use the shortest decimal
    /// form that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, t) in [("A_en", &self.a_en), ("A_de", &self.a_de), ("B", &self.b)] {
            let (r, c) = t.dims();
            let _ = writeln!(out, "{name} {r} {c}");
            for i in 0..r {
                let row: Vec<String> = t.row_slice(i).iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut read = |expect: &str| -> Result<Tensor> {
            let (no, header) = lines
                .next()
                .ok_or_else(|| Error::input(format!("missing {expect} block")))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            let bad = || Error::input(format!("line {}: expected '{expect} <rows> <cols>'", no + 1));
            if parts.len() != 3 || parts[0] != expect {
                return Err(bad());
            }
            let r: usize = parts[1].parse().map_err(|_| bad())?;
            let c: usize = parts[2].parse().map_err(|_| bad())?;
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                let (no, line) = lines
                    .next()
                    .ok_or_else(|| Error::input(format!("{expect}: expected {r} rows")))?;
                let row = line
                    .split_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Error::input(format!("line {}: {e}", no + 1)))?;
                if row.len() != c {
                    return Err(Error::input(format!("line {}: expected {c} values, got {}", no + 1, row.len())));
                }
                data.extend(row);
            }
            Tensor::matrix(r, c, data)
        };
        let a_en = read("A_en")?;
        let a_de = read("A_de")?;
        let b = read("B")?;
        let rec = AttentionRecord { a_en, a_de, b };
        rec.check_shapes()?;
        Ok(rec)
    }
}

/// `B·A_en`, an `M × L` row-stochastic matrix.
pub fn indirect_attention(rec: &AttentionRecord) -> Result<Tensor> {
    rec.check_shapes()?;
    rec.b.matmul(&rec.a_en)
}

/// `‖A_de − B·A_en‖_F`, or its square.
pub fn cycle_loss(rec: &AttentionRecord, squared: bool) -> Result<f64> {
    let indirect = indirect_attention(rec)?;
    let ss: f64 = rec
        .a_de
        .data()
        .iter()
        .zip(indirect.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(if squared { ss } else { ss.sqrt() })
}

/// Differentiable cycle loss on the tape. At zero distance the unsquared
/// norm contributes a zero subgradient.
pub fn cycle_loss_var(tape: &mut Tape, a_de: Var, b: Var, a_en: Var, squared: bool) -> Result<Var> {
    let indirect = tape.matmul(b, a_en)?;
    if tape.value(indirect).dims() != tape.value(a_de).dims() {
        return Err(Error::dim("cycle loss", tape.value(a_de).shape(), tape.value(indirect).shape()));
    }
    let diff = tape.sub(a_de, indirect)?;
    if squared {
        tape.sum_squares(diff)
    } else {
        tape.norm(diff)
    }
}

/// An explicit joint table `P(X, Y, Z)` indexed `[x][y][z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    // exponential spacings give a uniform draw from the simplex
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

impl Joint {
    pub fn new(nx: usize, ny: usize, nz: usize, p: Vec<f64>) -> Result<Self> {
        if nx * ny * nz == 0 || p.len() != nx * ny * nz {
            return Err(Error::dim("joint table", &[nx, ny, nz], &[p.len()]));
        }
        Ok(Joint { nx, ny, nz, p })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.p[(x * self.ny + y) * self.nz + z]
    }

    /// `P(y)·P(x|y)·P(z|y)` with every factor drawn at random.
    pub fn random_factorized<R: Rng>(rng: &mut R, nx: usize, ny: usize, nz: usize) -> Self {
        let py = random_simplex(rng, ny);
        let px_y: Vec<Vec<f64>> = (0..ny).map(|_| random_simplex(rng, nx)).collect();
        let pz_y: Vec<Vec<f64>> = (0..ny).map(|_| random_simplex(rng, nz)).collect();
        let mut p = vec![0.0; nx * ny * nz];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    p[(x * ny + y) * nz + z] = py[y] * px_y[y][x] * pz_y[y][z];
                }
            }
        }
        Joint { nx, ny, nz, p }
    }

    /// Moves `amount` of mass between two cells that share `y` and `z` but
    /// differ in `x`, and between the mirrored pair at `z2`, so the
    /// marginals over `(y, z)` stay put while `X ⊥ Z | Y` breaks.
    pub fn perturbed(&self, y: usize, amount: f64) -> Result<Self> {
        if self.nx < 2 || self.nz < 2 || y >= self.ny {
            return Err(Error::input("perturbation needs |X| ≥ 2, |Z| ≥ 2 and a valid y"));
        }
        let mut out = self.clone();
        let idx = |x: usize, z: usize| (x * self.ny + y) * self.nz + z;
        let limit = self.at(1, y, 0).min(self.at(0, y, 1));
        let d = amount.min(limit);
        out.p[idx(0, 0)] += d;
        out.p[idx(1, 0)] -= d;
        out.p[idx(0, 1)] -= d;
        out.p[idx(1, 1)] += d;
        Ok(out)
    }

    fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    fn p_xy(&self, x: usize, y: usize) -> f64 {
        (0..self.nz).map(|z| self.at(x, y, z)).sum()
    }

    fn p_yz(&self, y: usize, z: usize) -> f64 {
        (0..self.nx).map(|x| self.at(x, y, z)).sum()
    }

    fn p_xz(&self, x: usize, z: usize) -> f64 {
        (0..self.ny).map(|y| self.at(x, y, z)).sum()
    }

    fn p_y(&self, y: usize) -> f64 {
        (0..self.nx).map(|x| self.p_xy(x, y)).sum()
    }

    fn p_z(&self, z: usize) -> f64 {
        (0..self.ny).map(|y| self.p_yz(y, z)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    /// `max |P(x|z) − Σ_y P(x|y)·P(y|z)|` over the checked entries.
    pub max_discrepancy: f64,
    pub checked: usize,
    /// Values of `z` with zero probability, which cannot be conditioned on.
    pub skipped_z: Vec<usize>,
    /// True when the discrepancy is within the tolerance.
    pub holds: bool,
}

/// Verifies `P(x|z) = Σ_y P(x|y)·P(y|z)` by exact marginalization.
pub fn check_chain(joint: &Joint, tol: f64) -> Result<ChainReport> {
    if joint.p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::input("joint has negative or non-finite entries"));
    }
    let total = joint.total();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("joint sums to {total}, not 1")));
    }
    let py: Vec<f64> = (0..joint.ny).map(|y| joint.p_y(y)).collect();
    let mut report = ChainReport {
        max_discrepancy: 0.0,
        checked: 0,
        skipped_z: Vec::new(),
        holds: true,
    };
    for z in 0..joint.nz {
        let pz = joint.p_z(z);
        if pz == 0.0 {
            report.skipped_z.push(z);
            continue;
        }
        for x in 0..joint.nx {
            let direct = joint.p_xz(x, z) / pz;
            let chained: f64 = (0..joint.ny)
                .filter(|&y| py[y] > 0.0)
                .map(|y| joint.p_xy(x, y) / py[y] * joint.p_yz(y, z) / pz)
                .sum();
            report.max_discrepancy = report.max_discrepancy.max((direct - chained).abs());
            report.checked += 1;
        }
    }
    report.holds = report.max_discrepancy < tol;
    Ok(report)
}

/// Builds the attention record a chain region → English word → German word
/// implies: `A_en = P(X|Y)`, `B = P(Y|Z)`, `A_de = P(X|Z)`.
pub fn record_from_joint(joint: &Joint) -> Result<AttentionRecord> {
    let (nx, ny, nz) = (joint.nx, joint.ny, joint.nz);
    let py: Vec<f64> = (0..ny).map(|y| joint.p_y(y)).collect();
    let pz: Vec<f64> = (0..nz).map(|z| joint.p_z(z)).collect();
    if py.iter().chain(&pz).any(|v| *v == 0.0) {
        return Err(Error::input("every y and z needs positive probability"));
    }
    let a_en = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .map(|(x, y)| joint.p_xy(x, y) / py[y])
        .collect();
    let a_de = (0..nz)
        .flat_map(|z| (0..nx).map(move |x| (x, z)))
        .map(|(x, z)| joint.p_xz(x, z) / pz[z])
        .collect();
    let b = (0..nz)
        .flat_map(|z| (0..ny).map(move |y| (y, z)))
        .map(|(y, z)| joint.p_yz(y, z) / pz[z])
        .collect();
    AttentionRecord::new(
        Tensor::matrix(ny, nx, a_en)?,
        Tensor::matrix(nz, nx, a_de)?,
        Tensor::matrix(nz, ny, b)?,
    )
}

/// The four-region toy used to illustrate indirect attention: the German
/// word attends 0.1/0.9 over two English words whose attention on region 2
/// is 0.3 and 0.8.
pub fn toy_record() -> AttentionRecord {
    let a_en = Tensor::from_rows(&[
        vec![0.1, 0.3, 0.2, 0.4],
        vec![0.05, 0.8, 0.1, 0.05],
        vec![0.3, 0.4, 0.2, 0.1],
        vec![0.1, 0.5, 0.3, 0.1],
    ])
    .expect("static shape");
    let b = Tensor::from_rows(&[vec![0.1, 0.9, 0.0, 0.0]]).expect("static shape");
    let a_de = Tensor::from_rows(&[vec![0.05, 0.8, 0.1, 0.05]]).expect("static shape");
    AttentionRecord::new(a_en, a_de, b).expect("toy record is valid")
}
