//! Arithmetic and linear algebra over the prime field GF(p).
//!
//! Hot paths (dataset generation, oracles) work on raw `u32` residues through
//! a validated [`PrimeField`] context. [`FieldElement`] carries its modulus
//! and is the checked, public-facing value type.

use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("{0} is not a prime modulus")]
    NotPrime(u32),
    #[error("modulus mismatch: {0} vs {1}")]
    ModulusMismatch(u32, u32),
    #[error("value {value} is outside [0, {modulus})")]
    OutOfRange { value: u32, modulus: u32 },
    #[error("zero has no multiplicative inverse")]
    NotInvertible,
    #[error("{base} is not a primitive root of {modulus}")]
    NotPrimitiveRoot { base: u32, modulus: u32 },
    #[error("csv export failed: {0}")]
    Io(String),
}

pub type Result<T, E = FieldError> = std::result::Result<T, E>;

pub fn is_prime(n: u32) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut d = 3u64;
    while d * d <= n as u64 {
        if n as u64 % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

/// The field Z_p for a verified prime `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrimeField {
    p: u32,
}

impl PrimeField {
    pub fn new(p: u32) -> Result<Self> {
        if !is_prime(p) {
            return Err(FieldError::NotPrime(p));
        }
        Ok(Self { p })
    }

    #[inline]
    pub fn modulus(&self) -> u32 {
        self.p
    }

    /// Number of elements, i.e. `p`.
    #[inline]
    pub fn order(&self) -> usize {
        self.p as usize
    }

    pub fn element(&self, value: u32) -> Result<FieldElement> {
        if value >= self.p {
            return Err(FieldError::OutOfRange { value, modulus: self.p });
        }
        Ok(FieldElement { value, modulus: self.p })
    }

    /// Reduces an arbitrary integer into the field.
    #[inline]
    pub fn reduce(&self, v: i64) -> u32 {
        v.rem_euclid(self.p as i64) as u32
    }

    #[inline]
    pub fn add(&self, a: u32, b: u32) -> u32 {
        ((a as u64 + b as u64) % self.p as u64) as u32
    }

    #[inline]
    pub fn sub(&self, a: u32, b: u32) -> u32 {
        ((a as u64 + self.p as u64 - b as u64) % self.p as u64) as u32
    }

    #[inline]
    pub fn neg(&self, a: u32) -> u32 {
        self.sub(0, a)
    }

    #[inline]
    pub fn mul(&self, a: u32, b: u32) -> u32 {
        ((a as u64 * b as u64) % self.p as u64) as u32
    }

    pub fn pow(&self, base: u32, mut exp: u64) -> u32 {
        let p = self.p as u64;
        let mut acc = 1u64 % p;
        let mut b = base as u64 % p;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * b % p;
            }
            b = b * b % p;
            exp >>= 1;
        }
        acc as u32
    }

    /// Multiplicative inverse via the extended Euclidean algorithm.
    pub fn inv(&self, a: u32) -> Result<u32> {
        let a = a % self.p;
        if a == 0 {
            return Err(FieldError::NotInvertible);
        }
        let (mut r0, mut r1) = (self.p as i64, a as i64);
        let (mut t0, mut t1) = (0i64, 1i64);
        while r1 != 0 {
            let q = r0 / r1;
            (r0, r1) = (r1, r0 - q * r1);
            (t0, t1) = (t1, t0 - q * t1);
        }
        debug_assert_eq!(r0, 1);
        Ok(self.reduce(t0))
    }

    #[inline]
    pub fn div(&self, a: u32, b: u32) -> Result<u32> {
        Ok(self.mul(a, self.inv(b)?))
    }

    /// Multiplicative order of a nonzero element.
    pub fn multiplicative_order(&self, a: u32) -> Option<u32> {
        let a = a % self.p;
        if a == 0 {
            return None;
        }
        let mut x = a;
        let mut k = 1;
        while x != 1 {
            x = self.mul(x, a);
            k += 1;
        }
        Some(k)
    }

    pub fn is_primitive_root(&self, g: u32) -> bool {
        g < self.p && self.multiplicative_order(g) == Some(self.p - 1)
    }

    pub fn smallest_primitive_root(&self) -> u32 {
        if self.p == 2 {
            return 1;
        }
        (2..self.p)
            .find(|&g| self.is_primitive_root(g))
            .expect("every prime field has a primitive root")
    }

    /// The log base used for annotations: 27 for p = 29, otherwise the
    /// smallest primitive root.
    pub fn default_log_base(&self) -> u32 {
        if self.p == 29 {
            27
        } else {
            self.smallest_primitive_root()
        }
    }
}

/// A residue tagged with its modulus.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldElement {
    value: u32,
    modulus: u32,
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (mod {})", self.value, self.modulus)
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl FieldElement {
    #[inline]
    pub fn value(&self) -> u32 {
        self.value
    }

    #[inline]
    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    fn field(&self) -> PrimeField {
        PrimeField { p: self.modulus }
    }

    fn check(&self, other: &Self) -> Result<PrimeField> {
        if self.modulus != other.modulus {
            return Err(FieldError::ModulusMismatch(self.modulus, other.modulus));
        }
        Ok(self.field())
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let f = self.check(&other)?;
        Ok(Self { value: f.add(self.value, other.value), ..self })
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let f = self.check(&other)?;
        Ok(Self { value: f.sub(self.value, other.value), ..self })
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let f = self.check(&other)?;
        Ok(Self { value: f.mul(self.value, other.value), ..self })
    }

    pub fn neg(self) -> Self {
        Self { value: self.field().neg(self.value), ..self }
    }

    pub fn inverse(self) -> Result<Self> {
        Ok(Self { value: self.field().inv(self.value)?, ..self })
    }

    pub fn is_zero(&self) -> bool {
        self.value == 0
    }
}

/// Discrete logarithm table for a primitive root, with `log(0) = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogTable {
    p: u32,
    base: u32,
    log: Vec<u32>,
    exp: Vec<u32>,
}

impl LogTable {
    pub fn build(p: u32, base: u32) -> Result<Self> {
        let field = PrimeField::new(p)?;
        if !field.is_primitive_root(base) {
            return Err(FieldError::NotPrimitiveRoot { base, modulus: p });
        }
        let order = p as usize - 1;
        let mut log = vec![0u32; p as usize];
        let mut exp = Vec::with_capacity(order);
        let mut x = 1u32;
        for k in 0..order {
            exp.push(x);
            log[x as usize] = k as u32;
            x = field.mul(x, base);
        }
        // Logs live in [1, p-1]: 1 = base^(p-1) is written as p-1.
        log[1] = order as u32;
        Ok(Self { p, base, log, exp })
    }

    pub fn with_default_base(field: &PrimeField) -> Self {
        Self::build(field.modulus(), field.default_log_base()).expect("default base is a primitive root")
    }

    pub fn modulus(&self) -> u32 {
        self.p
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    /// `log_base(n)`; `log(0)` is reported as 0 by convention.
    pub fn log(&self, n: u32) -> u32 {
        self.log[(n % self.p) as usize]
    }

    /// `base^k mod p`.
    pub fn exp(&self, k: u32) -> u32 {
        self.exp[(k as usize) % self.exp.len()]
    }

    pub fn entries(&self) -> &[u32] {
        &self.log
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| FieldError::Io(e.to_string());
        w.write_record(["n", "log"]).map_err(io)?;
        for (n, l) in self.log.iter().enumerate() {
            w.write_record([n.to_string(), l.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| FieldError::Io(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| FieldError::Io(e.to_string()))?;
        self.write_csv(f)
    }
}

/// Solves `A c = target` over GF(p), where `A` is given column by column.
///
/// Gaussian elimination with first-nonzero pivoting in column order; free
/// coefficients are set to zero. Returns `None` when `target` lies outside
/// the column span.
pub fn solve_linear_mod_p(field: &PrimeField, columns: &[(u32, u32)], target: (u32, u32)) -> Option<Vec<u32>> {
    let rows: [Vec<u32>; 2] = [
        columns.iter().map(|c| c.0 % field.modulus()).collect(),
        columns.iter().map(|c| c.1 % field.modulus()).collect(),
    ];
    let mut matrix: Vec<Vec<u32>> = rows.to_vec();
    let rhs = vec![target.0 % field.modulus(), target.1 % field.modulus()];
    solve_system(field, &mut matrix, rhs)
}

/// General dense solver used by [`solve_linear_mod_p`]; `matrix` is row-major
/// and is reduced in place.
pub fn solve_system(field: &PrimeField, matrix: &mut [Vec<u32>], mut rhs: Vec<u32>) -> Option<Vec<u32>> {
    let n_rows = matrix.len();
    let n_cols = matrix.first().map_or(0, |r| r.len());
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut row = 0;
    for col in 0..n_cols {
        if row == n_rows {
            break;
        }
        let Some(pr) = (row..n_rows).find(|&r| matrix[r][col] != 0) else {
            continue;
        };
        matrix.swap(row, pr);
        rhs.swap(row, pr);
        let inv = field.inv(matrix[row][col]).expect("pivot is nonzero");
        for v in matrix[row].iter_mut() {
            *v = field.mul(*v, inv);
        }
        rhs[row] = field.mul(rhs[row], inv);
        for r in 0..n_rows {
            if r != row && matrix[r][col] != 0 {
                let factor = matrix[r][col];
                for c in 0..n_cols {
                    let sub = field.mul(factor, matrix[row][c]);
                    matrix[r][c] = field.sub(matrix[r][c], sub);
                }
                rhs[r] = field.sub(rhs[r], field.mul(factor, rhs[row]));
            }
        }
        pivots.push((row, col));
        row += 1;
    }
    // Rows without a pivot are all-zero; they must have zero right-hand side.
    if rhs[row..].iter().any(|&v| v != 0) {
        return None;
    }
    let mut solution = vec![0u32; n_cols];
    for (r, c) in pivots {
        solution[c] = rhs[r];
    }
    Some(solution)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(p: u32) -> PrimeField {
        PrimeField::new(p).unwrap()
    }

    #[test]
    fn rejects_composite_modulus() {
        assert_eq!(PrimeField::new(9), Err(FieldError::NotPrime(9)));
        assert_eq!(PrimeField::new(1), Err(FieldError::NotPrime(1)));
    }

    #[test]
    fn add_mul_examples() {
        let k = f(29);
        assert_eq!(k.add(k.mul(6, 2), k.mul(6, 3)), 1);
        assert_eq!(k.add(0, 17), 17);
        assert_eq!(f(5).mul(4, 4), 1);
    }

    #[test]
    fn element_ops_check_modulus() {
        let a = f(29).element(6).unwrap();
        let b = f(5).element(3).unwrap();
        assert_eq!(a.add(b), Err(FieldError::ModulusMismatch(29, 5)));
        assert!(f(29).element(29).is_err());
        let two = f(29).element(2).unwrap();
        assert_eq!(two.mul(two).unwrap().value(), 4);
    }

    #[test]
    fn inverse_examples() {
        let k = f(29);
        assert_eq!(k.inv(2), Ok(15));
        assert_eq!(k.inv(1), Ok(1));
        assert_eq!(k.inv(0), Err(FieldError::NotInvertible));
        assert_eq!(k.element(0).unwrap().inverse(), Err(FieldError::NotInvertible));
    }

    #[test]
    fn log_table_examples() {
        let t = LogTable::build(29, 27).unwrap();
        assert_eq!(t.log(2), 15);
        assert_eq!(t.log(27), 1);
        assert_eq!(t.log(0), 0);
        assert_eq!(t.log(1), 28);
    }

    #[test]
    fn log_table_rejects_non_primitive_base() {
        // 28 = -1 has order 2.
        assert_eq!(
            LogTable::build(29, 28),
            Err(FieldError::NotPrimitiveRoot { base: 28, modulus: 29 })
        );
    }

    #[test]
    fn log_table_csv() {
        let t = LogTable::build(5, 2).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "n,log\n0,0\n1,4\n2,1\n3,3\n4,2\n");
    }

    #[test]
    fn default_bases() {
        assert_eq!(f(29).default_log_base(), 27);
        assert_eq!(f(11).default_log_base(), 2);
        assert_eq!(f(7).default_log_base(), 3);
    }

    #[test]
    fn solve_examples() {
        let k = f(29);
        assert_eq!(solve_linear_mod_p(&k, &[(1, 0), (0, 1)], (4, 6)), Some(vec![4, 6]));
        assert_eq!(solve_linear_mod_p(&k, &[(2, 3)], (4, 6)), Some(vec![2]));
        assert_eq!(solve_linear_mod_p(&f(5), &[(1, 2), (2, 4)], (0, 1)), None);
    }

    #[test]
    fn solve_with_zero_columns() {
        let k = f(7);
        assert_eq!(solve_linear_mod_p(&k, &[(0, 0)], (0, 0)), Some(vec![0]));
        assert_eq!(solve_linear_mod_p(&k, &[(0, 0)], (1, 0)), None);
        assert_eq!(solve_linear_mod_p(&k, &[(0, 0), (0, 3)], (0, 1)), Some(vec![0, 5]));
    }
}
