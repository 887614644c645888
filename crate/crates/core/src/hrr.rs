//! Holographic reduced representations over complex vectors stored as
//! `[re; im]`, and the redundant associative memory built from them.
//!
//! Binding a value `x` under a key `r` is the elementwise complex product
//! `r ⊛ x`; unbinding multiplies by the conjugate key. A [`MemoryArray`]
//! keeps `N_c` copies of the superposed bindings, each written with a
//! differently permuted key, and retrieval averages the per-copy reads so
//! the cross-talk between items decorrelates and shrinks.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::real::Real;

/// A complex vector of `D` elements laid out as `[re_0..re_D, im_0..im_D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVec<T> {
    data: Vec<T>,
}

impl<T: Real> ComplexVec<T> {
    pub fn new(re: &[T], im: &[T]) -> Result<Self> {
        check_dim("ComplexVec::new", re.len(), im.len())?;
        if re.is_empty() {
            return Err(Error::InvalidArgument("complex vector needs D >= 1".into()));
        }
        let mut data = Vec::with_capacity(2 * re.len());
        data.extend_from_slice(re);
        data.extend_from_slice(im);
        Ok(Self { data })
    }

    /// Wraps an already concatenated `[re; im]` buffer.
    pub fn from_concat(data: Vec<T>) -> Result<Self> {
        if data.is_empty() || data.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "concatenated complex vector must have even, nonzero length (got {})",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "complex vector needs D >= 1");
        Self {
            data: vec![T::zero(); 2 * dim],
        }
    }

    /// Entries drawn i.i.d. from `N(0, std^2)` in both halves.
    pub fn random_normal<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..2 * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self { data }
    }

    /// Number of complex elements `D`.
    pub fn dim(&self) -> usize {
        self.data.len() / 2
    }

    pub fn re(&self) -> &[T] {
        &self.data[..self.dim()]
    }

    pub fn im(&self) -> &[T] {
        &self.data[self.dim()..]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim("ComplexVec::add", self.data.len(), other.data.len())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self { data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim("ComplexVec::sub", self.data.len(), other.data.len())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self { data })
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            data: self.data.iter().map(|&a| a * c).collect(),
        }
    }

    /// Euclidean norm of the concatenated real vector.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }
}

/// A key whose elements all have modulus at most one.
///
/// The only ways to obtain a `Key` are [`bound`] and the unit-phase
/// constructors, so an unbounded projection can never be used to address a
/// memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Key<T>(ComplexVec<T>);

impl<T: Real> Key<T> {
    /// Unit-modulus key `exp(i * phase_j)`.
    pub fn from_phases(phases: &[T]) -> Result<Self> {
        let re: Vec<T> = phases.iter().map(|p| p.cos()).collect();
        let im: Vec<T> = phases.iter().map(|p| p.sin()).collect();
        Ok(Self(ComplexVec::new(&re, &im)?))
    }

    /// Unit-modulus key with phases uniform on `[0, 2π)`.
    pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let phases: Vec<T> = (0..dim)
            .map(|_| T::lit(rng.gen::<f64>() * std::f64::consts::TAU))
            .collect();
        Self::from_phases(&phases).expect("dim >= 1")
    }

    pub fn as_complex(&self) -> &ComplexVec<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// Elementwise complex product `r ⊛ x`.
pub fn complex_multiply<T: Real>(r: &ComplexVec<T>, x: &ComplexVec<T>) -> Result<ComplexVec<T>> {
    check_dim("complex_multiply", r.dim(), x.dim())?;
    let mut out = vec![T::zero(); r.data.len()];
    bind_acc(&r.data, &x.data, &mut out);
    Ok(ComplexVec { data: out })
}

pub fn conjugate<T: Real>(r: &ComplexVec<T>) -> ComplexVec<T> {
    let d = r.dim();
    let mut data = r.data.clone();
    for v in &mut data[d..] {
        *v = -*v;
    }
    ComplexVec { data }
}

/// Per-element modulus `sqrt(re^2 + im^2)`.
pub fn modulus<T: Real>(r: &ComplexVec<T>) -> Vec<T> {
    r.re()
        .iter()
        .zip(r.im())
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect()
}

/// Divides each complex element by `max(1, modulus)`.
pub fn bound<T: Real>(v: &ComplexVec<T>) -> Key<T> {
    let d = v.dim();
    let mut data = v.data.clone();
    bound_in_place(&mut data, d);
    Key(ComplexVec { data })
}

/// `N_c` index permutations of `0..D`; the first one is always the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSet {
    seed: u64,
    dim: usize,
    perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    pub fn count(&self) -> usize {
        self.perms.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// `P_s v`: element `j` of the result is element `perm_s[j]` of `v`,
    /// applied identically to both halves.
    pub fn apply<T: Real>(&self, s: usize, v: &ComplexVec<T>) -> Result<ComplexVec<T>> {
        check_dim("PermutationSet::apply", self.dim, v.dim())?;
        let mut out = vec![T::zero(); v.data.len()];
        permute_into(&self.perms[s], &v.data, &mut out);
        Ok(ComplexVec { data: out })
    }
}

/// Identity first, then `n_c - 1` Fisher–Yates shuffles from a generator
/// seeded with `seed`.
pub fn make_permutations(n_c: usize, d: usize, seed: u64) -> Result<PermutationSet> {
    if n_c < 1 || d < 1 {
        return Err(Error::InvalidArgument(format!(
            "make_permutations needs n_c >= 1 and d >= 1 (got n_c={n_c}, d={d})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..d).collect();
    let mut perms = Vec::with_capacity(n_c);
    perms.push(identity.clone());
    for _ in 1..n_c {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        perms.push(p);
    }
    Ok(PermutationSet {
        seed,
        dim: d,
        perms,
    })
}

/// Redundant HRR memory: copy `s` holds `Σ_k (P_s r_k) ⊛ x_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryArray<T> {
    copies: Vec<ComplexVec<T>>,
    perm_set: Arc<PermutationSet>,
}

impl<T: Real> MemoryArray<T> {
    pub fn zeros(perm_set: Arc<PermutationSet>) -> Self {
        let copies = vec![ComplexVec::zeros(perm_set.dim()); perm_set.count()];
        Self { copies, perm_set }
    }

    /// Rebuilds a memory from its flattened copies `[m_1; ...; m_Nc]`.
    pub fn from_flat(flat: &[T], perm_set: Arc<PermutationSet>) -> Result<Self> {
        let width = 2 * perm_set.dim();
        check_dim("MemoryArray::from_flat", width * perm_set.count(), flat.len())?;
        let copies = flat
            .chunks(width)
            .map(|c| ComplexVec { data: c.to_vec() })
            .collect();
        Ok(Self { copies, perm_set })
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.copies.iter().flat_map(|c| c.data.iter().copied()).collect()
    }

    pub fn copies(&self) -> &[ComplexVec<T>] {
        &self.copies
    }

    pub fn perm_set(&self) -> &Arc<PermutationSet> {
        &self.perm_set
    }

    pub fn dim(&self) -> usize {
        self.perm_set.dim()
    }

    pub fn redundancy(&self) -> usize {
        self.copies.len()
    }

    /// Returns the memory after adding `(P_s r) ⊛ x` to every copy.
    pub fn write(&self, r: &Key<T>, x: &ComplexVec<T>) -> Result<Self> {
        let mut next = self.clone();
        next.write_in_place(r, x)?;
        Ok(next)
    }

    pub fn write_in_place(&mut self, r: &Key<T>, x: &ComplexVec<T>) -> Result<()> {
        check_dim("memory_write key", self.dim(), r.dim())?;
        check_dim("memory_write value", self.dim(), x.dim())?;
        let mut pr = vec![T::zero(); 2 * self.dim()];
        for (perm, copy) in self.perm_set.perms.iter().zip(&mut self.copies) {
            permute_into(perm, r.0.as_slice(), &mut pr);
            bind_acc(&pr, x.as_slice(), &mut copy.data);
        }
        Ok(())
    }

    /// `(1/N_c) Σ_s (P_s r̄) ⊛ m_s`.
    pub fn retrieve(&self, r: &Key<T>) -> Result<ComplexVec<T>> {
        check_dim("memory_retrieve key", self.dim(), r.dim())?;
        let mut out = vec![T::zero(); 2 * self.dim()];
        let mut pr = vec![T::zero(); 2 * self.dim()];
        let scale = T::one() / T::lit(self.redundancy() as f64);
        for (perm, copy) in self.perm_set.perms.iter().zip(&self.copies) {
            permute_into(perm, r.0.as_slice(), &mut pr);
            unbind_acc(&pr, &copy.data, scale, &mut out);
        }
        Ok(ComplexVec { data: out })
    }

    /// Copy-wise sum of two memories sharing the same permutation set.
    pub fn combine(&self, other: &Self) -> Result<Self> {
        if self.perm_set != other.perm_set {
            return Err(Error::InvalidArgument(
                "cannot combine memories with different permutation sets".into(),
            ));
        }
        let copies = self
            .copies
            .iter()
            .zip(&other.copies)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Ok(Self {
            copies,
            perm_set: self.perm_set.clone(),
        })
    }
}

// Slice kernels shared with the tape's fused memory primitives. All slices
// hold one complex vector in `[re; im]` layout.

/// `out += r ⊛ x`
#[inline]
pub(crate) fn bind_acc<T: Real>(r: &[T], x: &[T], out: &mut [T]) {
    let d = r.len() / 2;
    let (rr, ri) = r.split_at(d);
    let (xr, xi) = x.split_at(d);
    let (or, oi) = out.split_at_mut(d);
    for j in 0..d {
        or[j] += rr[j] * xr[j] - ri[j] * xi[j];
        oi[j] += rr[j] * xi[j] + ri[j] * xr[j];
    }
}

/// `out += scale * (r̄ ⊛ m)`
#[inline]
pub(crate) fn unbind_acc<T: Real>(r: &[T], m: &[T], scale: T, out: &mut [T]) {
    let d = r.len() / 2;
    let (rr, ri) = r.split_at(d);
    let (mr, mi) = m.split_at(d);
    let (or, oi) = out.split_at_mut(d);
    for j in 0..d {
        or[j] += scale * (rr[j] * mr[j] + ri[j] * mi[j]);
        oi[j] += scale * (rr[j] * mi[j] - ri[j] * mr[j]);
    }
}

/// `out[j] = v[perm[j]]` on both halves.
#[inline]
pub(crate) fn permute_into<T: Copy>(perm: &[usize], v: &[T], out: &mut [T]) {
    let d = perm.len();
    for (j, &p) in perm.iter().enumerate() {
        out[j] = v[p];
        out[d + j] = v[d + p];
    }
}

/// `out[perm[j]] += g[j]` on both halves; the adjoint of [`permute_into`].
#[inline]
pub(crate) fn unpermute_acc<T: Real>(perm: &[usize], g: &[T], out: &mut [T]) {
    let d = perm.len();
    for (j, &p) in perm.iter().enumerate() {
        out[p] += g[j];
        out[d + p] += g[d + j];
    }
}

#[inline]
pub(crate) fn bound_in_place<T: Real>(v: &mut [T], d: usize) {
    let (re, im) = v.split_at_mut(d);
    for j in 0..d {
        let m = (re[j] * re[j] + im[j] * im[j]).sqrt();
        if m > T::one() {
            re[j] /= m;
            im[j] /= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(re: &[f64], im: &[f64]) -> ComplexVec<f64> {
        ComplexVec::new(re, im).unwrap()
    }

    fn max_abs_diff(a: &ComplexVec<f64>, b: &ComplexVec<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn multiply_by_one_is_identity() {
        let one = cv(&[1.0, 1.0], &[0.0, 0.0]);
        let x = cv(&[0.3, -2.0], &[1.5, 0.25]);
        assert_eq!(complex_multiply(&one, &x).unwrap(), x);
    }

    #[test]
    fn multiply_by_i() {
        // i * (2 + 3i) = -3 + 2i
        let i = cv(&[0.0], &[1.0]);
        let x = cv(&[2.0], &[3.0]);
        assert_eq!(complex_multiply(&i, &x).unwrap(), cv(&[-3.0], &[2.0]));
    }

    #[test]
    fn multiply_by_zero() {
        let r = cv(&[0.7, -1.2], &[0.1, 4.0]);
        let z = ComplexVec::zeros(2);
        assert_eq!(complex_multiply(&r, &z).unwrap(), z);
    }

    #[test]
    fn multiply_rejects_mismatch() {
        let a = ComplexVec::<f64>::zeros(2);
        let b = ComplexVec::<f64>::zeros(3);
        assert!(matches!(
            complex_multiply(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn conjugate_properties() {
        let real = cv(&[1.0, -2.0], &[0.0, 0.0]);
        assert_eq!(conjugate(&real), real);
        let r = cv(&[0.5, 2.0], &[-1.0, 3.0]);
        assert_eq!(conjugate(&conjugate(&r)), r);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let key = Key::<f64>::random_unit(16, &mut rng);
        let x = ComplexVec::random_normal(16, 1.0, &mut rng);
        let bound_x = complex_multiply(key.as_complex(), &x).unwrap();
        let back = complex_multiply(&conjugate(key.as_complex()), &bound_x).unwrap();
        assert!(max_abs_diff(&back, &x) < 1e-10);
    }

    #[test]
    fn modulus_examples() {
        let m = modulus(&cv(&[0.6, 0.0], &[0.8, 0.0]));
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert_eq!(m[1], 0.0);
    }

    #[test]
    fn bound_examples() {
        let small = cv(&[0.3, -0.5], &[0.4, 0.1]);
        assert_eq!(bound(&small).as_complex(), &small);
        let zero = ComplexVec::<f64>::zeros(3);
        assert_eq!(bound(&zero).as_complex(), &zero);
        let big = bound(&cv(&[3.0], &[4.0]));
        assert!((big.as_complex().re()[0] - 0.6).abs() < 1e-15);
        assert!((big.as_complex().im()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn permutations_identity_first_and_deterministic() {
        let one = make_permutations(1, 7, 3).unwrap();
        assert_eq!(one.perms(), &[vec![0, 1, 2, 3, 4, 5, 6]]);

        let a = make_permutations(8, 32, 99).unwrap();
        let b = make_permutations(8, 32, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_permutations(8, 32, 100).unwrap());
        for p in a.perms() {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        }
        assert!(make_permutations(0, 4, 0).is_err());
        assert!(make_permutations(2, 0, 0).is_err());
    }

    #[test]
    fn single_item_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let perms = Arc::new(make_permutations(4, 24, 11).unwrap());
        let key = Key::<f64>::random_unit(24, &mut rng);
        let x = ComplexVec::random_normal(24, 1.0, &mut rng);
        let mem = MemoryArray::zeros(perms).write(&key, &x).unwrap();
        let got = mem.retrieve(&key).unwrap();
        assert!(max_abs_diff(&got, &x) < 1e-10);
    }

    #[test]
    fn writing_zero_leaves_memory_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let perms = Arc::new(make_permutations(3, 8, 1).unwrap());
        let key = Key::<f64>::random_unit(8, &mut rng);
        let mem = MemoryArray::zeros(perms.clone())
            .write(&key, &ComplexVec::random_normal(8, 1.0, &mut rng))
            .unwrap();
        let after = mem.write(&key, &ComplexVec::zeros(8)).unwrap();
        assert_eq!(after, mem);
    }

    #[test]
    fn empty_memory_retrieves_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mem = MemoryArray::<f64>::zeros(Arc::new(make_permutations(8, 16, 0).unwrap()));
        let got = mem.retrieve(&Key::random_unit(16, &mut rng)).unwrap();
        assert_eq!(got, ComplexVec::zeros(16));
    }

    #[test]
    fn two_items_residual_matches_cross_term() {
        // Non-redundant memory: the residual for item k is exactly
        // conj(r_k) ⊛ r_k' ⊛ x_k' summed over the other items.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perms = Arc::new(make_permutations(1, 16, 0).unwrap());
        let keys: Vec<Key<f64>> = (0..2).map(|_| Key::random_unit(16, &mut rng)).collect();
        let vals: Vec<ComplexVec<f64>> = (0..2)
            .map(|_| ComplexVec::random_normal(16, 1.0, &mut rng))
            .collect();
        let mut mem = MemoryArray::zeros(perms);
        for (k, v) in keys.iter().zip(&vals) {
            mem.write_in_place(k, v).unwrap();
        }
        for k in 0..2 {
            let other = 1 - k;
            let residual = mem.retrieve(&keys[k]).unwrap().sub(&vals[k]).unwrap();
            // brute force over elements with scalar complex arithmetic
            let d = 16;
            let rk = keys[k].as_complex();
            let ro = keys[other].as_complex();
            let xo = &vals[other];
            for j in 0..d {
                let (a, b) = (rk.re()[j], -rk.im()[j]);
                let (c, e) = (ro.re()[j], ro.im()[j]);
                let (pr, pi) = (a * c - b * e, a * e + b * c);
                let (xr, xi) = (xo.re()[j], xo.im()[j]);
                let (nr, ni) = (pr * xr - pi * xi, pr * xi + pi * xr);
                assert!((residual.re()[j] - nr).abs() < 1e-12);
                assert!((residual.im()[j] - ni).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_copy_memory_equals_plain_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let perms = Arc::new(make_permutations(1, 10, 0).unwrap());
        let key = Key::<f64>::random_unit(10, &mut rng);
        let x = ComplexVec::random_normal(10, 1.0, &mut rng);
        let mem = MemoryArray::zeros(perms).write(&key, &x).unwrap();
        assert_eq!(mem.copies()[0], complex_multiply(key.as_complex(), &x).unwrap());
        let probe = Key::random_unit(10, &mut rng);
        let plain = complex_multiply(&conjugate(probe.as_complex()), &mem.copies()[0]).unwrap();
        assert_eq!(mem.retrieve(&probe).unwrap(), plain);
    }

    #[test]
    fn write_rejects_wrong_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mem = MemoryArray::<f64>::zeros(Arc::new(make_permutations(2, 4, 0).unwrap()));
        let key = Key::random_unit(5, &mut rng);
        assert!(mem.write(&key, &ComplexVec::zeros(5)).is_err());
        assert!(mem.retrieve(&key).is_err());
    }
}
