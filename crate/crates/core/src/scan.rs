//! Diagonal linear recurrences `S_t = a_t ⊙ S_{t−1} + b_t`.
//!
//! The pair `(a, b)` forms a monoid under [`combine`], so every prefix can be
//! evaluated sequentially, by a balanced tree, or chunk by chunk. The tree
//! always splits a range of length `n` at the largest power of two below
//! `n`, independent of how many worker threads run it, so all three modes are
//! run-to-run deterministic.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this many elements a subtree is walked on the current thread.
const SPAWN_CUTOFF: usize = 32;

/// One step of a diagonal recurrence: elementwise decay `a` and increment `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement<F> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> ScanElement<F> {
    pub fn new(a: Tensor<F>, b: Tensor<F>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(dim_err(
                "scan element",
                format!("a {:?} vs b {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(ScanElement { a, b })
    }

    /// `(1, 0)`: leaves any state unchanged.
    pub fn identity(shape: &[usize]) -> Self {
        ScanElement {
            a: Tensor::ones(shape),
            b: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.a.shape()
    }

    /// `a ⊙ s + b`.
    pub fn apply(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        if s.shape() != self.a.shape() {
            return Err(dim_err(
                "scan apply",
                format!("state {:?} vs element {:?}", s.shape(), self.a.shape()),
            ));
        }
        let mut out = Tensor::zeros(s.shape());
        apply_into(self.a.data(), self.b.data(), s.data(), out.data_mut());
        Ok(out)
    }
}

/// Compose `e1` (earlier) with `e2` (later): `(a1⊙a2, a2⊙b1 + b2)`.
pub fn combine<F: Scalar>(e1: &ScanElement<F>, e2: &ScanElement<F>) -> Result<ScanElement<F>> {
    if e1.shape() != e2.shape() {
        return Err(dim_err(
            "combine",
            format!("{:?} vs {:?}", e1.shape(), e2.shape()),
        ));
    }
    Ok(combine_unchecked(e1, e2))
}

fn combine_unchecked<F: Scalar>(e1: &ScanElement<F>, e2: &ScanElement<F>) -> ScanElement<F> {
    let mut a = e1.a.clone();
    let mut b = e2.b.clone();
    for ((aa, bb), (&a2, &b1)) in a
        .data_mut()
        .iter_mut()
        .zip(b.data_mut().iter_mut())
        .zip(e2.a.data().iter().zip(e1.b.data()))
    {
        *aa *= a2;
        *bb = a2 * b1 + *bb;
    }
    ScanElement { a, b }
}

#[inline]
pub(crate) fn apply_into<F: Scalar>(a: &[F], b: &[F], s: &[F], out: &mut [F]) {
    for (((o, &ai), &bi), &si) in out.iter_mut().zip(a).zip(b).zip(s) {
        *o = ai * si + bi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel,
    Chunked(usize),
}

impl ScanMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential" => Some(ScanMode::Sequential),
            "parallel" => Some(ScanMode::Parallel),
            _ => {
                let n = s.strip_prefix("chunked")?;
                let n = n.trim_start_matches([':', '-', '=']);
                if n.is_empty() {
                    Some(ScanMode::Chunked(64))
                } else {
                    n.parse().ok().map(ScanMode::Chunked)
                }
            }
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScanMode::Sequential => f.write_str("sequential"),
            ScanMode::Parallel => f.write_str("parallel"),
            ScanMode::Chunked(n) => write!(f, "chunked:{n}"),
        }
    }
}

fn validate<F: Scalar>(elems: &[ScanElement<F>], s0: &Tensor<F>, op: &'static str) -> Result<()> {
    if elems.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    for e in elems {
        if e.a.shape() != s0.shape() || e.b.shape() != s0.shape() {
            return Err(dim_err(
                op,
                format!("element {:?} vs state {:?}", e.a.shape(), s0.shape()),
            ));
        }
    }
    Ok(())
}

pub fn scan<F: Scalar>(elems: &[ScanElement<F>], s0: &Tensor<F>, mode: ScanMode) -> Result<Vec<Tensor<F>>> {
    match mode {
        ScanMode::Sequential => scan_sequential(elems, s0),
        ScanMode::Parallel => scan_parallel(elems, s0),
        ScanMode::Chunked(c) => scan_chunked(elems, s0, c),
    }
}

/// All states `S_1..S_T`, one step at a time.
pub fn scan_sequential<F: Scalar>(elems: &[ScanElement<F>], s0: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    validate(elems, s0, "scan_sequential")?;
    let mut out = Vec::with_capacity(elems.len());
    let mut prev = s0.clone();
    for e in elems {
        let mut next = Tensor::zeros(s0.shape());
        apply_into(e.a.data(), e.b.data(), prev.data(), next.data_mut());
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

/// Subtree of the fixed scan tree; internal nodes keep their left total.
enum Tree<F> {
    Leaf,
    Node {
        split: usize,
        left_total: ScanElement<F>,
        left: Box<Tree<F>>,
        right: Box<Tree<F>>,
    },
}

fn largest_pow2_below(n: usize) -> usize {
    debug_assert!(n >= 2);
    let p = n.next_power_of_two();
    if p == n {
        n / 2
    } else {
        p / 2
    }
}

/// Up-sweep: the composed total of `elems` and the tree of left totals.
fn up_sweep<F: Scalar>(elems: &[ScanElement<F>]) -> (ScanElement<F>, Tree<F>) {
    if elems.len() == 1 {
        return (elems[0].clone(), Tree::Leaf);
    }
    let split = largest_pow2_below(elems.len());
    let (l, r) = elems.split_at(split);
    let ((lt, ltree), (rt, rtree)) = if elems.len() > SPAWN_CUTOFF {
        rayon::join(|| up_sweep(l), || up_sweep(r))
    } else {
        (up_sweep(l), up_sweep(r))
    };
    let total = combine_unchecked(&lt, &rt);
    (
        total,
        Tree::Node {
            split,
            left_total: lt,
            left: Box::new(ltree),
            right: Box::new(rtree),
        },
    )
}

/// Down-sweep carrying the state entering the subtree.
fn down_sweep<F: Scalar>(elems: &[ScanElement<F>], tree: &Tree<F>, before: &[F], out: &mut [Tensor<F>]) {
    match tree {
        Tree::Leaf => {
            let e = &elems[0];
            apply_into(e.a.data(), e.b.data(), before, out[0].data_mut());
        }
        Tree::Node {
            split,
            left_total,
            left,
            right,
        } => {
            let mut mid = vec![F::zero(); before.len()];
            apply_into(left_total.a.data(), left_total.b.data(), before, &mut mid);
            let (le, re) = elems.split_at(*split);
            let (lo, ro) = out.split_at_mut(*split);
            if elems.len() > SPAWN_CUTOFF {
                rayon::join(
                    || down_sweep(le, left, before, lo),
                    || down_sweep(re, right, &mid, ro),
                );
            } else {
                down_sweep(le, left, before, lo);
                down_sweep(re, right, &mid, ro);
            }
        }
    }
}

fn tree_scan_from<F: Scalar>(elems: &[ScanElement<F>], before: &[F], out: &mut [Tensor<F>]) {
    let (_, tree) = up_sweep(elems);
    down_sweep(elems, &tree, before, out);
}

/// Balanced-tree inclusive scan.
pub fn scan_parallel<F: Scalar>(elems: &[ScanElement<F>], s0: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    validate(elems, s0, "scan_parallel")?;
    let mut out: Vec<Tensor<F>> = (0..elems.len()).map(|_| Tensor::zeros(s0.shape())).collect();
    tree_scan_from(elems, s0.data(), &mut out);
    Ok(out)
}

/// Chunks are reduced independently, their entry states are stitched in
/// order, then each chunk is expanded with the tree scan.
pub fn scan_chunked<F: Scalar>(
    elems: &[ScanElement<F>],
    s0: &Tensor<F>,
    chunk: usize,
) -> Result<Vec<Tensor<F>>> {
    if chunk < 1 {
        return Err(Error::InvalidArgument("chunk size must be >= 1".into()));
    }
    validate(elems, s0, "scan_chunked")?;
    let chunks: Vec<&[ScanElement<F>]> = elems.chunks(chunk).collect();
    let reduced: Vec<(ScanElement<F>, Tree<F>)> = chunks.par_iter().map(|c| up_sweep(c)).collect();

    let mut entries = Vec::with_capacity(chunks.len());
    let mut carry = s0.data().to_vec();
    for (total, _) in &reduced {
        entries.push(carry.clone());
        let mut next = vec![F::zero(); carry.len()];
        apply_into(total.a.data(), total.b.data(), &carry, &mut next);
        carry = next;
    }

    let mut out: Vec<Tensor<F>> = (0..elems.len()).map(|_| Tensor::zeros(s0.shape())).collect();
    out.par_chunks_mut(chunk)
        .zip(chunks.par_iter())
        .zip(reduced.par_iter().zip(entries.par_iter()))
        .for_each(|((o, c), ((_, tree), entry))| down_sweep(c, tree, entry, o));
    Ok(out)
}

/// Gradients of a scan with respect to its elements and initial state.
pub struct ScanGrads<F> {
    pub da: Vec<Tensor<F>>,
    pub db: Vec<Tensor<F>>,
    pub ds0: Tensor<F>,
}

/// Reverse-time adjoint of the recurrence, given `∂L/∂S_t` for every `t`.
pub fn scan_adjoint<F: Scalar>(
    elems: &[ScanElement<F>],
    s0: &Tensor<F>,
    states: &[Tensor<F>],
    d_states: &[Tensor<F>],
) -> Result<ScanGrads<F>> {
    validate(elems, s0, "scan_adjoint")?;
    if states.len() != elems.len() || d_states.len() != elems.len() {
        return Err(dim_err("scan_adjoint", "states/grads length must equal T"));
    }
    let t_len = elems.len();
    let mut da = Vec::with_capacity(t_len);
    let mut db = Vec::with_capacity(t_len);
    let mut carry = Tensor::zeros(s0.shape());
    for t in (0..t_len).rev() {
        let mut ds = d_states[t].clone();
        ds.add_assign(&carry);
        let prev = if t == 0 { s0 } else { &states[t - 1] };
        let mut dat = ds.clone();
        for (g, &p) in dat.data_mut().iter_mut().zip(prev.data()) {
            *g *= p;
        }
        let mut next_carry = ds.clone();
        for (g, &a) in next_carry.data_mut().iter_mut().zip(elems[t].a.data()) {
            *g *= a;
        }
        da.push(dat);
        db.push(ds);
        carry = next_carry;
    }
    da.reverse();
    db.reverse();
    Ok(ScanGrads { da, db, ds0: carry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_elems(t: usize, shape: &[usize], seed: u64) -> Vec<ScanElement<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| {
                let n: usize = shape.iter().product();
                let a = (0..n).map(|_| rng.gen_range(0.0..1.0f64).max(1e-3)).collect();
                let b = Tensor::randn(shape, 1.0, &mut rng);
                ScanElement::new(Tensor::new(shape.to_vec(), a).unwrap(), b).unwrap()
            })
            .collect()
    }

    fn max_diff(x: &[Tensor<f64>], y: &[Tensor<f64>]) -> f64 {
        x.iter().zip(y).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    #[test]
    fn identity_element() {
        let e = random_elems(1, &[2, 3], 1).pop().unwrap();
        let id = ScanElement::identity(&[2, 3]);
        assert_eq!(combine(&e, &id).unwrap(), e);
        assert_eq!(combine(&id, &e).unwrap(), e);
    }

    #[test]
    fn unit_decay_gives_prefix_sums() {
        let shape = [1, 1];
        let elems: Vec<_> = (1..=8)
            .map(|i| ScanElement::new(Tensor::ones(&shape), Tensor::full(&shape, i as f64)).unwrap())
            .collect();
        let s0 = Tensor::zeros(&shape);
        for states in [
            scan_sequential(&elems, &s0).unwrap(),
            scan_parallel(&elems, &s0).unwrap(),
            scan_chunked(&elems, &s0, 3).unwrap(),
        ] {
            let got: Vec<f64> = states.iter().map(|s| s.data()[0]).collect();
            assert_eq!(got, vec![1.0, 3.0, 6.0, 10.0, 15.0, 21.0, 28.0, 36.0]);
        }
    }

    #[test]
    fn sequential_examples() {
        let shape = [2, 2];
        let c = Tensor::from_f64(&shape, &[0.5, -1.0, 2.0, 0.25]).unwrap();
        let s0 = Tensor::from_f64(&shape, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let elems: Vec<_> = (0..5).map(|_| ScanElement::new(Tensor::ones(&shape), c.clone()).unwrap()).collect();
        let states = scan_sequential(&elems, &s0).unwrap();
        for (t, s) in states.iter().enumerate() {
            for k in 0..4 {
                assert_eq!(s.data()[k], s0.data()[k] + (t + 1) as f64 * c.data()[k]);
            }
        }

        let elems = random_elems(6, &shape, 2);
        let zeroed: Vec<_> = elems
            .iter()
            .map(|e| ScanElement::new(e.a.clone(), Tensor::zeros(&shape)).unwrap())
            .collect();
        let last = scan_sequential(&zeroed, &s0).unwrap().pop().unwrap();
        for k in 0..4 {
            let prod: f64 = elems.iter().map(|e| e.a.data()[k]).product();
            assert!((last.data()[k] - prod * s0.data()[k]).abs() < 1e-15);
        }

        // unrolled loop oracle
        let elems = random_elems(7, &shape, 3);
        let states = scan_sequential(&elems, &s0).unwrap();
        let mut s = s0.to_f64();
        for (t, e) in elems.iter().enumerate() {
            for k in 0..4 {
                s[k] = e.a.data()[k] * s[k] + e.b.data()[k];
            }
            assert_eq!(states[t].data(), s.as_slice());
        }
    }

    #[test]
    fn single_step_parallel() {
        let elems = random_elems(1, &[3, 2], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let p = scan_parallel(&elems, &s0).unwrap();
        assert_eq!(p[0], elems[0].apply(&s0).unwrap());
    }

    #[test]
    fn modes_agree_on_long_random_input() {
        let shape = [64, 16];
        let elems = random_elems(1024, &shape, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = Tensor::randn(&shape, 1.0, &mut rng);
        let seq = scan_sequential(&elems, &s0).unwrap();
        let par = scan_parallel(&elems, &s0).unwrap();
        assert!(max_diff(&seq, &par) <= 1e-10);
        let elems = &elems[..1000];
        let seq = &seq[..1000];
        let ch = scan_chunked(elems, &s0, 64).unwrap();
        assert!(max_diff(seq, &ch) <= 1e-10);
    }

    #[test]
    fn chunk_extremes_are_bit_identical() {
        let elems = random_elems(37, &[4, 3], 8);
        let s0 = Tensor::zeros(&[4, 3]);
        let seq = scan_sequential(&elems, &s0).unwrap();
        let par = scan_parallel(&elems, &s0).unwrap();
        assert_eq!(scan_chunked(&elems, &s0, 1).unwrap(), seq);
        assert_eq!(scan_chunked(&elems, &s0, 37).unwrap(), par);
        assert_eq!(scan_chunked(&elems, &s0, 100).unwrap(), par);
    }

    #[test]
    fn errors() {
        let s0 = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(scan_sequential(&[], &s0), Err(Error::EmptyInput(_))));
        assert!(matches!(scan_parallel(&[], &s0), Err(Error::EmptyInput(_))));
        let elems = random_elems(3, &[2, 2], 9);
        assert!(scan_chunked(&elems, &s0, 0).is_err());
        let other = random_elems(1, &[3, 2], 9);
        assert!(combine(&elems[0], &other[0]).is_err());
        assert!(scan_sequential(&other, &s0).is_err());
        assert!(ScanElement::new(Tensor::<f64>::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn parallel_is_deterministic_across_pool_sizes() {
        let elems = random_elems(300, &[8, 4], 10);
        let s0 = Tensor::zeros(&[8, 4]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| scan_parallel(&elems, &s0).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let shape = [2, 2];
        let elems = random_elems(5, &shape, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s0 = Tensor::randn(&shape, 1.0, &mut rng);
        let weights: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::randn(&shape, 1.0, &mut rng)).collect();
        let loss = |elems: &[ScanElement<f64>], s0: &Tensor<f64>| -> f64 {
            let st = scan_sequential(elems, s0).unwrap();
            st.iter()
                .zip(&weights)
                .map(|(s, w)| s.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let states = scan_sequential(&elems, &s0).unwrap();
        let g = scan_adjoint(&elems, &s0, &states, &weights).unwrap();
        let h = 1e-6;
        for t in 0..5 {
            for k in 0..4 {
                for which in 0..2 {
                    let mut p = elems.clone();
                    let mut m = elems.clone();
                    if which == 0 {
                        p[t].a.data_mut()[k] += h;
                        m[t].a.data_mut()[k] -= h;
                    } else {
                        p[t].b.data_mut()[k] += h;
                        m[t].b.data_mut()[k] -= h;
                    }
                    let fd = (loss(&p, &s0) - loss(&m, &s0)) / (2.0 * h);
                    let an = if which == 0 { g.da[t].data()[k] } else { g.db[t].data()[k] };
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "t{t} k{k} {which}");
                }
            }
        }
        for k in 0..4 {
            let mut p = s0.clone();
            let mut m = s0.clone();
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let fd = (loss(&elems, &p) - loss(&elems, &m)) / (2.0 * h);
            assert!((fd - g.ds0.data()[k]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    fn dyadic() -> impl Strategy<Value = f64> {
        (-64i32..=64).prop_map(|k| k as f64 / 16.0)
    }

    fn element(n: usize) -> impl Strategy<Value = ScanElement<f64>> {
        (prop::collection::vec(dyadic(), n), prop::collection::vec(dyadic(), n)).prop_map(move |(a, b)| {
            ScanElement::new(Tensor::vector(a), Tensor::vector(b)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn combine_is_associative_on_dyadics(e1 in element(4), e2 in element(4), e3 in element(4)) {
            let left = combine(&combine(&e1, &e2).unwrap(), &e3).unwrap();
            let right = combine(&e1, &combine(&e2, &e3).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn combine_is_associative_on_reals(seed in 0u64..1000) {
            let es = random_elems(3, &[5], seed);
            let left = combine(&combine(&es[0], &es[1]).unwrap(), &es[2]).unwrap();
            let right = combine(&es[0], &combine(&es[1], &es[2]).unwrap()).unwrap();
            for (x, y) in left.b.data().iter().zip(right.b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300));
            }
            for (x, y) in left.a.data().iter().zip(right.a.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()));
            }
        }

        #[test]
        fn modes_agree_and_states_stay_bounded(seed in 0u64..200, t in 1usize..200, chunk in 1usize..40) {
            let elems = random_elems(t, &[3, 2], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let s0 = Tensor::randn(&[3, 2], 1.0, &mut rng);
            let seq = scan_sequential(&elems, &s0).unwrap();
            let par = scan_parallel(&elems, &s0).unwrap();
            let ch = scan_chunked(&elems, &s0, chunk).unwrap();
            prop_assert!(max_diff(&seq, &par) <= 1e-10);
            prop_assert!(max_diff(&seq, &ch) <= 1e-10);
            let beta = elems.iter().map(|e| e.b.max_abs()).fold(0.0, f64::max);
            for (i, s) in seq.iter().enumerate() {
                prop_assert!(s.max_abs() <= s0.max_abs() + (i + 1) as f64 * beta + 1e-12);
            }
        }
    }
}
