//! Training and evaluation data: multi-query associative recall and
//! byte-level language modelling.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token id used for padding in recall sequences.
pub const PAD: usize = 0;

/// Independent generator for item `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Associative recall layout. Ids: `0` pad, keys `1..=K`, values
/// `K+1..=K+V`.
#[derive(Debug, Clone, PartialEq)]
pub struct MqarSpec {
    pub seq_len: usize,
    pub pairs: usize,
    pub key_vocab: usize,
    pub value_vocab: usize,
    pub queries: usize,
    /// Upper bound on the pad run between pairs and queries; `None` allows
    /// all slack positions. The run length is uniform on `0..=max_gap`.
    pub max_gap: Option<usize>,
    pub seed: u64,
}

impl Default for MqarSpec {
    fn default() -> Self {
        MqarSpec {
            seq_len: 128,
            pairs: 8,
            key_vocab: 64,
            value_vocab: 64,
            queries: 8,
            max_gap: None,
            seed: 0,
        }
    }
}

/// One sequence with targets at query positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Example {
    pub fn mask_as<F: Scalar>(&self) -> Vec<F> {
        self.mask.iter().map(|&b| if b { F::one() } else { F::zero() }).collect()
    }

    pub fn scored(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

impl MqarSpec {
    pub fn vocab(&self) -> usize {
        1 + self.key_vocab + self.value_vocab
    }

    pub fn key_id(&self, k: usize) -> usize {
        1 + k
    }

    pub fn value_id(&self, v: usize) -> usize {
        1 + self.key_vocab + v
    }

    pub fn is_key(&self, id: usize) -> bool {
        (1..=self.key_vocab).contains(&id)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("mqar: {msg}")));
        if self.pairs == 0 || self.queries == 0 {
            return bad("need at least one pair and one query".into());
        }
        if 2 * self.pairs + self.queries > self.seq_len {
            return bad(format!(
                "{} pairs and {} queries do not fit in {} tokens",
                self.pairs, self.queries, self.seq_len
            ));
        }
        if self.pairs > self.key_vocab {
            return bad(format!("{} distinct keys from a vocab of {}", self.pairs, self.key_vocab));
        }
        if self.queries > self.pairs {
            return bad(format!("{} distinct queries over {} pairs", self.queries, self.pairs));
        }
        if self.value_vocab == 0 {
            return bad("empty value vocab".into());
        }
        Ok(())
    }

    fn slack(&self) -> usize {
        self.seq_len - 2 * self.pairs - self.queries
    }

    /// Same layout with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        MqarSpec { seed, ..self.clone() }
    }
}

/// Pairs, then a random pad run, then the queried keys in random order,
/// then trailing pads. The target at a query position is its paired value.
pub fn mqar_generate(spec: &MqarSpec) -> Result<Example> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys: Vec<usize> = rand::seq::index::sample(&mut rng, spec.key_vocab, spec.pairs).into_vec();
    let values: Vec<usize> = (0..spec.pairs).map(|_| rng.gen_range(0..spec.value_vocab)).collect();
    let max_gap = spec.max_gap.unwrap_or(usize::MAX).min(spec.slack());
    let gap = rng.gen_range(0..=max_gap);
    let mut order: Vec<usize> = (0..spec.pairs).collect();
    order.shuffle(&mut rng);

    let t_len = spec.seq_len;
    let mut tokens = vec![PAD; t_len];
    let mut targets = vec![PAD; t_len];
    let mut mask = vec![false; t_len];
    for (p, (&k, &v)) in keys.iter().zip(&values).enumerate() {
        tokens[2 * p] = spec.key_id(k);
        tokens[2 * p + 1] = spec.value_id(v);
    }
    let start = 2 * spec.pairs + gap;
    for (qi, &p) in order.iter().take(spec.queries).enumerate() {
        tokens[start + qi] = spec.key_id(keys[p]);
        targets[start + qi] = spec.value_id(values[p]);
        mask[start + qi] = true;
    }
    Ok(Example { tokens, targets, mask })
}

/// `count` sequences; item `i` uses stream `i` of `spec.seed`.
pub fn mqar_batch(spec: &MqarSpec, count: usize) -> Result<Vec<Example>> {
    (0..count)
        .map(|i| {
            let seed = stream_rng(spec.seed, i as u64).gen();
            mqar_generate(&spec.with_seed(seed))
        })
        .collect()
}

/// Correct and scored counts for one sequence: argmax of `logits [T×V]`
/// against `targets` where `mask` is set.
pub fn recall_counts<F: Scalar>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> (usize, usize) {
    let mut correct = 0;
    let mut scored = 0;
    for t in 0..logits.rows() {
        if mask[t] {
            scored += 1;
            if crate::model::argmax(logits.row(t)) == targets[t] {
                correct += 1;
            }
        }
    }
    (correct, scored)
}

/// Fraction of masked positions whose argmax prediction is the target.
pub fn recall_accuracy<F: Scalar>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(crate::error::dim_err(
            "recall_accuracy",
            format!("logits {:?}, {} targets, {} mask", logits.shape(), targets.len(), mask.len()),
        ));
    }
    let (correct, scored) = recall_counts(logits, targets, mask);
    if scored == 0 {
        return Err(Error::EmptyInput("recall mask"));
    }
    Ok(correct as f64 / scored as f64)
}

/// Byte vocabulary plus the document sentinel.
pub const BYTE_VOCAB: usize = 257;
/// Ends every document.
pub const SENTINEL: usize = 256;

/// Byte tokens split into train and validation segments. A segment is a
/// stretch of one document, ending at its sentinel or at the split point.
#[derive(Debug, Clone, PartialEq)]
pub struct LmCorpus {
    tokens: Vec<u16>,
    train: Vec<Range<usize>>,
    val: Vec<Range<usize>>,
}

impl LmCorpus {
    /// The last `val_fraction` of the token stream is held out.
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D], val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Corpus(format!("val fraction {val_fraction} outside [0,1)")));
        }
        let mut tokens = Vec::new();
        let mut docs_at = Vec::new();
        for doc in docs {
            let doc = doc.as_ref();
            if doc.is_empty() {
                continue;
            }
            let start = tokens.len();
            tokens.extend(doc.iter().map(|&b| b as u16));
            tokens.push(SENTINEL as u16);
            docs_at.push(start..tokens.len());
        }
        if tokens.is_empty() {
            return Err(Error::Corpus("no text".into()));
        }
        let cut = ((1.0 - val_fraction) * tokens.len() as f64).floor() as usize;
        let clip = |r: &Range<usize>, lo: usize, hi: usize| r.start.max(lo)..r.end.min(hi);
        let keep = |v: Vec<Range<usize>>| v.into_iter().filter(|r| r.end > r.start).collect();
        let train = keep(docs_at.iter().map(|r| clip(r, 0, cut)).collect());
        let val = keep(docs_at.iter().map(|r| clip(r, cut, tokens.len())).collect());
        Ok(LmCorpus { tokens, train, val })
    }

    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        Self::from_documents(&[bytes], val_fraction)
    }

    /// Each file is one document.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], val_fraction: f64) -> Result<Self> {
        let docs = paths
            .iter()
            .map(|p| std::fs::read(p.as_ref()))
            .collect::<std::io::Result<Vec<_>>>()?;
        Self::from_documents(&docs, val_fraction)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train_segments(&self) -> &[Range<usize>] {
        &self.train
    }

    pub fn val_segments(&self) -> &[Range<usize>] {
        &self.val
    }

    pub fn tokens(&self, r: Range<usize>) -> impl Iterator<Item = usize> + '_ {
        self.tokens[r].iter().map(|&t| t as usize)
    }

    fn window(&self, start: usize, t_len: usize) -> Example {
        let span: Vec<usize> = self.tokens(start..start + t_len + 1).collect();
        Example {
            tokens: span[..t_len].to_vec(),
            targets: span[1..].to_vec(),
            mask: vec![true; t_len],
        }
    }
}

/// `batch` random training windows of `t_len` inputs with next-token
/// targets. A window stays inside one segment.
pub fn lm_windows(corpus: &LmCorpus, t_len: usize, batch: usize, seed: u64) -> Result<Vec<Example>> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("window length 0".into()));
    }
    // start positions available per segment
    let starts: Vec<(usize, usize)> = corpus
        .train
        .iter()
        .filter(|r| r.len() > t_len)
        .map(|r| (r.start, r.len() - t_len))
        .collect();
    let total: usize = starts.iter().map(|s| s.1).sum();
    if total == 0 {
        return Err(Error::Corpus(format!("no training segment holds {} tokens", t_len + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..batch)
        .map(|_| {
            let mut pick = rng.gen_range(0..total);
            let mut at = 0;
            for &(start, n) in &starts {
                if pick < n {
                    at = start + pick;
                    break;
                }
                pick -= n;
            }
            corpus.window(at, t_len)
        })
        .collect())
}

/// Non-overlapping validation windows with stride `t_len`.
pub fn val_windows(corpus: &LmCorpus, t_len: usize) -> Result<Vec<Example>> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("window length 0".into()));
    }
    let out: Vec<Example> = corpus
        .val
        .iter()
        .flat_map(|r| {
            let n = (r.len().saturating_sub(1)) / t_len;
            (0..n).map(move |j| r.start + j * t_len)
        })
        .map(|start| corpus.window(start, t_len))
        .collect();
    if out.is_empty() {
        return Err(Error::Corpus(format!("validation split shorter than {} tokens", t_len + 1)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub factor: usize,
    pub context: usize,
    pub windows: Vec<Example>,
}

impl EvalSet {
    pub fn scored_tokens(&self) -> usize {
        self.windows.iter().map(|w| w.tokens.len()).sum()
    }
}

/// Validation windows at `base·f` for each factor.
pub fn extrapolation_sets(corpus: &LmCorpus, base: usize, factors: &[usize]) -> Result<Vec<EvalSet>> {
    factors
        .iter()
        .map(|&factor| {
            if factor == 0 {
                return Err(Error::InvalidArgument("factor 0".into()));
            }
            let context = base * factor;
            Ok(EvalSet {
                factor,
                context,
                windows: val_windows(corpus, context)?,
            })
        })
        .collect()
}
