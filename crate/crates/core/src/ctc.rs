//! CTC loss, greedy decoding and confidence-based masking.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Graph, Real, Tensor, Var};

pub const BLANK: usize = 0;
pub const MASK: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<blank>", "<mask>", "<pad>", "<unk>"];

/// Output symbols with reserved ids `blank = 0`, `mask = 1`, `pad = 2`, `unk = 3`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved symbols followed by `words` in sorted, deduplicated order.
    pub fn new(words: &[String]) -> Result<Self> {
        let mut sorted = words.to_vec();
        sorted.sort();
        sorted.dedup();
        let symbols: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(sorted)
            .collect();
        Self::try_from(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Maps transcript words to ids; reserved or unknown words are errors.
    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| match self.id(w) {
                Some(i) if !Self::is_reserved(i) => Ok(i),
                _ => Err(Error::UnknownToken(w.clone())),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.symbols.get(i).cloned().unwrap_or_else(|| RESERVED[UNK].into()))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() <= RESERVED.len()
            || symbols.iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "vocabulary must start with <blank> <mask> <pad> <unk> and contain a word".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        Ok(Vocabulary { symbols, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}

#[derive(Clone, Debug)]
pub struct CtcLoss<F> {
    /// `-log p(target | posterior)`; `+inf` when infeasible.
    pub loss: F,
    /// Gradient of `loss` with respect to the log-probabilities.
    pub grad: Tensor<F>,
    pub feasible: bool,
}

/// Minimum frames needed to emit `target`: its length plus one blank per adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward-backward over the blank-interleaved lattice in log space.
///
/// `log_probs` is `[T, V]`; rows need not be normalised (the gradient is taken
/// with respect to each entry independently).
pub fn ctc_loss<F: Real>(log_probs: &Tensor<F>, target: &[usize], blank: usize) -> Result<CtcLoss<F>> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if target.is_empty() {
        return Err(Error::InvalidArgument("CTC target must be non-empty".into()));
    }
    if let Some(&bad) = target.iter().find(|&&k| k == blank || k >= v) {
        return Err(Error::InvalidArgument(format!(
            "CTC target id {bad} is blank or outside vocabulary of {v}"
        )));
    }
    if t_len < min_frames(target) {
        return Ok(CtcLoss {
            loss: F::infinity(),
            grad: Tensor::zeros(log_probs.shape()),
            feasible: false,
        });
    }
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { target[s / 2] })
        .collect();
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext[s] != ext[s - 2];
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let ninf = F::neg_infinity();

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    alpha[1] = lp(0, ext[1]);
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if can_skip(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, ext[s]);
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = log_sum_exp(&[alpha[last + s_len - 1], alpha[last + s_len - 2]]);
    if log_p == ninf {
        return Ok(CtcLoss {
            loss: F::infinity(),
            grad: Tensor::zeros(log_probs.shape()),
            feasible: false,
        });
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = F::zero();
    beta[last + s_len - 2] = F::zero();
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext[s2]);
            let mut terms = [next(s), ninf, ninf];
            if s + 1 < s_len {
                terms[1] = next(s + 1);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms[2] = next(s + 2);
            }
            beta[t * s_len + s] = log_sum_exp(&terms);
        }
    }

    let mut grad = Tensor::zeros(log_probs.shape());
    let gd = grad.data_mut();
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                gd[t * v + ext[s]] = gd[t * v + ext[s]] - occ.exp();
            }
        }
    }
    Ok(CtcLoss {
        loss: -log_p,
        grad,
        feasible: true,
    })
}

impl<'s, F: Real> Graph<'s, F> {
    /// CTC loss node over `log_probs`, or `None` for an infeasible target.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Option<Var>> {
        let out = ctc_loss(self.value(log_probs), target, BLANK)?;
        if !out.feasible {
            return Ok(None);
        }
        self.attach_loss(log_probs, out.loss, out.grad).map(Some)
    }
}

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Canonical frame path for a label sequence: blanks only between repeats.
pub fn canonical_path(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(labels.len() * 2);
    for (i, &k) in labels.iter().enumerate() {
        if i > 0 && labels[i - 1] == k {
            out.push(blank);
        }
        out.push(k);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyDecode {
    pub tokens: Vec<usize>,
    /// Per output token: the highest frame probability among the frames merged into it.
    pub confidence: Vec<f64>,
}

/// Per-frame argmax (lowest id on ties), merge repeats, drop blank and the
/// other reserved ids. `log_probs` is `[T', V]`.
pub fn greedy_decode<F: Real>(log_probs: &Tensor<F>) -> GreedyDecode {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    let mut tokens = Vec::new();
    let mut confidence: Vec<f64> = Vec::new();
    let mut prev: Option<usize> = None;
    for t in 0..t_len {
        let row = &log_probs.data()[t * v..(t + 1) * v];
        let (best, lp) = row
            .iter()
            .enumerate()
            .fold((0, F::neg_infinity()), |acc, (k, &x)| if x > acc.1 { (k, x) } else { acc });
        let p = lp.f64().exp();
        let emits = !Vocabulary::is_reserved(best) || best == UNK;
        if Some(best) == prev {
            if emits {
                let last = confidence.last_mut().expect("run already emitted");
                *last = last.max(p);
            }
        } else if emits {
            tokens.push(best);
            confidence.push(p);
        }
        prev = Some(best);
    }
    GreedyDecode { tokens, confidence }
}

/// Token template with low-confidence positions replaced by the mask id.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedHypothesis {
    pub tokens: Vec<usize>,
    pub confidence: Vec<f64>,
    pub is_masked: Vec<bool>,
}

impl MaskedHypothesis {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.is_masked.iter().filter(|&&m| m).count()
    }

    /// Fully masked template of `len` positions.
    pub fn all_masked(len: usize) -> Self {
        MaskedHypothesis {
            tokens: vec![MASK; len],
            confidence: vec![0.0; len],
            is_masked: vec![true; len],
        }
    }
}

/// Masks every position whose confidence is below `threshold`.
pub fn mask_low_confidence(tokens: &[usize], confidence: &[f64], threshold: f64) -> Result<MaskedHypothesis> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold {threshold} outside [0, 1]"
        )));
    }
    if tokens.len() != confidence.len() {
        return Err(Error::shape(
            "mask_low_confidence",
            format!("{} tokens vs {} confidences", tokens.len(), confidence.len()),
        ));
    }
    let is_masked: Vec<bool> = confidence.iter().map(|&c| c < threshold).collect();
    Ok(MaskedHypothesis {
        tokens: tokens
            .iter()
            .zip(&is_masked)
            .map(|(&t, &m)| if m { MASK } else { t })
            .collect(),
        confidence: confidence.to_vec(),
        is_masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn log_rows(probs: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(
            &probs
                .iter()
                .map(|r| r.iter().map(|p| p.ln()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    /// Oracle: sum of path probabilities over all V^T paths that collapse to target.
    fn brute_force(log_probs: &Tensor<f64>, target: &[usize]) -> f64 {
        let (t, v) = (log_probs.rows(), log_probs.cols());
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        for code in 0..v.pow(t as u32) {
            let mut c = code;
            for p in path.iter_mut() {
                *p = c % v;
                c /= v;
            }
            let mut merged: Vec<usize> = Vec::new();
            for (i, &k) in path.iter().enumerate() {
                if i == 0 || path[i - 1] != k {
                    merged.push(k);
                }
            }
            merged.retain(|&k| k != 0);
            if merged == target {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| log_probs.data()[i * v + k])
                    .sum::<f64>()
                    .exp();
            }
        }
        total
    }

    fn random_posterior(rng: &mut impl Rng, t: usize, v: usize) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| (x / s).ln()).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_frame() {
        let lp = log_rows(&[&[0.2, 0.5, 0.3]]);
        let l = ctc_loss(&lp, &[1], 0).unwrap();
        assert!((l.loss + 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let (p1, p2) = ([0.3, 0.6, 0.1], [0.5, 0.2, 0.3]);
        let lp = log_rows(&[&p1, &p2]);
        let l = ctc_loss(&lp, &[1], 0).unwrap();
        let want = -(p1[1] * p2[1] + p1[1] * p2[0] + p1[0] * p2[1]).ln();
        assert!((l.loss - want).abs() < 1e-12);
        assert!((l.loss + brute_force(&lp, &[1]).ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_target_needs_blank() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let lp = random_posterior(&mut rng, 3, 3);
        let l = ctc_loss(&lp, &[1, 1], 0).unwrap();
        assert!(l.feasible);
        // only a,-,a is valid
        let d = lp.data();
        let want = -(d[1] + d[3] + d[2 * 3 + 1]);
        assert!((l.loss - want).abs() < 1e-12);
        assert!((l.loss + brute_force(&lp, &[1, 1]).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_flagged() {
        let lp = log_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let l = ctc_loss(&lp, &[1, 1], 0).unwrap();
        assert!(!l.feasible);
        assert!(l.loss.is_infinite());
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
        assert!(ctc_loss(&lp, &[], 0).is_err());
        assert!(ctc_loss(&lp, &[0], 0).is_err());
        assert!(ctc_loss(&lp, &[5], 0).is_err());
    }

    #[test]
    fn lattice_is_complete() {
        // T'=3, |V|=3: probability of every reachable label sequence sums to one.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let lp = random_posterior(&mut rng, 3, 3);
        let mut total = brute_force(&lp, &[]); // all-blank path
        let mut targets: Vec<Vec<usize>> = Vec::new();
        for len in 1..=3 {
            for code in 0..2usize.pow(len) {
                targets.push((0..len).map(|i| 1 + (code >> i) % 2).collect());
            }
        }
        for tgt in &targets {
            let l = ctc_loss(&lp, tgt, 0).unwrap();
            if l.feasible {
                total += (-l.loss).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let x = s.add("logits", random_posterior(&mut rng, 6, 4)).unwrap();
        let report = grad_check(
            &s,
            |g| {
                let xv = g.param(x);
                let lp = g.log_softmax(xv);
                Ok(g.ctc_loss(lp, &[1, 2, 2])?.expect("feasible"))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_equals_brute_force(
            seed in 0u64..1000, t in 1usize..=6, v in 2usize..=4, len in 1usize..=4
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let lp = random_posterior(&mut rng, t, v);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
            let l = ctc_loss(&lp, &target, 0).unwrap();
            let p = brute_force(&lp, &target);
            if l.feasible {
                prop_assert!((l.loss + p.ln()).abs() < 1e-6);
            } else {
                prop_assert_eq!(p, 0.0);
            }
        }

        #[test]
        fn collapse_drops_blanks_and_fixes_canonical_paths(
            path in proptest::collection::vec(0usize..4, 0..20)
        ) {
            let c = collapse(&path, 0);
            prop_assert!(c.iter().all(|&k| k != 0));
            prop_assert_eq!(collapse(&canonical_path(&c, 0), 0), c);
        }
    }

    #[test]
    fn greedy_rule_application() {
        // frame argmaxes [a,a,-,a,b,b] with a=4, b=5
        let v = 6;
        let frames = [4, 4, 0, 4, 5, 5];
        let probs = [0.6, 0.9, 0.8, 0.7, 0.95, 0.5];
        let rows: Vec<Vec<f64>> = frames
            .iter()
            .zip(probs)
            .map(|(&k, p)| {
                (0..v)
                    .map(|j| if j == k { p } else { (1.0 - p) / (v - 1) as f64 })
                    .map(f64::ln)
                    .collect()
            })
            .collect();
        let d = greedy_decode(&Tensor::from_rows(&rows).unwrap());
        assert_eq!(d.tokens, vec![4, 4, 5]);
        // oracle: max probability over each merged run
        let want = [0.6f64.max(0.9), 0.7, 0.95f64.max(0.5)];
        for (a, b) in d.confidence.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let blanks = Tensor::from_rows(&vec![vec![0.0, -5.0, -5.0]; 3]).unwrap();
        assert!(greedy_decode(&blanks).tokens.is_empty());
    }

    #[test]
    fn greedy_never_emits_blank_or_mask() {
        // mask and pad win some frames
        let rows = vec![
            vec![-3.0, -0.1, -3.0, -3.0, -2.0],
            vec![-3.0, -3.0, -0.1, -3.0, -2.0],
            vec![-3.0, -3.0, -3.0, -3.0, -0.1],
        ];
        let d = greedy_decode(&Tensor::<f64>::from_rows(&rows).unwrap());
        assert_eq!(d.tokens, vec![4]);
    }

    #[test]
    fn collapse_merges_before_dropping_blanks() {
        // the spec example output [a,a,b] is not a fixed point of collapse
        assert_eq!(collapse(&[4, 4, 0, 4, 5, 5], 0), vec![4, 4, 5]);
        assert_eq!(collapse(&[4, 4, 5], 0), vec![4, 5]);
        assert_eq!(canonical_path(&[4, 4, 5], 0), vec![4, 0, 4, 5]);
    }

    #[test]
    fn masking() {
        let h = mask_low_confidence(&[5, 6, 7], &[1.0, 1.0, 1.0], 0.9).unwrap();
        assert_eq!(h.num_masked(), 0);
        let h = mask_low_confidence(&[5, 6, 7], &[1.0, 0.95, 0.89], 0.9).unwrap();
        assert_eq!(h.is_masked, vec![false, false, true]);
        assert_eq!(h.tokens, vec![5, 6, MASK]);
        assert_eq!(h.confidence[2], 0.89);
        assert!(mask_low_confidence(&[], &[], 0.9).unwrap().is_empty());
        assert!(mask_low_confidence(&[1], &[0.5], 1.5).is_err());
        assert!(mask_low_confidence(&[1], &[], 0.5).is_err());
    }

    #[test]
    fn vocabulary_reserved_and_round_trip() {
        let words: Vec<String> = ["turn", "left", "turn"].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::new(&words).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<blank>"), Some(BLANK));
        assert_eq!(v.id("<mask>"), Some(MASK));
        let ids = v.encode(&words).unwrap();
        assert_eq!(v.decode(&ids), words);
        assert!(v.encode(&["<mask>".to_string()]).is_err());
        assert!(v.encode(&["right".to_string()]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>("[\"a\",\"b\"]").is_err());
    }
}
