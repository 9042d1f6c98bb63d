//! Linear-chain CRF scoring, decoding, and posterior marginals.
//!
//! Scores live in log space throughout. A label path `y_1..y_L` scores
//! `start[y_1] + sum_t emissions[t][y_t] + sum_t T[y_t][y_{t+1}] + end[y_L]`,
//! and the partition function is computed by the forward algorithm with
//! max-shifted log-sum-exp. The differentiable negative log-likelihood is
//! exposed as a tape op ([`crate::tensor::Tape::crf_nll`]); the functions
//! here are the plain-value counterparts used for decoding and diagnostics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-space kernels shared with the tape's CRF op. All slices are row-major
/// and validated by the callers.
pub(crate) mod raw {
    use crate::tensor::raw::logsumexp;

    /// Forward algorithm: returns `log Z`.
    pub fn log_partition(
        em: &[f64],
        trans: &[f64],
        start: &[f64],
        end: &[f64],
        len: usize,
        n: usize,
    ) -> f64 {
        let mut alpha: Vec<f64> = (0..n).map(|j| start[j] + em[j]).collect();
        let mut scratch = vec![0.0; n];
        for t in 1..len {
            let mut next = vec![0.0; n];
            for (j, nj) in next.iter_mut().enumerate() {
                for i in 0..n {
                    scratch[i] = alpha[i] + trans[i * n + j];
                }
                *nj = logsumexp(&scratch) + em[t * n + j];
            }
            alpha = next;
        }
        let finals: Vec<f64> = (0..n).map(|j| alpha[j] + end[j]).collect();
        logsumexp(&finals)
    }

    pub fn path_score(em: &[f64], trans: &[f64], start: &[f64], end: &[f64], labels: &[usize]) -> f64 {
        let n = start.len();
        let mut score = start[labels[0]] + end[labels[labels.len() - 1]];
        for (t, &y) in labels.iter().enumerate() {
            score += em[t * n + y];
        }
        for w in labels.windows(2) {
            score += trans[w[0] * n + w[1]];
        }
        score
    }

    pub struct Posteriors {
        /// `len x n` per-position label probabilities.
        pub unary: Vec<f64>,
        /// `(len-1) x n x n` consecutive-pair probabilities.
        pub pairwise: Vec<f64>,
        pub log_z: f64,
    }

    /// Forward-backward recursion producing unary and pairwise posteriors.
    pub fn posteriors(
        em: &[f64],
        trans: &[f64],
        start: &[f64],
        end: &[f64],
        len: usize,
        n: usize,
    ) -> Posteriors {
        let mut alpha = vec![0.0; len * n];
        for j in 0..n {
            alpha[j] = start[j] + em[j];
        }
        let mut scratch = vec![0.0; n];
        for t in 1..len {
            for j in 0..n {
                for i in 0..n {
                    scratch[i] = alpha[(t - 1) * n + i] + trans[i * n + j];
                }
                alpha[t * n + j] = logsumexp(&scratch) + em[t * n + j];
            }
        }
        let mut beta = vec![0.0; len * n];
        for j in 0..n {
            beta[(len - 1) * n + j] = end[j];
        }
        for t in (0..len - 1).rev() {
            for i in 0..n {
                for j in 0..n {
                    scratch[j] = trans[i * n + j] + em[(t + 1) * n + j] + beta[(t + 1) * n + j];
                }
                beta[t * n + i] = logsumexp(&scratch);
            }
        }
        let finals: Vec<f64> = (0..n).map(|j| alpha[(len - 1) * n + j] + end[j]).collect();
        let log_z = logsumexp(&finals);

        let mut unary = vec![0.0; len * n];
        for t in 0..len {
            for j in 0..n {
                unary[t * n + j] = (alpha[t * n + j] + beta[t * n + j] - log_z).exp();
            }
        }
        let mut pairwise = vec![0.0; len.saturating_sub(1) * n * n];
        for t in 0..len.saturating_sub(1) {
            for i in 0..n {
                for j in 0..n {
                    pairwise[t * n * n + i * n + j] = (alpha[t * n + i]
                        + trans[i * n + j]
                        + em[(t + 1) * n + j]
                        + beta[(t + 1) * n + j]
                        - log_z)
                        .exp();
                }
            }
        }
        Posteriors {
            unary,
            pairwise,
            log_z,
        }
    }

    /// Max-product recursion. Ties break toward the lower ordinal both in
    /// the per-step backpointers and in the final state.
    pub fn viterbi(
        em: &[f64],
        trans: &[f64],
        start: &[f64],
        end: &[f64],
        len: usize,
        n: usize,
    ) -> (Vec<usize>, f64) {
        let mut delta: Vec<f64> = (0..n).map(|j| start[j] + em[j]).collect();
        let mut back = vec![0usize; len * n];
        for t in 1..len {
            let mut next = vec![f64::NEG_INFINITY; n];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut best = 0;
                let mut best_score = delta[0] + trans[j];
                for i in 1..n {
                    let s = delta[i] + trans[i * n + j];
                    if s > best_score {
                        best_score = s;
                        best = i;
                    }
                }
                *nj = best_score + em[t * n + j];
                back[t * n + j] = best;
            }
            delta = next;
        }
        let mut best = 0;
        let mut best_score = delta[0] + end[0];
        for j in 1..n {
            let s = delta[j] + end[j];
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        let mut path = vec![0usize; len];
        path[len - 1] = best;
        for t in (1..len).rev() {
            path[t - 1] = back[t * n + path[t]];
        }
        (path, best_score)
    }
}

fn validate(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Result<(usize, usize)> {
    let (len, n) = emissions.dims2()?;
    let (tr, tc) = transitions.dims2()?;
    if tr != n || tc != n {
        return Err(Error::Dimension(format!(
            "transition matrix {:?} does not match {n} labels",
            transitions.shape()
        )));
    }
    if start.numel() != n || end.numel() != n {
        return Err(Error::Dimension(
            "start/end score lengths must equal the label count".to_string(),
        ));
    }
    Ok((len, n))
}

/// Negative log-likelihood of `labels` under the CRF: `log Z - score(path)`.
pub fn crf_log_likelihood(
    emissions: &Tensor,
    labels: &[usize],
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Result<f64> {
    let (len, n) = validate(emissions, transitions, start, end)?;
    if labels.len() != len {
        return Err(Error::Contract(format!(
            "label path length {} does not match {len} emission rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Contract(format!(
            "label ordinal {bad} out of range for {n} labels"
        )));
    }
    let log_z = raw::log_partition(
        emissions.data(),
        transitions.data(),
        start.data(),
        end.data(),
        len,
        n,
    );
    let score = raw::path_score(
        emissions.data(),
        transitions.data(),
        start.data(),
        end.data(),
        labels,
    );
    Ok(log_z - score)
}

/// Highest-scoring label sequence and its score. Ties break toward the
/// lower ordinal at each backtrack step.
pub fn crf_viterbi_decode(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Result<(Vec<usize>, f64)> {
    let (len, n) = validate(emissions, transitions, start, end)?;
    Ok(raw::viterbi(
        emissions.data(),
        transitions.data(),
        start.data(),
        end.data(),
        len,
        n,
    ))
}

/// Per-position posterior label probabilities (`L x |Y|`, rows sum to 1).
pub fn crf_marginals(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Result<Tensor> {
    let (len, n) = validate(emissions, transitions, start, end)?;
    let post = raw::posteriors(
        emissions.data(),
        transitions.data(),
        start.data(),
        end.data(),
        len,
        n,
    );
    Tensor::from_vec(vec![len, n], post.unary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zeros_crf(len: usize, n: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        (
            Tensor::zeros(vec![len, n]),
            Tensor::zeros(vec![n, n]),
            Tensor::zeros(vec![n]),
            Tensor::zeros(vec![n]),
        )
    }

    fn random_crf(rng: &mut ChaCha8Rng, len: usize, n: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut mk = |shape: Vec<usize>| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        (mk(vec![len, n]), mk(vec![n, n]), mk(vec![n]), mk(vec![n]))
    }

    /// Independent oracle: enumerate every label sequence.
    fn enumerate_paths(len: usize, n: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..len {
            let mut next = Vec::with_capacity(paths.len() * n);
            for p in &paths {
                for y in 0..n {
                    let mut q = p.clone();
                    q.push(y);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn brute_force_log_z(em: &Tensor, tr: &Tensor, st: &Tensor, en: &Tensor) -> f64 {
        let (len, n) = em.dims2().unwrap();
        let scores: Vec<f64> = enumerate_paths(len, n)
            .iter()
            .map(|p| raw::path_score(em.data(), tr.data(), st.data(), en.data(), p))
            .collect();
        crate::tensor::raw::logsumexp(&scores)
    }

    #[test]
    fn all_zero_scores_give_ln_8() {
        let (em, tr, st, en) = zeros_crf(3, 2);
        let nll = crf_log_likelihood(&em, &[0, 1, 0], &tr, &st, &en).unwrap();
        assert!((nll - 8.0f64.ln()).abs() < 1e-12, "nll = {nll}");
    }

    #[test]
    fn single_label_nll_is_zero() {
        let em = Tensor::matrix(&[vec![3.5], vec![-1.0], vec![0.25]]).unwrap();
        let tr = Tensor::from_vec(vec![1, 1], vec![0.7]).unwrap();
        let st = Tensor::vector(vec![2.0]).unwrap();
        let en = Tensor::vector(vec![-0.5]).unwrap();
        let nll = crf_log_likelihood(&em, &[0, 0, 0], &tr, &st, &en).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        let (em, tr, st, en) = zeros_crf(2, 2);
        assert!(crf_log_likelihood(&em, &[0, 2], &tr, &st, &en).is_err());
    }

    #[test]
    fn nll_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let len = rng.random_range(1..=5);
            let n = rng.random_range(1..=4);
            let (em, tr, st, en) = random_crf(&mut rng, len, n);
            let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
            let nll = crf_log_likelihood(&em, &labels, &tr, &st, &en).unwrap();
            let log_z = brute_force_log_z(&em, &tr, &st, &en);
            let score = raw::path_score(em.data(), tr.data(), st.data(), en.data(), &labels);
            assert!((nll - (log_z - score)).abs() < 1e-8);
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (em, tr, st, en) = random_crf(&mut rng, 5, 4);
        let total: f64 = enumerate_paths(5, 4)
            .iter()
            .map(|p| (-crf_log_likelihood(&em, p, &tr, &st, &en).unwrap()).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8, "total = {total}");
    }

    #[test]
    fn zero_transitions_decode_to_per_position_argmax() {
        let em = Tensor::matrix(&[
            vec![0.1, 0.9, 0.2],
            vec![1.5, 0.0, -0.5],
            vec![-1.0, -2.0, 3.0],
        ])
        .unwrap();
        let tr = Tensor::zeros(vec![3, 3]);
        let st = Tensor::zeros(vec![3]);
        let en = Tensor::zeros(vec![3]);
        let (path, _) = crf_viterbi_decode(&em, &tr, &st, &en).unwrap();
        assert_eq!(path, vec![1, 0, 2]);
    }

    #[test]
    fn single_label_viterbi_score() {
        let em = Tensor::matrix(&[vec![1.0], vec![2.0]]).unwrap();
        let tr = Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap();
        let st = Tensor::vector(vec![0.25]).unwrap();
        let en = Tensor::vector(vec![-0.125]).unwrap();
        let (path, score) = crf_viterbi_decode(&em, &tr, &st, &en).unwrap();
        assert_eq!(path, vec![0, 0]);
        assert!((score - (1.0 + 2.0 + 0.5 + 0.25 - 0.125)).abs() < 1e-12);
    }

    #[test]
    fn viterbi_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let len = rng.random_range(1..=6);
            let n = rng.random_range(1..=3);
            let (em, tr, st, en) = random_crf(&mut rng, len, n);
            let (path, score) = crf_viterbi_decode(&em, &tr, &st, &en).unwrap();
            let (best_path, best_score) = enumerate_paths(len, n)
                .into_iter()
                .map(|p| {
                    let s = raw::path_score(em.data(), tr.data(), st.data(), en.data(), &p);
                    (p, s)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap();
            assert!((score - best_score).abs() < 1e-9);
            assert_eq!(path, best_path);
        }
    }

    #[test]
    fn viterbi_ties_break_to_lower_ordinal() {
        let (em, tr, st, en) = zeros_crf(3, 3);
        let (path, score) = crf_viterbi_decode(&em, &tr, &st, &en).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn zero_scores_marginals_are_uniform() {
        let (em, tr, st, en) = zeros_crf(4, 2);
        let m = crf_marginals(&em, &tr, &st, &en).unwrap();
        for v in m.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (em, tr, st, en) = random_crf(&mut rng, 4, 3);
        let m = crf_marginals(&em, &tr, &st, &en).unwrap();
        let log_z = brute_force_log_z(&em, &tr, &st, &en);
        let mut expected = vec![0.0; 4 * 3];
        for p in enumerate_paths(4, 3) {
            let w = (raw::path_score(em.data(), tr.data(), st.data(), en.data(), &p) - log_z).exp();
            for (t, &y) in p.iter().enumerate() {
                expected[t * 3 + y] += w;
            }
        }
        for (got, want) in m.data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn marginal_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..5 {
            let (em, tr, st, en) = random_crf(&mut rng, 6, 4);
            let m = crf_marginals(&em, &tr, &st, &en).unwrap();
            for t in 0..6 {
                let s: f64 = (0..4).map(|j| m.at(t, j)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn emission_shift_preserves_viterbi_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (em, tr, st, en) = random_crf(&mut rng, 5, 3);
        let (path, _) = crf_viterbi_decode(&em, &tr, &st, &en).unwrap();
        let shifted: Vec<f64> = em.data().iter().map(|v| v + 3.25).collect();
        let em2 = Tensor::from_vec(vec![5, 3], shifted).unwrap();
        let (path2, _) = crf_viterbi_decode(&em2, &tr, &st, &en).unwrap();
        assert_eq!(path, path2);
    }
}
