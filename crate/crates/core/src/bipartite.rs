//! Visit–code bipartite structure: attributed node embeddings, edge
//! sampling tied to the temporal minibatch, and the negative-sampling
//! second-order proximity loss.
//!
//! Visits are embedded inductively from their multi-hot code vector
//! (`v = xᵀW_v + b_v`), codes from their one-hot index (`c_j = W_c[j] + b_c`).
//! Nothing is stored per visit, so unseen visits embed the same way.

use rand::Rng as _;

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Patient, Visit};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

/// Default number of negative codes per positive edge.
pub const DEFAULT_NEGATIVES: usize = 2;
/// Positive edges kept per patient per step.
pub const MAX_POSITIVES_PER_PATIENT: usize = 512;

/// Edges between visits and codes derived from multi-hot vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    /// `(patient, visit)` for every visit node.
    pub visits: Vec<(usize, usize)>,
    /// `(visit node, code)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub n_codes: usize,
}

impl BipartiteGraph {
    pub fn build(patients: &[Patient], n_codes: usize) -> Self {
        let mut visits = Vec::new();
        let mut edges = Vec::new();
        for (pi, p) in patients.iter().enumerate() {
            for (vi, v) in p.visits.iter().enumerate() {
                let node = visits.len();
                visits.push((pi, vi));
                edges.extend(v.codes.iter().map(|&c| (node, c)));
            }
        }
        Self { visits, edges, n_codes }
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|(v, _)| *v == node).count()
    }
}

/// Parameter handles of the two node-type projections.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub w_visit: ParamId,
    pub b_visit: ParamId,
    pub w_code: ParamId,
    pub b_code: ParamId,
}

impl EmbeddingParams {
    pub fn create<T: Real>(store: &mut ParamStore<T>, n_codes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w_visit: store.create("marker.w_visit", n_codes, dim, Init::Xavier, rng)?,
            b_visit: store.create("marker.b_visit", 1, dim, Init::Zeros, rng)?,
            w_code: store.create("marker.w_code", n_codes, dim, Init::Xavier, rng)?,
            b_code: store.create("marker.b_code", 1, dim, Init::Zeros, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        Ok(Self {
            w_visit: store.id("marker.w_visit")?,
            b_visit: store.id("marker.b_visit")?,
            w_code: store.id("marker.w_code")?,
            b_code: store.id("marker.b_code")?,
        })
    }

    /// `v = xᵀW_v + b_v` for a multi-hot `x`.
    pub fn embed_visit<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Result<Tensor<T>> {
        let w = store.value(self.w_visit);
        if x.len() != w.rows() {
            return invalid(format!("multi-hot has length {}, taxonomy has {}", x.len(), w.rows()));
        }
        let mut out = Tensor::row(x.to_vec()).matmul(w)?;
        out.add_assign(store.value(self.b_visit));
        Ok(out)
    }

    /// `c_j = W_c[j] + b_c`.
    pub fn embed_code<T: Real>(&self, store: &ParamStore<T>, j: usize) -> Result<Tensor<T>> {
        let w = store.value(self.w_code);
        if j >= w.rows() {
            return invalid(format!("code index {j} out of range 0..{}", w.rows()));
        }
        let b = store.value(self.b_code);
        Ok(Tensor::row(w.row_slice(j).iter().zip(b.data()).map(|(&a, &c)| a + c).collect()))
    }

    /// Visit embeddings of a whole sequence as an `[n, D_m]` node.
    pub fn visits_on_tape<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, visits: &[Visit]) -> Result<Var> {
        let w = tape.param(store, self.w_visit);
        let b = tape.param(store, self.b_visit);
        let n_codes = store.value(self.w_visit).rows();
        let mut data = Vec::with_capacity(visits.len() * n_codes);
        for v in visits {
            data.extend(v.multi_hot::<T>(n_codes));
        }
        let x = tape.constant(Tensor::matrix(visits.len(), n_codes, data)?)?;
        let ones = tape.constant(Tensor::filled(&[visits.len(), 1], T::one()))?;
        let xw = tape.matmul(x, w)?;
        let bias = tape.matmul(ones, b)?;
        tape.add(xw, bias)
    }
}

/// One sampled positive edge with its negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveEdge {
    /// Index of the patient within the batch slice passed to the sampler.
    pub patient: usize,
    pub visit: usize,
    pub code: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EdgeBatch {
    pub positives: Vec<PositiveEdge>,
    pub negatives_per_positive: usize,
}

impl EdgeBatch {
    pub fn for_patient(&self, patient: usize) -> impl Iterator<Item = &PositiveEdge> {
        self.positives.iter().filter(move |e| e.patient == patient)
    }

    /// Every edge of every visit, with all unlinked codes as negatives.
    pub fn exhaustive(patients: &[&[Visit]], n_codes: usize) -> Result<Self> {
        let mut positives = Vec::new();
        for (pi, visits) in patients.iter().enumerate() {
            for (vi, v) in visits.iter().enumerate() {
                if v.codes.len() >= n_codes {
                    return Err(Error::Invalid("visit links every code; no negatives exist".into()));
                }
                let negs: Vec<usize> = (0..n_codes).filter(|c| !v.has_code(*c)).collect();
                for &c in &v.codes {
                    positives.push(PositiveEdge { patient: pi, visit: vi, code: c, negatives: negs.clone() });
                }
            }
        }
        let k = positives.first().map_or(0, |e| e.negatives.len());
        Ok(Self { positives, negatives_per_positive: k })
    }
}

fn draw_negatives(visit: &Visit, n_codes: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_codes <= visit.codes.len() {
        return invalid(format!("cannot draw negatives: visit has {} of {n_codes} codes", visit.codes.len()));
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = rng.gen_range(0..n_codes);
        if !visit.has_code(c) {
            out.push(c);
        }
    }
    Ok(out)
}

fn cap_positives(mut edges: Vec<(usize, usize)>, cap: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    if edges.len() > cap {
        // partial Fisher–Yates, then restore visit order
        for i in 0..cap {
            let j = rng.gen_range(i..edges.len());
            edges.swap(i, j);
        }
        edges.truncate(cap);
        edges.sort_unstable();
    }
    edges
}

/// Visit-sequence-based sampling: positives come from the visits of the
/// batch patients; each gets `k` uniform negatives outside its visit.
pub fn sample_edges(batch: &[&[Visit]], n_codes: usize, k: usize, cap: usize, rng: &mut Rng) -> Result<EdgeBatch> {
    if batch.is_empty() {
        return invalid("edge sampling needs a non-empty batch");
    }
    if k == 0 {
        return invalid("need at least one negative per positive");
    }
    let mut positives = Vec::new();
    for (pi, visits) in batch.iter().enumerate() {
        let edges: Vec<(usize, usize)> =
            visits.iter().enumerate().flat_map(|(vi, v)| v.codes.iter().map(move |&c| (vi, c))).collect();
        for (vi, c) in cap_positives(edges, cap, rng) {
            let negatives = draw_negatives(&visits[vi], n_codes, k, rng)?;
            positives.push(PositiveEdge { patient: pi, visit: vi, code: c, negatives });
        }
    }
    Ok(EdgeBatch { positives, negatives_per_positive: k })
}

/// Uniform positive edges from the whole corpus, as many per batch patient
/// as visit-sequence sampling would give. `patient` indexes `corpus`.
pub fn sample_random_edges(
    batch: &[&[Visit]],
    corpus: &[&[Visit]],
    n_codes: usize,
    k: usize,
    cap: usize,
    rng: &mut Rng,
) -> Result<Vec<EdgeBatch>> {
    let graph_edges: Vec<(usize, usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(pi, vs)| vs.iter().enumerate().flat_map(move |(vi, v)| v.codes.iter().map(move |&c| (pi, vi, c))))
        .collect();
    if graph_edges.is_empty() {
        return invalid("corpus has no edges");
    }
    let mut out = Vec::with_capacity(batch.len());
    for visits in batch {
        let count = visits.iter().map(|v| v.codes.len()).sum::<usize>().min(cap);
        let mut positives = Vec::with_capacity(count);
        for _ in 0..count {
            let (pi, vi, c) = graph_edges[rng.gen_range(0..graph_edges.len())];
            let negatives = draw_negatives(&corpus[pi][vi], n_codes, k, rng)?;
            positives.push(PositiveEdge { patient: pi, visit: vi, code: c, negatives });
        }
        out.push(EdgeBatch { positives, negatives_per_positive: k });
    }
    Ok(out)
}

/// `−Σ [ln σ(c⁺·v) + Σ_k ln σ(−c⁻_k·v)]` over `edges`, whose visit
/// embeddings are rows of the `[n, D_m]` nodes in `visit_rows`, picked by
/// `row_of(edge)`.
pub fn structural_loss_on_tape<'a, T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &EmbeddingParams,
    edges: impl IntoIterator<Item = &'a PositiveEdge>,
    mut visit_row: impl FnMut(&mut Tape<T>, &PositiveEdge) -> Result<Var>,
) -> Result<Option<Var>> {
    let w_code = tape.param(store, params.w_code);
    let b_code = tape.param(store, params.b_code);
    let mut terms = Vec::new();
    let mut edges = edges.into_iter().peekable();
    while let Some(first) = edges.next() {
        // group consecutive edges of the same visit so its embedding is used once
        let mut group = vec![first];
        while let Some(e) = edges.peek() {
            if e.patient == first.patient && e.visit == first.visit {
                group.push(edges.next().expect("peeked"));
            } else {
                break;
            }
        }
        let v = visit_row(tape, first)?;
        let mut rows = Vec::new();
        let mut signs = Vec::new();
        for e in &group {
            rows.push(e.code);
            signs.push(T::one());
            for &n in &e.negatives {
                rows.push(n);
                signs.push(-T::one());
            }
        }
        let m = rows.len();
        let c = tape.gather_rows(w_code, &rows)?;
        let vt = tape.transpose(v)?;
        let scores = tape.matmul(c, vt)?;
        let bias = tape.matmul(b_code, vt)?;
        let scores = tape.add(scores, bias)?;
        let sign = tape.constant(Tensor::matrix(m, 1, signs)?)?;
        let signed = tape.mul(scores, sign)?;
        let ls = tape.log_sigmoid(signed)?;
        terms.push(tape.sum(ls)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all)?;
    Ok(Some(tape.neg(total)?))
}

/// Structural loss of an edge batch over explicit visit sequences, without
/// the temporal model. Used for evaluation and sanity checks.
pub fn structural_loss<T: Real>(
    store: &ParamStore<T>,
    params: &EmbeddingParams,
    batch: &EdgeBatch,
    visits: &[&[Visit]],
) -> Result<T> {
    let mut tape = Tape::inference();
    let mut rows: Vec<Option<Var>> = vec![None; visits.len()];
    let loss = structural_loss_on_tape(&mut tape, store, params, &batch.positives, |tape, e| {
        let all = match rows[e.patient] {
            Some(v) => v,
            None => {
                let v = params.visits_on_tape(tape, store, visits[e.patient])?;
                rows[e.patient] = Some(v);
                v
            }
        };
        tape.slice(all, 0, e.visit, 1)
    })?;
    Ok(loss.map_or(T::zero(), |l| tape.scalar(l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn visit(codes: &[usize]) -> Visit {
        Visit::new(0.0, codes.iter().copied()).unwrap()
    }

    fn store(n: usize, d: usize) -> (ParamStore<f64>, EmbeddingParams) {
        let mut s = ParamStore::new();
        let p = EmbeddingParams::create(&mut s, n, d, &mut substream(1, Stream::Init, 0)).unwrap();
        (s, p)
    }

    #[test]
    fn visit_embedding_examples() {
        let (s, p) = store(5, 3);
        let zero = p.embed_visit(&s, &[0.0; 5]).unwrap();
        assert_eq!(zero.data(), s.value(p.b_visit).data());
        let e2 = p.embed_visit(&s, &[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e2.data(), s.value(p.w_visit).row_slice(2));
        let e4 = p.embed_visit(&s, &[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let both = p.embed_visit(&s, &[0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        for k in 0..3 {
            let lin = e2.data()[k] + e4.data()[k] - s.value(p.b_visit).data()[k];
            assert!((both.data()[k] - lin).abs() < 1e-15);
        }
        assert!(p.embed_visit(&s, &[0.0; 4]).is_err());
    }

    #[test]
    fn code_embedding_examples() {
        let (mut s, p) = store(4, 3);
        let c1 = p.embed_code(&s, 1).unwrap();
        assert_ne!(c1, p.embed_code(&s, 2).unwrap());
        assert_eq!(c1, p.embed_code(&s, 1).unwrap());
        assert!(p.embed_code(&s, 4).is_err());
        s.get_mut(p.w_code).value = Tensor::zeros(&[4, 3]);
        s.get_mut(p.b_code).value = Tensor::row(vec![0.5, -1.0, 2.0]);
        assert_eq!(p.embed_code(&s, 0).unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn sampling_excludes_visit_codes() {
        let vs = vec![visit(&[0, 1])];
        let batch: Vec<&[Visit]> = vec![&vs];
        let mut rng = substream(3, Stream::Sampling, 0);
        let eb = sample_edges(&batch, 6, 2, MAX_POSITIVES_PER_PATIENT, &mut rng).unwrap();
        assert_eq!(eb.positives.len(), 2);
        let codes: Vec<usize> = eb.positives.iter().map(|e| e.code).collect();
        assert_eq!(codes, vec![0, 1]);
        for e in &eb.positives {
            assert_eq!(e.negatives.len(), 2);
            assert!(e.negatives.iter().all(|n| *n != 0 && *n != 1));
        }
        let again = sample_edges(&batch, 6, 2, MAX_POSITIVES_PER_PATIENT, &mut substream(3, Stream::Sampling, 0)).unwrap();
        assert_eq!(eb, again);
    }

    #[test]
    fn sampling_fails_when_no_negatives_exist() {
        let vs = vec![visit(&[0, 1, 2])];
        let batch: Vec<&[Visit]> = vec![&vs];
        assert!(sample_edges(&batch, 3, 2, 512, &mut substream(0, Stream::Sampling, 0)).is_err());
        assert!(sample_edges(&[], 3, 2, 512, &mut substream(0, Stream::Sampling, 0)).is_err());
    }

    #[test]
    fn positives_are_capped() {
        let vs: Vec<Visit> = (0..40).map(|_| visit(&[0, 1, 2, 3, 4])).collect();
        let batch: Vec<&[Visit]> = vec![&vs];
        let eb = sample_edges(&batch, 10, 1, 64, &mut substream(0, Stream::Sampling, 0)).unwrap();
        assert_eq!(eb.positives.len(), 64);
    }

    #[test]
    fn zero_scores_give_log_two_per_term() {
        let (mut s, p) = store(4, 3);
        for id in [p.w_visit, p.b_visit, p.w_code, p.b_code] {
            let shape = s.value(id).shape().to_vec();
            s.get_mut(id).value = Tensor::zeros(&shape);
        }
        let vs = vec![visit(&[0])];
        let eb = EdgeBatch {
            positives: vec![PositiveEdge { patient: 0, visit: 0, code: 0, negatives: vec![1, 2] }],
            negatives_per_positive: 2,
        };
        let l = structural_loss(&s, &p, &eb, &[&vs]).unwrap();
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn loss_vanishes_when_saturated() {
        let (mut s, p) = store(3, 1);
        s.get_mut(p.w_visit).value = Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        s.get_mut(p.b_visit).value = Tensor::zeros(&[1, 1]);
        s.get_mut(p.w_code).value = Tensor::matrix(3, 1, vec![40.0, -40.0, -40.0]).unwrap();
        s.get_mut(p.b_code).value = Tensor::zeros(&[1, 1]);
        let vs = vec![visit(&[0])];
        let eb = EdgeBatch::exhaustive(&[&vs], 3).unwrap();
        let l = structural_loss(&s, &p, &eb, &[&vs]).unwrap();
        assert!(l > 0.0 && l < 1e-15);
    }

    #[test]
    fn graph_edges_match_multi_hot() {
        let a = Patient::new("a", vec![visit(&[0, 2]), Visit::new(1.0, [1]).unwrap()]).unwrap();
        let g = BipartiteGraph::build(&[a], 3);
        assert_eq!(g.visits, vec![(0, 0), (0, 1)]);
        assert_eq!(g.edges, vec![(0, 0), (0, 2), (1, 1)]);
        assert_eq!(g.degree(0), 2);
    }
}
