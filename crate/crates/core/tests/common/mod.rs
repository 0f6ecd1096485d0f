#![allow(dead_code)]

use rand::Rng as _;
use visitcast::autodiff::{ParamStore, Tape};
use visitcast::bipartite::{sample_edges, EdgeBatch};
use visitcast::cascade::{CascadeModel, LossWeights, ModelConfig};
use visitcast::data::Visit;
use visitcast::rng::{substream, Stream};

/// Two patients with three visits each over six codes.
pub fn tiny_batch() -> Vec<Vec<Visit>> {
    let v = |t: f64, c: &[usize]| Visit::new(t, c.iter().copied()).unwrap();
    vec![
        vec![v(0.0, &[0, 2]), v(3.5, &[1, 2, 5]), v(4.25, &[3])],
        vec![v(1.0, &[4]), v(1.5, &[0, 4]), v(9.0, &[2, 3, 5])],
    ]
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(6).with_dims(4, 4, 4)
}

/// Randomise every parameter (biases included) so no gradient is trivially zero.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = substream(seed, Stream::Init, 99);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.gen_range(-0.4..0.4);
        }
    }
}

pub struct GroupCheck {
    pub name: String,
    pub rel_error: f64,
    pub worst_element: f64,
}

/// Central differences of the joint loss for every scalar of every
/// parameter, compared with the tape's gradients.
pub fn check_joint_loss_gradients(
    model: &mut CascadeModel<f64>,
    batch: &[Vec<Visit>],
    edges: &EdgeBatch,
    weights: LossWeights,
    h: f64,
) -> Vec<GroupCheck> {
    let refs: Vec<&[Visit]> = batch.iter().map(|v| v.as_slice()).collect();
    let mut tape = Tape::new();
    let loss = model.joint_loss(&mut tape, &refs, edges, weights).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut out = Vec::new();
    for (id, name) in ids {
        let analytic = grads.param(id).unwrap().data().to_vec();
        let mut fd = vec![0.0; analytic.len()];
        for k in 0..analytic.len() {
            let orig = model.store.value(id).data()[k];
            let eval = |x: f64, model: &mut CascadeModel<f64>| {
                model.store.get_mut(id).value.data_mut()[k] = x;
                let mut t = Tape::inference();
                let l = model.joint_loss(&mut t, &refs, edges, weights).unwrap();
                t.scalar(l)
            };
            let up = eval(orig + h, model);
            let down = eval(orig - h, model);
            model.store.get_mut(id).value.data_mut()[k] = orig;
            fd[k] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        let worst = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs() / (a.abs().max(b.abs()) + 1e-6))
            .fold(0.0, f64::max);
        out.push(GroupCheck { name, rel_error: if scale > 0.0 { diff / scale } else { diff }, worst_element: worst });
    }
    out
}

pub fn tiny_edges(batch: &[Vec<Visit>], seed: u64) -> EdgeBatch {
    let refs: Vec<&[Visit]> = batch.iter().map(|v| v.as_slice()).collect();
    sample_edges(&refs, 6, 2, 512, &mut substream(seed, Stream::Sampling, 0)).unwrap()
}
