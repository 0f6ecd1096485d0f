use proptest::prelude::*;
use rand::seq::SliceRandom;
use visitcast::bipartite::sample_edges;
use visitcast::cascade::{ModelConfig, Variant};
use visitcast::data::{codes_of, parse_jsonl, write_jsonl, CodeTaxonomy, Patient, Visit};
use visitcast::eval::{micro_auc, recall_at_k, MetricReport, PredictionRecord};
use visitcast::rng::{substream, Stream};
use visitcast::Model;

const N_CODES: usize = 7;

fn visits_strategy(max_len: usize) -> impl Strategy<Value = Vec<Visit>> {
    prop::collection::vec((0.01f64..40.0, prop::collection::btree_set(0..N_CODES, 1..4)), 1..=max_len).prop_map(|steps| {
        let mut t = 0.0;
        steps
            .into_iter()
            .map(|(gap, codes)| {
                t += gap;
                Visit::new(t, codes).unwrap()
            })
            .collect()
    })
}

fn taxonomy() -> CodeTaxonomy {
    CodeTaxonomy::new((0..N_CODES).map(|i| format!("C{i}"))).unwrap()
}

fn model(variant: Variant, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(N_CODES).with_dims(3, 2, 4);
    cfg.ablation = variant.ablation();
    Model::new(cfg, &mut substream(seed, Stream::Init, 0)).unwrap()
}

fn records(scores: &[Vec<f64>], truths: &[Vec<usize>]) -> Vec<PredictionRecord> {
    scores
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (s, t))| PredictionRecord {
            prev_time: i as f64,
            true_time: i as f64 + 1.0 + (i % 3) as f64,
            pred_time: i as f64 + 2.0,
            probs: s.clone(),
            truth: t.clone(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip(patients in prop::collection::vec(visits_strategy(6), 1..5)) {
        let tax = taxonomy();
        let ps: Vec<Patient> = patients.into_iter().enumerate().map(|(i, v)| Patient::new(format!("p{i}"), v).unwrap()).collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &ps, &tax).unwrap();
        let (_, back) = parse_jsonl(buf.as_slice(), Some(tax)).unwrap();
        prop_assert_eq!(back, ps);
    }

    #[test]
    fn multi_hot_round_trip(codes in prop::collection::btree_set(0..N_CODES, 1..N_CODES)) {
        let v = Visit::new(0.0, codes.iter().copied()).unwrap();
        let x = v.multi_hot::<f64>(N_CODES);
        prop_assert_eq!(x.iter().filter(|&&b| b == 1.0).count(), codes.len());
        prop_assert_eq!(codes_of(&x), codes.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn attention_is_a_causal_simplex(visits in visits_strategy(6), seed in 0u64..50, single in any::<bool>()) {
        let m = model(if single { Variant::SingleParent } else { Variant::Full }, seed);
        let preds = m.predict_steps(&visits, visits.len()).unwrap();
        for (i, p) in preds.iter().enumerate() {
            prop_assert_eq!(p.attention.len(), i + 1);
            prop_assert!(p.attention.iter().all(|&a| a >= 0.0));
            prop_assert!((p.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn predictions_ignore_the_future(visits in visits_strategy(6), extra in visits_strategy(3), seed in 0u64..50) {
        let m = model(Variant::Full, seed);
        let k = visits.len();
        let mut longer = visits.clone();
        let last = visits[k - 1].time;
        longer.extend(extra.into_iter().map(|v| Visit::new(last + v.time, v.codes).unwrap()));
        let short = m.predict_steps(&visits, k).unwrap();
        let long = m.predict_steps(&longer, k).unwrap();
        prop_assert_eq!(short, long);
    }

    #[test]
    fn recall_is_monotone_in_k(scores in prop::collection::vec(0u8..6, 2..12), pick in prop::collection::vec(any::<bool>(), 12)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let mut truth: Vec<usize> = (0..s.len()).filter(|&i| pick[i]).collect();
        if truth.is_empty() {
            truth.push(0);
        }
        let r: Vec<f64> = (1..=s.len()).map(|k| recall_at_k(&s, &truth, k).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.last().unwrap(), 1.0);
    }

    #[test]
    fn auc_matches_pairwise_count(scores in prop::collection::vec(0u8..5, 2..30), labels in prop::collection::vec(any::<bool>(), 30)) {
        let n = scores.len();
        let mut l = labels[..n].to_vec();
        l[0] = true;
        l[1] = false;
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((micro_auc(&s, &l).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_patient_order(seed in 0u64..1000) {
        let mut rng = substream(seed, Stream::Sampling, 0);
        let patients: Vec<Vec<PredictionRecord>> = (0..6)
            .map(|p| {
                let n = 1 + p % 3;
                let scores: Vec<Vec<f64>> = (0..n).map(|i| (0..N_CODES).map(|c| ((c * 7 + i * 3 + p) % 5) as f64).collect()).collect();
                let truths: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + p) % N_CODES, (i + 2 * p + 1) % N_CODES]).collect();
                records(&scores, &truths)
            })
            .collect();
        let mut shuffled = patients.clone();
        shuffled.shuffle(&mut rng);
        let a = MetricReport::from_records(&patients, &[1, 3]).unwrap();
        let b = MetricReport::from_records(&shuffled, &[1, 3]).unwrap();
        prop_assert!((a.rmse_log_time - b.rmse_log_time).abs() < 1e-12);
        for k in [1, 3] {
            prop_assert!((a.recall(k).unwrap() - b.recall(k).unwrap()).abs() < 1e-12);
        }
        prop_assert!((a.micro_auc.unwrap() - b.micro_auc.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negatives_avoid_the_visit_codes(patients in prop::collection::vec(visits_strategy(5), 1..4), k in 1usize..4, seed in 0u64..100) {
        let refs: Vec<&[Visit]> = patients.iter().map(|v| v.as_slice()).collect();
        let batch = sample_edges(&refs, N_CODES, k, 512, &mut substream(seed, Stream::Sampling, 0)).unwrap();
        let total: usize = patients.iter().flatten().map(|v| v.codes.len()).sum();
        prop_assert_eq!(batch.positives.len(), total);
        for e in &batch.positives {
            let v = &patients[e.patient][e.visit];
            prop_assert!(v.has_code(e.code));
            prop_assert_eq!(e.negatives.len(), k);
            prop_assert!(e.negatives.iter().all(|&n| !v.has_code(n)));
        }
    }
}
