use cogcalib::knowledge::{self, CalScore};
use cogcalib::losses::{self, LossKind, LossSpec};
use cogcalib::metrics::{self, PredictionRecord};
use cogcalib::model::{self, softmax};
use proptest::prelude::*;

fn logits(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    k.prop_flat_map(|k| prop::collection::vec(-8.0f64..8.0, k))
}

fn records() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60)
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(l in logits(2..=8), c in -50.0f64..50.0, t in 0.1f64..5.0) {
        let p = softmax(&l, t).unwrap();
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let q = softmax(&shifted, t).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(model::argmax(&p), model::argmax(&l));
    }

    #[test]
    fn loss_gradients_match_differences(l in logits(2..=6), y in 0usize..6, kind in 0usize..4) {
        let y = y % l.len();
        let spec = LossSpec::multi_choice([LossKind::Ce, LossKind::Ls, LossKind::Mbls, LossKind::Ecp][kind]);
        // Stay away from margin-hinge kinks.
        let mut s = l.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(kind != 2 || s[0] - s[1] > 1e-3);
        let f = |x: &[f64]| losses::spec_loss(x, y, &spec).unwrap();
        let g = f(&l).dlogits;
        for i in 0..l.len() {
            let mut up = l.clone();
            up[i] += 1e-6;
            let mut dn = l.clone();
            dn[i] -= 1e-6;
            let fd = (f(&up).value - f(&dn).value) / 2e-6;
            prop_assert!((fd - g[i]).abs() < 1e-6, "component {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn open_gate_adds_scaled_regularizer(l in logits(2..=6), y in 0usize..6, kind in 1usize..4, alpha in 0.1f64..20.0) {
        let y = y % l.len();
        let mut spec = LossSpec::multi_choice([LossKind::Ce, LossKind::Ls, LossKind::Mbls, LossKind::Ecp][kind]);
        spec.alpha = alpha;
        let gated = losses::gated_loss(&l, y, &spec, 1).unwrap();
        let ce = losses::ce_loss(&l, y).unwrap();
        let reg = losses::regularizer(&l, &spec).unwrap();
        prop_assert!((gated.value - ce.value - alpha * reg.value).abs() < 1e-9 * (1.0 + gated.value.abs()));
        for i in 0..l.len() {
            prop_assert!((gated.dlogits[i] - ce.dlogits[i] - alpha * reg.dlogits[i]).abs() < 1e-9 * (1.0 + alpha));
        }
        if kind != 1 {
            // Margin and entropy losses are CE plus their regularizer.
            let full = losses::spec_loss(&l, y, &spec).unwrap();
            prop_assert!((full.value - ce.value - reg.value).abs() < 1e-9 * (1.0 + full.value.abs()));
        }
    }

    #[test]
    fn gate_zero_is_plain_ce(l in logits(2..=6), y in 0usize..6, kind in 1usize..4) {
        let y = y % l.len();
        let spec = LossSpec::multi_choice([LossKind::Ce, LossKind::Ls, LossKind::Mbls, LossKind::Ecp][kind]);
        prop_assert_eq!(losses::gated_loss(&l, y, &spec, 0).unwrap(), losses::ce_loss(&l, y).unwrap());
    }

    #[test]
    fn ece_ignores_record_order(recs in records(), seed in any::<u64>()) {
        let r: Vec<PredictionRecord> = recs.iter().map(|(c, ok)| PredictionRecord::new(*c, *ok)).collect();
        let mut shuffled = r.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = cogcalib::seed::splitmix64(s);
            shuffled.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let (a, b) = (metrics::ece(&r, 10).unwrap(), metrics::ece(&shuffled, 10).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auroc_is_antisymmetric(
        pos in prop::collection::vec(0.0f64..1.0, 1..40),
        neg in prop::collection::vec(0.0f64..1.0, 1..40),
    ) {
        let a = metrics::auroc(&pos, &neg).unwrap();
        let b = metrics::auroc(&neg, &pos).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rates_are_monotone_in_threshold(
        scores in prop::collection::vec((0.0f64..5.0, any::<bool>()), 1..100),
        m in 2usize..60,
    ) {
        let s: Vec<CalScore> = scores.iter().map(|(nll, correct)| CalScore { correct: *correct, nll: *nll }).collect();
        let lo = scores.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        let hi = scores.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        let mut prev = (0.0, 1.0);
        for t in knowledge::threshold_grid(lo, hi, m) {
            let (tpr, tnr) = knowledge::rates(&s, t);
            prop_assert!(tpr >= prev.0 && tnr <= prev.1);
            prev = (tpr, tnr);
        }
        let t = knowledge::threshold_from_scores(&s, m).unwrap();
        prop_assert!(t >= lo && t <= hi);
    }

    #[test]
    fn seq_confidence_lies_between_extremes(p in prop::collection::vec(1e-6f64..=1.0, 1..20)) {
        let c = metrics::seq_confidence(&p).unwrap();
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c >= lo * (1.0 - 1e-12) && c <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn temperature_keeps_argmax(l in logits(2..=10), t in 0.05f64..10.0) {
        let p = cogcalib::posthoc::apply_temperature(&l, t).unwrap();
        prop_assert_eq!(model::argmax(&p), model::argmax(&l));
    }
}
