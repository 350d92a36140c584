use proptest::prelude::*;

use angie::gpt::{attention_mask, softmax_rows, TokenLayout};
use angie::metrics::{beat_consistency_times, fgd};
use angie::motion::{
    affine_from_covariance, cholesky_decompose, motion_from_text, motion_to_text, CholeskyFactor, Mat2, MotionSequence,
    RegionMotionFrame,
};
use angie::tensor::Tensor;
use angie::vq::{perplexity, quantize, CodeSequence, Codebook, StreamKind};

fn spd() -> impl Strategy<Value = Mat2> {
    (0.05f64..4.0, 0.05f64..4.0, 0.0f64..std::f64::consts::PI).prop_map(|(s1, s2, th)| {
        let (c, s) = (th.cos(), th.sin());
        [[c * c * s1 + s * s * s2, c * s * (s1 - s2)], [c * s * (s1 - s2), s * s * s1 + c * c * s2]]
    })
}

fn close(a: &Mat2, b: &Mat2, tol: f64) -> bool {
    (0..2).all(|i| (0..2).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
}

proptest! {
    #[test]
    fn cholesky_matches_closed_form(c in spd()) {
        let l = cholesky_decompose(&c).unwrap();
        let l1 = c[0][0].sqrt();
        let l2 = c[1][0] / l1;
        let l3 = (c[1][1] - l2 * l2).sqrt();
        prop_assert!(l.is_valid());
        prop_assert!((l.l1 - l1).abs() < 1e-12 && (l.l2 - l2).abs() < 1e-12 && (l.l3 - l3).abs() < 1e-12);
        prop_assert!(close(&l.covariance(), &c, 1e-10));
    }

    #[test]
    fn affine_reproduces_covariance(c in spd()) {
        let a = affine_from_covariance(&c).unwrap();
        let aat = [
            [a[0][0] * a[0][0] + a[0][1] * a[0][1], a[0][0] * a[1][0] + a[0][1] * a[1][1]],
            [a[1][0] * a[0][0] + a[1][1] * a[0][1], a[1][0] * a[1][0] + a[1][1] * a[1][1]],
        ];
        prop_assert!(close(&aat, &c, 1e-10));
        prop_assert!(a[0][0] > 0.0 || (a[0][0] == 0.0 && a[1][0] > 0.0));
    }

    #[test]
    fn quantize_picks_a_nearest_entry(
        entries in prop::collection::vec(-3.0f64..3.0, 3 * 6),
        queries in prop::collection::vec(-4.0f64..4.0, 3 * 10),
    ) {
        let book = Codebook::new(Tensor::new(vec![6, 3], entries)).unwrap();
        let e = Tensor::new(vec![10, 3], queries);
        let (q, idx) = quantize(&e, &book);
        let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        for ((row, &i), out) in e.rows().zip(&idx).zip(q.rows()) {
            let best = (0..6).map(|k| d2(row, book.entry(k))).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d2(row, book.entry(i)), best);
            prop_assert_eq!(out, book.entry(i));
        }
    }

    #[test]
    fn perplexity_is_bounded_by_vocab(indices in prop::collection::vec(0usize..16, 1..200)) {
        let p = perplexity(&indices, 16);
        let used = indices.iter().collect::<std::collections::BTreeSet<_>>().len() as f64;
        prop_assert!(p >= 1.0 - 1e-12 && p <= used + 1e-9);
    }

    #[test]
    fn code_text_roundtrips(indices in prop::collection::vec(0usize..512, 0..40)) {
        let c = CodeSequence::new(StreamKind::DeltaMu, indices, 512).unwrap();
        prop_assert_eq!(CodeSequence::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn motion_text_roundtrips(vals in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0, 0.01f64..9.0, -5.0f64..5.0, 0.01f64..9.0), 8)) {
        let frames: Vec<RegionMotionFrame> = vals
            .iter()
            .map(|&(x, y, a, b, d)| RegionMotionFrame::new([x, y], CholeskyFactor::new(a, b, d)))
            .collect();
        let seq = MotionSequence::new(2, 15.0, frames).unwrap();
        let back = motion_from_text(&motion_to_text(&seq)).unwrap();
        prop_assert_eq!(back.len(), 4);
        for (r, s) in back.to_rows().iter().flatten().zip(seq.to_rows().iter().flatten()) {
            prop_assert!((r - s).abs() <= 1e-9 * s.abs().max(1.0));
        }
    }

    #[test]
    fn fgd_is_nonnegative_and_zero_on_self(xs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..20), shift in -1.0f64..1.0) {
        let ys: Vec<Vec<f64>> = xs.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
        prop_assert!(fgd(&xs, &xs).unwrap().abs() < 1e-6);
        let d = fgd(&xs, &ys).unwrap();
        prop_assert!(d >= -1e-9);
        prop_assert!((d - 3.0 * shift * shift).abs() < 1e-6 * (1.0 + d));
    }

    #[test]
    fn beat_consistency_is_a_fraction(peaks in prop::collection::vec(0.0f64..10.0, 1..20), beats in prop::collection::vec(0.0f64..10.0, 1..20)) {
        let bc = beat_consistency_times(&peaks, &beats, 0.1).unwrap();
        prop_assert!((0.0..=1.0).contains(&bc));
        prop_assert!((beat_consistency_times(&peaks, &peaks, 0.1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layout_positions_invert(n in 1usize..40) {
        let lay = TokenLayout { n };
        for seg in 0..3 {
            for t in 0..n {
                prop_assert_eq!(lay.locate(lay.position(seg, t)), (seg, t));
            }
        }
        let m = attention_mask(n);
        for i in 0..lay.len() {
            for j in 0..lay.len() {
                prop_assert_eq!(m.at2(i, j) == 0.0, lay.locate(j).1 <= lay.locate(i).1);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-30.0f64..30.0, 4 * 7)) {
        let p = softmax_rows(&Tensor::new(vec![4, 7], logits));
        for row in p.rows() {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
