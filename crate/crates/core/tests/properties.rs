use proptest::prelude::*;

use maskforge::autodiff::{grad_check, Tape, Tensor};
use maskforge::data::{batch_order, read_mskd, write_mskd, Dataset, ImageShape};
use maskforge::mask::{discretize_logits, gumbel_from_uniform, InitPattern, MaskCosts, MaskGeometry, MaskKind, SelectionMask};
use maskforge::pipeline::{extend, merge_sum, merge_sum_values, quality_transform};
use maskforge::schedule::{adapt_lambda_tau, init_lambda_tau, ScheduleParams};

fn mask_kind() -> impl Strategy<Value = (MaskKind, MaskGeometry)> {
    (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(k, w, h)| {
        let g = MaskGeometry::new(k, w, h);
        prop_oneof![
            Just((MaskKind::ChannelAny, g)),
            Just((MaskKind::ChannelXor { groups: 1 }, g)),
            Just((MaskKind::PixelAny, g)),
            Just((MaskKind::PixelXor, g)),
            (1..=w, 1..=h).prop_map(move |(gw, gh)| (MaskKind::BlockAny { grid_w: gw, grid_h: gh }, g)),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hard_masks_are_one_hot_and_soft_masks_sum_to_one(
        logits in prop::collection::vec(-5.0f64..5.0, 12),
        us in prop::collection::vec(0.0f64..1.0, 12),
        group in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12]),
        tau in 0.05f64..20.0,
    ) {
        let noise: Vec<f64> = us.iter().map(|&u| gumbel_from_uniform(u)).collect();
        let (hard, soft) = discretize_logits(&logits, &noise, group, tau);
        for (h, s) in hard.chunks(group).zip(soft.chunks(group)) {
            prop_assert_eq!(h.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert!(h.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn final_masks_are_stable_and_costs_bounded((kind, g) in mask_kind(), seed in any::<u64>(), sigma in 0.0f64..3.0) {
        let m = SelectionMask::init(kind, g, &InitPattern::Index(0), sigma, seed).unwrap();
        let a = m.final_discretize();
        prop_assert_eq!(&a, &m.final_discretize());
        prop_assert_eq!(a.expand().len(), g.channels * g.width * g.height);
        let q = m.costs().total(&a.keep);
        prop_assert!((0.0..=m.costs().max_total()).contains(&q));
        if kind.is_xor() {
            // one selection per group
            let groups = m.selectable_len() / m.group_width();
            prop_assert_eq!(a.selected(), groups);
        }
    }

    #[test]
    fn uniform_costs_count_selected(keep in prop::collection::vec(any::<bool>(), 1..200)) {
        let c = MaskCosts::uniform(keep.len());
        let n = keep.iter().filter(|&&k| k).count();
        prop_assert_eq!(c.total(&keep), n as f64 / keep.len() as f64);
    }

    #[test]
    fn batch_order_is_a_partition(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
        prop_assume!(bs <= n);
        let order = batch_order(n, bs, seed).unwrap();
        prop_assert_eq!(order.len(), n.div_ceil(bs));
        let mut all: Vec<usize> = order.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(order, batch_order(n, bs, seed).unwrap());
    }

    #[test]
    fn quality_transform_stays_in_range(
        px in prop::collection::vec(0u8..=255, 9 * 11),
        q in 1u32..=100,
    ) {
        let img: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        let out = quality_transform(&img, 9, 11, q).unwrap();
        prop_assert_eq!(out.len(), img.len());
        prop_assert!(out.iter().all(|v| (0.0..=255.0).contains(v) && v.fract() == 0.0));
    }

    #[test]
    fn extend_then_merge_group_one_quality_is_identity_up_to_quality(
        px in prop::collection::vec(0u8..=255, 2 * 8 * 8),
    ) {
        let x = Tensor::new(&[1, 2, 8, 8], px.iter().map(|&v| v as f64 / 255.0).collect()).unwrap();
        let e = extend(&x, &[100, 50]).unwrap();
        prop_assert_eq!(e.shape(), &[1, 4, 8, 8]);
        // channel 2 is source channel 1 at q = 100
        let src: Vec<f64> = x.values()[64..].iter().map(|v| v * 255.0).collect();
        let direct = quality_transform(&src, 8, 8, 100).unwrap();
        for (a, b) in e.values()[128..192].iter().zip(&direct) {
            prop_assert!((a * 255.0 - b).abs() <= 1e-9);
        }
        let m = merge_sum_values(&e, 2).unwrap();
        prop_assert_eq!(m.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn mskd_round_trip(
        n in 1usize..5,
        px in prop::collection::vec(0.0f32..1.0, 5 * 4 * 3 * 2),
        v in prop::sample::select(vec![None, Some(1usize), Some(2)]),
    ) {
        let s = ImageShape::new(4, 3, 2);
        let images = px[..n * s.len()].to_vec();
        let labels = (0..n).map(|i| i % 3).collect();
        let ds = Dataset::new("p", s, images, labels, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mskd");
        write_mskd(&ds, v, &path).unwrap();
        let back = read_mskd(&path).unwrap();
        prop_assert_eq!(back.versions, v);
        prop_assert_eq!(back.dataset.images(), ds.images());
        prop_assert_eq!(back.dataset.labels(), ds.labels());
    }

    #[test]
    fn constant_losses_step_lambda_every_patience_epochs(
        patience in 1usize..8,
        loss in -100.0f64..100.0,
        fac in 1.01f64..3.0,
    ) {
        let p = ScheduleParams { lambda_init: 0.5, lambda_fac: fac, patience, ..Default::default() };
        let (mut ls, mut ts) = init_lambda_tau(&p).unwrap();
        let mut steps = 0;
        for epoch in 1..=4 * patience {
            let stepped = adapt_lambda_tau(&mut ls, &mut ts, loss).unwrap();
            prop_assert_eq!(stepped, epoch % patience == 0);
            steps += stepped as i32;
            prop_assert!(ts.tau() >= p.tau_min && ts.tau() <= p.tau_init);
        }
        prop_assert_eq!(steps, 4);
    }
}

#[test]
fn merge_sum_gradient_matches_finite_differences() {
    let values: Vec<f64> = (0..2 * 6 * 3 * 2).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    let x = Tensor::new(&[2, 6, 3, 2], values).unwrap();
    let weights = Tensor::new(&[2, 2, 3, 2], (0..24).map(|i| (i as f64 - 11.5) / 7.0).collect()).unwrap();
    let err = grad_check(
        |t: &mut Tape, xv| {
            let m = merge_sum(t, xv, 3)?;
            let w = t.constant(weights.clone());
            let y = t.mul(m, w)?;
            let y = t.mul(y, m)?;
            t.reduce_sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn straight_through_forward_is_hard_and_backward_is_soft() {
    let g = MaskGeometry::new(4, 1, 1);
    let m = SelectionMask::init(MaskKind::ChannelAny, g, &InitPattern::All, 0.5, 3).unwrap();
    let noise = vec![0.0; 8];
    let tau = 0.7;
    let mut tape = Tape::new();
    let fwd = m.forward(&mut tape, tau, &noise).unwrap();
    let keep = tape.values(fwd.keep).to_vec();
    assert!(keep.iter().all(|&k| k == 0.0 || k == 1.0));
    let q = m.loss(&mut tape, &fwd).unwrap();
    tape.backward(q).unwrap();
    let grad = tape.grad(fwd.logits).to_vec();

    // d/dl of softmax(l/τ)[0] / 4 for each pair
    let l = m.logits().values();
    for i in 0..4 {
        let (a, b) = (l[2 * i] / tau, l[2 * i + 1] / tau);
        let s0 = 1.0 / (1.0 + (b - a).exp());
        let d = s0 * (1.0 - s0) / tau / 4.0;
        assert!((grad[2 * i] - d).abs() <= 1e-12, "{i}: {} vs {d}", grad[2 * i]);
        assert!((grad[2 * i + 1] + d).abs() <= 1e-12);
    }
}
