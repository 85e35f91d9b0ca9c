mod common;

use common::*;
use proptest::prelude::*;
use pyramid_rf::block::{backward, backward_branch, forward_branch, forward_train, HprfbConfig, HprfbWeights, RfType};
use pyramid_rf::cost::{count_params, Form};
use pyramid_rf::gradcheck::{check_block, BLOCK_TOL};
use pyramid_rf::reparam::{fold_bn, merge_bag, merge_pyramid, reparameterize, MergedBag};
use pyramid_rf::tensor::{batchnorm_inference, conv2d_forward, Dims4, Tensor4};
use rand::seq::SliceRandom;

fn probe(w: &HprfbWeights<f64>, seed: u64) -> Tensor4<f64> {
    let k = w.config().max_scale();
    uniform_tensor(Dims4::new(2, w.config().in_channels, k + 2, k + 3), &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn merged_form_reproduces_training_form(w in weights_strategy(), seed in any::<u64>()) {
        let x = probe(&w, seed);
        let m = reparameterize(&w).unwrap();
        let a = forward_train(&x, &w).unwrap();
        let b = pyramid_rf::forward_inference(&x, &m).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }

    #[test]
    fn branch_order_independence(w in weights_strategy(), seed in any::<u64>()) {
        let x = probe(&w, seed);
        let mut order: Vec<usize> = (0..w.branches().len()).collect();
        order.shuffle(&mut rng(seed));
        let mut acc: Option<Tensor4<f64>> = None;
        for &i in &order {
            let b = &w.branches()[i];
            let y = forward_branch(&x, b, w.branch_geometry(b)).unwrap();
            acc = Some(match acc { None => y, Some(a) => a.add(&y).unwrap() });
        }
        let reference = forward_train(&x, &w).unwrap();
        prop_assert!(rel_diff(acc.unwrap().data(), reference.data()) <= 1e-12);
    }

    #[test]
    fn gradients_are_independent_per_branch(w in weights_strategy(), seed in any::<u64>()) {
        let x = probe(&w, seed);
        let y = forward_train(&x, &w).unwrap();
        let delta = uniform_tensor(y.dims(), &mut rng(seed ^ 1));
        let joint = backward(&x, &w, &delta).unwrap();
        for (b, g) in w.branches().iter().zip(&joint.branches) {
            let alone = backward_branch(&x, b, w.branch_geometry(b), &delta).unwrap();
            prop_assert_eq!(&alone, g);
        }
    }

    #[test]
    fn fold_preserves_branch_output(w in weights_strategy(), seed in any::<u64>()) {
        let x = probe(&w, seed);
        for b in w.branches() {
            let g = w.branch_geometry(b);
            let reference = batchnorm_inference(&conv2d_forward(&x, &b.kernel, &b.bias, g).unwrap(), &b.bn).unwrap();
            let f = fold_bn(b).unwrap();
            let folded = conv2d_forward(&x, &f.kernel, &f.bias, g).unwrap();
            prop_assert!(rel_diff(folded.data(), reference.data()) <= 1e-12);
        }
    }

    #[test]
    fn merges_are_linear(w in weights_strategy(), a in -3.0f64..3.0) {
        let cfg = w.config().clone();
        let bags: Vec<MergedBag<f64>> = cfg.scales.iter().map(|&s| {
            let folded: Vec<_> = w.branches().iter().filter(|b| b.scale == s).map(|b| fold_bn(b).unwrap()).collect();
            merge_bag(&folded).unwrap()
        }).collect();
        let scaled_bags: Vec<MergedBag<f64>> = cfg.scales.iter().map(|&s| {
            let folded: Vec<_> = w.branches().iter().filter(|b| b.scale == s).map(|b| {
                let mut f = fold_bn(b).unwrap();
                f.kernel = f.kernel.map(|v| a * v);
                f.bias.iter_mut().for_each(|v| *v *= a);
                f
            }).collect();
            merge_bag(&folded).unwrap()
        }).collect();
        for (plain, scaled) in bags.iter().zip(&scaled_bags) {
            let expect = plain.kernel.map(|v| a * v);
            prop_assert!(rel_diff(scaled.kernel.data(), expect.data()) <= 1e-12);
        }
        let m = merge_pyramid(&bags, cfg.stride, cfg.groups).unwrap();
        let ms = merge_pyramid(&scaled_bags, cfg.stride, cfg.groups).unwrap();
        prop_assert!(rel_diff(ms.kernel.data(), m.kernel.map(|v| a * v).data()) <= 1e-12);
        let bias: Vec<f64> = m.bias.iter().map(|v| a * v).collect();
        prop_assert!(rel_diff(&ms.bias, &bias) <= 1e-12);
    }

    #[test]
    fn re_merging_a_merged_conv_is_exact(w in weights_strategy()) {
        let m = reparameterize(&w).unwrap();
        let bag = merge_bag(&[m.as_folded_branch()]).unwrap();
        let again = merge_pyramid(&[bag], m.stride, m.groups).unwrap();
        prop_assert_eq!(again, m);
    }

    #[test]
    fn inference_never_costs_more_parameters_with_square_branches(scales in scales_strategy(), mut types in types_strategy()) {
        if !types.contains(&RfType::Square) {
            types.push(RfType::Square);
        }
        let cfg = HprfbConfig::new(scales, types, 2, 2, 1, 1).unwrap();
        prop_assert!(count_params(&cfg, Form::Inference).unwrap() <= count_params(&cfg, Form::Train).unwrap());
    }
}

#[test]
fn block_backward_matches_finite_differences_with_groups() {
    for (c, groups) in [(2, 1), (2, 2), (4, 2)] {
        let cfg = HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), c, c, groups, 1).unwrap();
        let r = check_block(&cfg, 11).unwrap();
        assert!(r.passed(BLOCK_TOL), "c={c} groups={groups}\n{r}");
    }
}

#[test]
fn coordinate_only_bags_can_be_cheaper_than_their_merge() {
    let cfg = HprfbConfig::new(vec![3, 7], vec![RfType::VerticalCoord], 1, 1, 1, 1).unwrap();
    assert_eq!(count_params(&cfg, Form::Train).unwrap(), 3 + 7 + 2 * 5);
    assert_eq!(count_params(&cfg, Form::Inference).unwrap(), 50);
}
