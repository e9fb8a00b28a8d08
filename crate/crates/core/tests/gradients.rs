use miaaudit_core::attack::{assemble_features, AttackHyper, AttackModel, FeatureConfig};
use miaaudit_core::cohort::{generate_cohort, CohortConfig, FeatureDims, Frame};
use miaaudit_core::nnet::{mse, Activation, DenseNet};
use miaaudit_core::target::{build_target, probe, TargetConfig, TargetModel};
use proptest::prelude::*;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let s = norm(a) + norm(n);
    if s == 0.0 {
        0.0
    } else {
        norm(&d) / s
    }
}

/// Finite differences are meaningless within `h` of a ReLU kink.
fn near_kink(net: &DenseNet, input: &[f64]) -> bool {
    let trace = net.forward(input).unwrap();
    net.layers()
        .iter()
        .zip(&trace.pre_activations)
        .any(|(l, z)| l.activation() == Activation::Relu && z.iter().any(|v| v.abs() < 1e-4))
}

fn target_near_kink(m: &TargetModel, f: &Frame) -> bool {
    let eyes: Vec<f64> = f.left_eye.iter().chain(&f.right_eye).copied().collect();
    let merged = [
        m.eyes.predict(&eyes).unwrap(),
        m.face.predict(&f.face).unwrap(),
        m.face_grid.predict(&f.face_grid).unwrap(),
    ]
    .concat();
    near_kink(&m.eyes, &eyes)
        || near_kink(&m.face, &f.face)
        || near_kink(&m.face_grid, &f.face_grid)
        || near_kink(&m.combiner, &merged)
}

fn small_target(seed: u64) -> (TargetModel, Frame) {
    let dims = FeatureDims {
        eye: 3,
        face: 4,
        face_grid: 2,
    };
    let config = TargetConfig {
        feature_dims: dims,
        eyes_widths: vec![6, 5, 3],
        face_widths: vec![4, 4, 3],
        grid_widths: vec![2, 3, 2],
        combiner_widths: vec![8, 6, 5, 4, 2],
    };
    let cohort = CohortConfig {
        n_participants: 2,
        multi_participants: 0,
        frames_min: 1,
        frames_max: 1,
        dims,
        ..CohortConfig::default()
    };
    let frame = generate_cohort(&cohort, seed).unwrap()[0].frames[0].clone();
    (build_target(&config, seed ^ 0x5eed).unwrap(), frame)
}

fn nets_mut(m: &mut TargetModel) -> [&mut miaaudit_core::nnet::DenseNet; 4] {
    [&mut m.eyes, &mut m.face, &mut m.face_grid, &mut m.combiner]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn target_composite_matches_finite_differences(seed in any::<u64>()) {
        let (mut model, frame) = small_target(seed);
        prop_assume!(!target_near_kink(&model, &frame));
        let (grads, _) = model.gradients(&frame).unwrap();
        let analytic: Vec<f64> = [&grads.eyes, &grads.face, &grads.face_grid, &grads.combiner]
            .iter()
            .flat_map(|g| g.flatten())
            .collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..4 {
            let base = nets_mut(&mut model)[k].params();
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] = base[i] + H;
                nets_mut(&mut model)[k].set_params(&p).unwrap();
                let up = model.frame_loss(&frame).unwrap();
                p[i] = base[i] - H;
                nets_mut(&mut model)[k].set_params(&p).unwrap();
                let down = model.frame_loss(&frame).unwrap();
                numeric.push((up - down) / (2.0 * H));
            }
            nets_mut(&mut model)[k].set_params(&base).unwrap();
        }
        prop_assert!(rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn probe_loss_is_recomputable_mse(seed in any::<u64>()) {
        let (model, frame) = small_target(seed);
        let trace = probe(&model, &frame).unwrap();
        prop_assert!((trace.loss - mse(&trace.final_output, &frame.gaze)).abs() <= 1e-12);
        let (grads, _) = model.gradients(&frame).unwrap();
        let last = grads.combiner.layers.last().unwrap();
        prop_assert_eq!(&trace.grads_last3[0], &last.weights);
    }

    #[test]
    fn joint_attack_gradients_match_finite_differences(seed in any::<u64>(), label in 0u8..2) {
        let (target, frame) = small_target(seed);
        let groups = assemble_features(&probe(&target, &frame).unwrap(), FeatureConfig::Plus3GradLossLabel).unwrap();
        let dims: Vec<usize> = groups.iter().map(|g| g.values.len()).collect();
        let hyper = AttackHyper {
            encoder_hidden: 8,
            classifier_hidden: vec![6, 5, 4],
            ..AttackHyper::default()
        };
        let mut model = AttackModel::init(FeatureConfig::Plus3GradLossLabel, &dims, &hyper, seed).unwrap();
        // Scales that bring every input coordinate to magnitude 1.5.
        model.scales = groups
            .iter()
            .map(|g| g.values.iter().map(|v| v.abs().max(1e-9) / 1.5).collect())
            .collect();
        let inputs: Vec<Vec<f64>> = groups
            .iter()
            .zip(&model.scales)
            .map(|(g, s)| g.values.iter().zip(s).map(|(v, s)| v / s).collect())
            .collect();
        let codes: Vec<f64> = model
            .encoders
            .iter()
            .zip(&inputs)
            .flat_map(|(e, x)| e.predict(x).unwrap())
            .collect();
        prop_assume!(!model.encoders.iter().zip(&inputs).any(|(e, x)| near_kink(e, x)));
        prop_assume!(!near_kink(&model.classifier, &codes));
        let analytic = model.loss_and_gradients(&groups, label, 1.3).unwrap().flatten();
        let base = model.params();
        // Every 7th coordinate keeps the check quick while touching every encoder.
        let coords: Vec<usize> = (0..base.len()).step_by(7).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let mut p = base.clone();
            p[i] = base[i] + H;
            model.set_params(&p).unwrap();
            let up = model.loss_and_gradients(&groups, label, 1.3).unwrap().loss;
            p[i] = base[i] - H;
            model.set_params(&p).unwrap();
            let down = model.loss_and_gradients(&groups, label, 1.3).unwrap().loss;
            numeric.push((up - down) / (2.0 * H));
        }
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        prop_assert!(rel_err(&picked, &numeric) <= 1e-4);
    }
}
