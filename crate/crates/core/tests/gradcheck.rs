mod support;

use cwtmel::nets::{Mat, Model, ParamStore};
use cwtmel::train::{step_losses, Corpus, TrainConfig, Utterance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::gradcheck::*;

fn assert_case(report: FdReport) {
    assert!(report.checked > 0, "{report:?}");
    assert!(report.checked >= 100.min(report.checked + report.kinks), "{report:?}");
    assert!(report.checked > report.kinks, "{report:?}");
    assert!(report.max_rel <= TOL, "{report:?}");
}

#[test]
fn conv1d_layer() {
    assert_case(conv1d_case());
}

#[test]
fn linear_layer() {
    assert_case(linear_case());
}

#[test]
fn channel_norm_layer() {
    assert_case(channel_norm_case());
}

#[test]
fn tanh_layer() {
    assert_case(tanh_case());
}

#[test]
fn relu_layer() {
    assert_case(relu_case());
}

#[test]
fn shared_trunk_end_to_end() {
    assert_case(shared_trunk_case());
}

#[test]
fn postnet_end_to_end() {
    assert_case(postnet_case());
}

#[test]
fn cwtnet_end_to_end() {
    assert_case(cwtnet_case());
}

/// Total training loss against the shared trunk's weights: both branches'
/// gradients must be summed correctly where they meet.
#[test]
fn training_loss_wrt_trunk() {
    let model = Model::new(80, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let utterances = (0..2)
        .map(|i| Utterance {
            id: format!("u{i}"),
            mel: random_tensor(vec![80, 6], -2.0, 2.0, &mut rng),
            target: random_tensor(vec![4, 6], -1.0, 1.0, &mut rng),
            scalogram: random_tensor(vec![10, 6], 0.0, 1.0, &mut rng),
        })
        .collect();
    let corpus = Corpus { utterances };
    // noiseless, so the kink detector below sees the exact step inputs
    let cfg = TrainConfig {
        noise_sigma: 0.0,
        zero_init_residual: false,
        ..TrainConfig::default()
    };
    let mut store = model.init_params(22);
    step_losses(&model, &mut store, &corpus, &cfg, 0, true).unwrap();
    let name = "trunk.conv.weight";
    let analytic = store.grad(name).unwrap().to_vec();
    let relu = |s: &ParamStore| {
        let mut acc = Vec::new();
        for u in &corpus.utterances {
            let x = Mat::from_tensor(&u.mel).unwrap();
            let (t, _) = model.trunk.forward(s, &x).unwrap();
            acc.extend(stack_relu_inputs(&model.cwtnet.stack, s, &t));
        }
        acc
    };
    let base = relu(&store);
    let mut report = FdReport::default();
    for c in (0..analytic.len()).step_by(97) {
        let fd = fd_param(&mut store, name, c, &mut |s| {
            let mut s = s.clone();
            let loss = step_losses(&model, &mut s, &corpus, &cfg, 0, false)
                .unwrap()
                .loss_total;
            let flip = relu(&s).iter().zip(&base).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
            (loss, flip)
        });
        report.record(analytic[c], &fd);
    }
    let (checked, worst) = (report.checked, report.max_rel);
    assert!(checked > 150, "{checked}");
    assert!(worst <= TOL, "worst {worst}");
}
