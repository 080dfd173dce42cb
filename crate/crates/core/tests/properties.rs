use ndarray::Array2;
use proptest::prelude::*;

use ephys_core::data::{split_stratified, EpochedDataset};
use ephys_core::decoders::{complement, stratified_folds, Classifier, ProjectedLda, Shrinkage};
use ephys_core::hmm::{path_log_prob, state_statistics, viterbi_path};
use ephys_core::pfi::{run_pfi, FeatureWindow};
use ephys_core::quant::{bin_center, Quantizer};
use ephys_core::repro::four_class_set;
use ephys_core::sim::{simulate, SimSpec, FREQS_4};

fn normalized(row: &[f64]) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn folds_partition_and_stay_balanced(labels in proptest::collection::vec(0usize..3, 12..60), folds in 2usize..6, seed in any::<u64>()) {
        let f = stratified_folds(&labels, folds, seed).unwrap();
        let mut all: Vec<usize> = f.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in 0..3 {
            let counts: Vec<usize> = f.iter().map(|fold| fold.iter().filter(|&&i| labels[i] == class).count()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "class {} spread {:?}", class, counts);
        }
        let train = complement(&f[0], labels.len());
        prop_assert_eq!(train.len() + f[0].len(), labels.len());
        prop_assert!(train.iter().all(|i| !f[0].contains(i)));
    }

    #[test]
    fn viterbi_beats_any_other_path(
        k in 2usize..4,
        t in 2usize..40,
        raw in proptest::collection::vec(0.05f64..1.0, 16 + 160),
        others in proptest::collection::vec(proptest::collection::vec(0usize..4, 40), 8),
    ) {
        let pi = normalized(&raw[..k]);
        let a: Vec<Vec<f64>> = (0..k).map(|i| normalized(&raw[4 + 4 * i..4 + 4 * i + k])).collect();
        let log_b = Array2::from_shape_fn((t, k), |(tt, j)| raw[16 + (tt * k + j) % 160].ln() * 3.0);
        let best = viterbi_path(&pi, &a, &log_b);
        let lp = path_log_prob(&pi, &a, &log_b, &best);
        for other in &others {
            let path: Vec<usize> = other[..t].iter().map(|s| s % k).collect();
            prop_assert!(path_log_prob(&pi, &a, &log_b, &path) <= lp + 1e-9);
        }
    }

    #[test]
    fn occupancies_sum_to_one(states in proptest::collection::vec(0usize..5, 1..200)) {
        let s = state_statistics(&states, 5, 100.0).unwrap();
        prop_assert!((s.fractional_occupancy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(s.visits.iter().sum::<usize>(), 1 + states.windows(2).filter(|w| w[0] != w[1]).count());
    }
}

#[test]
fn simulated_series_quantizes_within_half_a_bin() {
    let (x, _) = simulate(&SimSpec::reference(&FREQS_4, 20.0, 1), 2).unwrap();
    for q in [16, 256] {
        let quant = Quantizer::fit(&x, q, 255.0, 4.0).unwrap();
        let tokens = quant.encode(&x).unwrap();
        let half = 1.0 / q as f64;
        for (t, &v) in x.data().row(0).iter().enumerate() {
            let y = quant.compand(0, v);
            let err = (y - bin_center(tokens.tokens[[0, t]], q)).abs();
            assert!(err <= half + 1e-12, "q {q} sample {t}: {err}");
        }
    }
}

#[test]
fn whole_trial_shuffles_agree_across_kinds() {
    let full = four_class_set(400, 3.0, 11).unwrap();
    let trials = full.data.trials().slice(ndarray::s![.., .., full.window.clone()]).to_owned();
    let set = EpochedDataset::new(trials, full.data.labels().to_vec(), full.data.fs(), 4).unwrap();
    let (train, test) = split_stratified(&set, (1, 1), 12).unwrap();
    // Keep the injected channels only.
    let proj = Array2::from_shape_fn((4, 16), |(r, c)| if r == c { 1.0 } else { 0.0 });
    let model = ProjectedLda::fit(&train, proj, None, Shrinkage::Auto).unwrap();
    let fs = test.fs();
    let t = test.timesteps();
    let before = test.trials().clone();
    let temporal = run_pfi(&model, test.trials().view(), test.labels(), fs, &FeatureWindow::temporal(t, t), 20, 5).unwrap();
    let spectral = run_pfi(&model, test.trials().view(), test.labels(), fs, &FeatureWindow::spectral(fs / 2.0 + fs / t as f64), 20, 5).unwrap();
    assert_eq!(test.trials(), &before);
    assert_eq!((temporal.delta.len(), spectral.delta.len()), (1, 1));
    assert!(model.accuracy(test.trials().view(), test.labels()).unwrap() > 0.5);
    assert!((temporal.delta[0] - spectral.delta[0]).abs() <= 0.02, "{} vs {}", temporal.delta[0], spectral.delta[0]);
}
