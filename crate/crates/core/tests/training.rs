use std::path::Path;

use bevtrack::config::{generate_dataset, RunConfig};
use bevtrack::data::{load_manifest, load_sequence, Sequence};
use bevtrack::loss::{fixed_prior_nll_on_tape, LossConfig, Prior};
use bevtrack::train::Trainer;

fn smoke() -> (RunConfig, Vec<Sequence>, tempfile::TempDir) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = RunConfig::load(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg.gen, dir.path(), false).unwrap();
    let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let seqs = m.train.iter().map(|p| load_sequence(p).unwrap()).collect();
    (cfg, seqs, dir)
}

#[test]
fn smoke_loss_moving_average_decreases() {
    let (cfg, seqs, _dir) = smoke();
    let trainer = Trainer::new(&cfg.model, cfg.train.clone(), cfg.loss, cfg.augment, &seqs, cfg.hash()).unwrap();
    let mut state = trainer.init_state().unwrap();
    let losses: Vec<f64> = trainer.fit(&mut state, None, |_| {}).unwrap().iter().map(|m| m.train_loss).collect();
    assert_eq!(losses.len(), 10);
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "moving average {avg:?} from losses {losses:?}");
    }
}

#[test]
fn unit_sigma_gaussian_matches_the_plain_nll_run() {
    let (mut cfg, seqs, _dir) = smoke();
    cfg.train.epochs = 2;
    cfg.train.pairs_per_sequence = 3;
    let loss = LossConfig {
        prior: Prior::Gaussian,
        rle: false,
        learn_sigma: false,
    };
    let configured = Trainer::new(&cfg.model, cfg.train.clone(), loss, cfg.augment, &seqs, "a").unwrap();
    let direct = Trainer::with_loss(
        &cfg.model,
        cfg.train.clone(),
        Box::new(|tape, _, _, out, target| fixed_prior_nll_on_tape(tape, out.mean, None, target, Prior::Gaussian)),
        cfg.augment,
        &seqs,
        "a",
    )
    .unwrap();
    let (mut a, mut b) = (configured.init_state().unwrap(), direct.init_state().unwrap());
    let ma = configured.fit(&mut a, None, |_| {}).unwrap();
    let mb = direct.fit(&mut b, None, |_| {}).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!(x.terms, y.terms);
        assert_eq!(x.terms.flow_nll, 0.0);
    }
}
