use fedreid_core::fedloop::{prepare_federation, run_federation, run_pipeline, Anchoring};
use fedreid_core::synthdata::{generate_federation, FederationDataset};
use fedreid_core::ExperimentConfig;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.identities_per_source = 6;
    cfg.data.target_identities = 6;
    cfg.data.cameras_per_domain = 3;
    cfg.data.samples_per_identity_per_camera = 4;
    cfg.csa.epochs = 5;
    cfg.fed.rounds = 3;
    cfg
}

fn data(cfg: &ExperimentConfig, seed: u64) -> FederationDataset {
    generate_federation(&cfg.data, cfg.protocol, seed).unwrap()
}

#[test]
fn zero_rounds_keeps_initial_encoder() {
    let mut cfg = small();
    cfg.fed.rounds = 0;
    let ds = data(&cfg, 1);
    let (prepared, out) = run_pipeline(&ds, &cfg, 1).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.encoder, prepared.initial_encoder);
    assert_eq!(out.final_metrics.len(), ds.evaluations.len());
}

#[test]
fn same_seed_same_run() {
    let cfg = small();
    let ds = data(&cfg, 3);
    let (_, a) = run_pipeline(&ds, &cfg, 3).unwrap();
    let (_, b) = run_pipeline(&ds, &cfg, 3).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.reports, b.reports);
    let (_, c) = run_pipeline(&ds, &cfg, 4).unwrap();
    assert_ne!(a.encoder, c.encoder);
}

#[test]
fn every_client_starts_from_the_broadcast() {
    let cfg = small();
    let ds = data(&cfg, 5);
    let (prepared, out) = run_pipeline(&ds, &cfg, 5).unwrap();
    assert_eq!(out.reports.len(), cfg.fed.rounds);
    assert_eq!(out.reports[0].clients[0].start_fingerprint, prepared.initial_encoder.fingerprint());
    for r in &out.reports {
        let first = r.clients[0].start_fingerprint;
        assert!(r.clients.iter().all(|c| c.start_fingerprint == first));
    }
    let fps: Vec<u64> = out.reports.iter().map(|r| r.clients[0].start_fingerprint).collect();
    assert!(fps.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn static_anchors_never_move() {
    let cfg = small();
    let ds = data(&cfg, 7);
    let (_, out) = run_pipeline(&ds, &cfg, 7).unwrap();
    assert!(out.initial_prototypes.iter().all(Option::is_some));
    assert_eq!(out.initial_prototypes, out.final_prototypes);
}

#[test]
fn dynamic_anchors_move() {
    let mut cfg = small();
    cfg.fed.anchoring = Anchoring::Dynamic;
    cfg.fed.dynamic_token_epochs = 2;
    let ds = data(&cfg, 7);
    let (_, out) = run_pipeline(&ds, &cfg, 7).unwrap();
    assert_ne!(out.initial_prototypes, out.final_prototypes);
}

#[test]
fn no_anchors_without_csa() {
    let mut cfg = small();
    cfg.csa.enabled = false;
    let ds = data(&cfg, 8);
    let (prepared, out) = run_pipeline(&ds, &cfg, 8).unwrap();
    assert!(prepared.clients.iter().all(|c| c.csa.is_none()));
    assert!(out.final_prototypes.iter().all(Option::is_none));
    assert!(out.reports.iter().flat_map(|r| &r.clients).all(|c| c.original.align == 0.0));
}

#[test]
fn bank_built_once_unless_refreshed() {
    let cfg = small();
    let ds = data(&cfg, 9);
    let (prepared, out) = run_pipeline(&ds, &cfg, 9).unwrap();
    assert_eq!(out.bank_builds, 1);
    assert_eq!(out.bank, prepared.bank);
    assert_eq!(out.bank.len(), cfg.data.num_sources * cfg.data.cameras_per_domain);

    let mut refresh = cfg.clone();
    refresh.gsd.refresh_each_round = true;
    let (_, again) = run_pipeline(&ds, &refresh, 9).unwrap();
    assert_eq!(again.bank_builds, cfg.fed.rounds);
    assert_eq!(again.bank, out.bank);
    assert_eq!(again.encoder, out.encoder);
}

#[test]
fn round_is_weighted_mean_of_standalone_clients() {
    let mut cfg = small();
    cfg.csa.enabled = false;
    cfg.gsd.enabled = false;
    cfg.fed.rounds = 1;
    cfg.data.samples_per_identity_per_camera = 3;
    let mut ds = data(&cfg, 11);
    // Uneven client sizes so the weights matter.
    let keep = ds.clients[0].samples.len() - 3 * 3;
    ds.clients[0].samples.truncate(keep);
    let prepared = prepare_federation(&ds, &cfg, 11).unwrap();
    let joint = run_federation(&ds, &prepared, &cfg, 11).unwrap();

    let total = ds.num_source_samples() as f64;
    let mut expected = vec![0.0; joint.encoder.values().len()];
    for k in 0..ds.clients.len() {
        let mut solo_ds = ds.clone();
        solo_ds.clients = vec![ds.clients[k].clone()];
        let mut solo = prepared.clone();
        solo.clients = vec![prepared.clients[k].clone()];
        let out = run_federation(&solo_ds, &solo, &cfg, 11).unwrap();
        let w = ds.clients[k].samples.len() as f64 / total;
        for (e, v) in expected.iter_mut().zip(out.encoder.values()) {
            *e += w * v;
        }
        assert_eq!(out.heads[0], joint.heads[k]);
    }
    for (a, b) in joint.encoder.values().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}
