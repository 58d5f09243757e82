use std::collections::BTreeMap;

use super::surprisal::series_from_table;
use super::*;
use crate::autoencoder::NtMode;
use crate::error::Error;
use crate::flow::{read_surprisal_csv, write_surprisal_csv, SurprisalSeries};
use crate::numerics::Tensor;
use crate::synthdata::Construction;

use proptest::prelude::*;

fn tiny_surprisal() -> ExperimentConfig {
    let text = "
        experiment.kind = surprisal
        surprisal.seq_len = 8
        surprisal.n_train = 16
        surprisal.n_eval = 6
        surprisal.context_dim = 8
        surprisal.hidden = 8
        surprisal.steps = 20
        surprisal.warmup = 2
        surprisal.batch = 4
        surprisal.t_grid = 0.1, 0.5
        surprisal.n_draws = 2
        surprisal.ode_steps = 4
    ";
    ExperimentConfig::parse(text).unwrap()
}

#[test]
fn empty_config_is_all_defaults() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.surprisal.t_grid.len(), 9);
    assert_eq!(cfg.recon.snr[0], f64::INFINITY);
}

#[test]
fn grammar() {
    let text = "# header comment\n\
                experiment.kind = recon_sweep   # trailing comment\n\
                \n\
                experiment.seed=42\n\
                recon.snr = inf, 2, 0.5\n\
                recon.nt_modes = NONE,ED\n\
                recon.hidden = 32\n\
                surprisal.trained = false\n\
                surprisal.aggregation = max\n\
                surprisal.constructions = unaligned\n";
    let cfg = ExperimentConfig::parse(text).unwrap();
    assert_eq!(cfg.kind, ExperimentKind::ReconSweep);
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.recon.snr, vec![f64::INFINITY, 2.0, 0.5]);
    assert_eq!(cfg.recon.nt_modes, vec![NtMode::None, NtMode::Ed]);
    assert_eq!(cfg.recon.hidden, vec![32]);
    assert!(!cfg.surprisal.trained);
    assert_eq!(cfg.surprisal.aggregation, Aggregation::Max);
    assert_eq!(cfg.surprisal.constructions, vec![Construction::Unaligned]);
}

#[test]
fn bad_configs_are_rejected_with_line_numbers() {
    let cases = [
        ("recon.bogus = 1", "line 1"),
        ("experiment.seed = 1\nexperiment.seed = 2", "duplicate"),
        ("experiment.seed", "line 1"),
        ("seed = 3", "malformed key"),
        ("Experiment.seed = 3", "malformed key"),
        ("a.b.c = 3", "malformed key"),
        ("surprisal.bogus = 3", "unknown key"),
        ("surprisal.trained = yes", "true or false"),
        ("surprisal.lr = nan", "NaN"),
        ("experiment.seed = -1", "cannot parse"),
        ("surprisal.t_grid = 0.5, 1.0", "t grid"),
        ("encoding.coupled = 9", "missing channel"),
        ("encoding.inner_folds = 1", "inner_folds"),
        ("experiment.kind = everything", "unknown experiment kind"),
    ];
    for (text, want) in cases {
        match ExperimentConfig::parse(text) {
            Err(Error::Config(msg)) => assert!(msg.contains(want), "{text:?}: {msg}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn hash_tracks_content_not_layout() {
    let a = ExperimentConfig::parse("experiment.seed = 3\nrecon.lr = 0.001").unwrap();
    let b = ExperimentConfig::parse("# x\nrecon.lr=1e-3\n\n   experiment.seed   =   3").unwrap();
    let c = ExperimentConfig::parse("experiment.seed = 4\nrecon.lr = 0.001").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 16);
}

proptest! {
    #[test]
    fn canonical_text_roundtrips(
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        grid in prop::collection::vec(0.0f64..0.999, 1..6),
        snr in prop::collection::vec(prop_oneof![Just(f64::INFINITY), 0.01f64..100.0], 1..5),
        trained in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.surprisal.lr = lr;
        cfg.surprisal.t_grid = grid;
        cfg.surprisal.trained = trained;
        cfg.recon.snr = snr;
        let back = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

fn sample_checkpoint() -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), "test".to_string());
    Checkpoint::new(
        meta,
        vec![
            ("w".to_string(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.1, 1e-8, -7.0]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![0.5, -0.5])),
        ],
    )
}

#[test]
fn checkpoint_roundtrip_and_layout() {
    let ck = sample_checkpoint();
    assert_eq!(ck.arrays[0].0, "b");
    let bytes = ck.encode().unwrap();
    assert_eq!(&bytes[..4], b"PALD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.metadata, ck.metadata);
    for ((n1, t1), (n2, t2)) in ck.arrays.iter().zip(&back.arrays) {
        assert_eq!(n1, n2);
        assert_eq!(t1.round_f32(), *t2);
    }
    assert_eq!(back.encode().unwrap(), bytes);
}

#[test]
fn checkpoint_rejections() {
    let bytes = sample_checkpoint().encode().unwrap();
    let expect = |b: &[u8], want: &str| match Checkpoint::decode(b) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains(want), "{msg}"),
        other => panic!("expected rejection containing {want:?}, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    expect(&bad, "magic");
    let mut bad = bytes.clone();
    bad[4] = 2;
    expect(&bad, "version");
    for cut in 0..bytes.len() {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
    let mut bad = bytes.clone();
    bad.push(0);
    expect(&bad, "trailing");
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x40;
    expect(&bad, "hash");
}

#[test]
fn checkpoint_dimension_overflow() {
    let ck = Checkpoint::new(BTreeMap::new(), vec![("a".to_string(), Tensor::vector(vec![1.0]))]);
    let mut bytes = ck.encode().unwrap();
    // The single dimension sits 4 bytes before the value.
    let dim_at = bytes.len() - 8;
    bytes[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    match Checkpoint::decode(&bytes) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("exceed"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn atomic_write_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let mut m = Manifest::new("ic", &cfg);
    m.emit(dir.path(), "a.csv", b"x,y\n").unwrap();
    m.write(dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), b"x,y\n");
    let text = std::fs::read_to_string(dir.path().join("manifest-ic.txt")).unwrap();
    assert!(text.contains(&cfg.hash()));
    assert!(text.contains("output = a.csv sha256:"));
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "temporary files left behind: {names:?}");
}

#[test]
fn note_aggregation() {
    let frames = [1.0, 3.0, 2.0, 2.0, 5.0, -1.0];
    assert_eq!(note_ic(&frames, 2, Aggregation::Mean).unwrap(), vec![2.0, 2.0, 2.0]);
    assert_eq!(note_ic(&frames, 2, Aggregation::Max).unwrap(), vec![3.0, 2.0, 5.0]);
    assert_eq!(note_ic(&frames, 1, Aggregation::Mean).unwrap(), frames.to_vec());
    assert!(note_ic(&frames, 4, Aggregation::Mean).is_err());
}

#[test]
fn correlation_of_oracle_copy_is_one() {
    let cfg = ExperimentConfig::parse("surprisal.t_grid = 0.1, 0.2").unwrap();
    let oracle: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64).collect();
    let mut series = Vec::new();
    for t in [0.1, 0.2] {
        for seq in 0..3 {
            let mut ic = oracle[seq * 4..seq * 4 + 4].to_vec();
            if t == 0.2 {
                ic.iter_mut().for_each(|v| *v = -*v);
            }
            series.push(SurprisalSeries::new("aligned", seq, t, 1, 8, ic).unwrap());
        }
    }
    let mut map = BTreeMap::new();
    map.insert("aligned".to_string(), oracle);
    let rows = correlate(&cfg, &series, &map).unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].rho - 1.0).abs() < 1e-12);
    assert!((rows[1].rho + 1.0).abs() < 1e-12);
    assert!(rows[0].significant);
    let peaks = summarize_correlations(&rows);
    assert_eq!(peaks[0].peak_t, 0.1);
    assert!(!peaks[0].interior);

    let mut buf = Vec::new();
    write_correlation_csv(&mut buf, &cfg, &rows).unwrap();
    assert_eq!(read_correlation_csv(&buf[..]).unwrap(), rows);
}

#[test]
fn interior_peak_detection() {
    let row = |t: f64, rho: f64| CorrelationRow {
        construction: "aligned".into(),
        t,
        rho,
        p_value: 0.01,
        significant: true,
    };
    let rows = vec![row(0.3, 0.4), row(0.1, 0.2), row(0.2, 0.6)];
    let p = &summarize_correlations(&rows)[0];
    assert_eq!(p.peak_t, 0.2);
    assert!(p.interior);
}

#[test]
fn surprisal_run_is_deterministic_and_survives_checkpoints() {
    let cfg = tiny_surprisal();
    let a = run_surprisal(&cfg).unwrap();
    let b = run_surprisal(&cfg).unwrap();
    let csv = |o: &SurprisalOutcome| {
        let mut buf = Vec::new();
        write_surprisal_csv(&mut buf, &cfg.hash(), cfg.seed, &o.series).unwrap();
        write_correlation_csv(&mut buf, &cfg, &o.correlations).unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(a.correlations.len(), 4);

    let data = melody_data(&cfg, Construction::Aligned).unwrap();
    let (model, losses) = train_flow(&cfg, &data).unwrap();
    assert_eq!(losses.len(), 20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.pald");
    save_checkpoint(&path, &flow_checkpoint(&cfg, Construction::Aligned, &model)).unwrap();
    let loaded = load_flow(&cfg, &load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(loaded.store, model.store);
    let ic1 = surprisal_ic(&cfg, &model, &data).unwrap();
    let ic2 = surprisal_ic(&cfg, &loaded, &data).unwrap();
    assert_eq!(ic1, ic2);
    assert!(load_autoencoder(&cfg, &load_checkpoint(&path).unwrap()).is_err());

    // Through the CSV and back.
    let mut buf = Vec::new();
    write_surprisal_csv(&mut buf, &cfg.hash(), cfg.seed, &ic1).unwrap();
    let table = read_surprisal_csv(&buf[..]).unwrap();
    let back = series_from_table(&table, cfg.surprisal.latent_dim).unwrap();
    assert_eq!(back.len(), ic1.len());
    for s in &ic1 {
        let other = back.iter().find(|x| x.seq_id == s.seq_id && x.t_level == s.t_level).unwrap();
        assert_eq!(other.ic, s.ic);
    }
}

#[test]
fn recon_run_is_deterministic_and_survives_checkpoints() {
    let text = "
        experiment.kind = recon_sweep
        recon.n_train = 64
        recon.n_eval = 32
        recon.pretrain_steps = 5
        recon.finetune_steps = 5
        recon.batch = 16
        recon.draws = 2
        recon.hidden = 16
    ";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let data = recon_data(&cfg).unwrap();
    let models = train_autoencoders(&cfg, &data).unwrap();
    assert_eq!(models.len(), 3);
    let sweeps = sweep_models(&cfg, &data, &models).unwrap();
    let again = run_recon_sweep(&cfg).unwrap();
    let csv = |s: &[ModeSweep]| {
        let mut buf = Vec::new();
        write_recon_csv(&mut buf, &cfg, &data.spec.weights, s).unwrap();
        String::from_utf8(buf).unwrap()
    };
    let text = csv(&sweeps);
    assert_eq!(text, csv(&again));
    // Header plus 3 modes × 4 SNRs × 8 groups.
    assert_eq!(text.lines().count(), 1 + 3 * 4 * 8);

    let ck = autoencoder_checkpoint(&cfg, &models[1]);
    let back = load_autoencoder(&cfg, &Checkpoint::decode(&ck.encode().unwrap()).unwrap()).unwrap();
    assert_eq!(back, models[1]);
    assert!(load_flow(&cfg, &ck).is_err());

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("recon.csv"), text).unwrap();
    let rep = report(dir.path()).unwrap();
    assert!(rep.contains("reconstruction"));
    assert!(report(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn encoding_run_on_tiny_melodies() {
    let mut cfg = tiny_surprisal();
    cfg.surprisal.constructions = vec![Construction::Aligned];
    cfg.surprisal.t_grid = vec![0.3];
    cfg.encoding.participants = 3;
    cfg.encoding.lambdas = vec![1.0, 100.0];
    let out = run_surprisal(&cfg).unwrap();
    let data = melody_data(&cfg, Construction::Aligned).unwrap();
    let enc = run_encoding(&cfg, &data, &out.series).unwrap();
    assert_eq!(enc.cells.len(), 2);
    assert_eq!(enc.cells[0].label, "oracle");
    assert_eq!(enc.cells[1].label, "aligned");
    assert_eq!(enc.cells[1].result.participants.len(), 3);
    let mut buf = Vec::new();
    write_encoding_summary_csv(&mut buf, &cfg, &enc).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);

    let short: Vec<SurprisalSeries> = out.series[..2].to_vec();
    assert!(run_encoding(&cfg, &data, &short).is_err());
}
