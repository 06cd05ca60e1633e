use std::path::Path;

use gpdssm::config::PipelineConfig;
use gpdssm::AppError;

fn parse(text: &str) -> Result<PipelineConfig, AppError> {
    PipelineConfig::parse(text, Path::new("test.conf"))
}

#[test]
fn defaults_round_trip_through_text() {
    let cfg = PipelineConfig::default();
    assert_eq!(parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(PipelineConfig::KEYS.len(), cfg.to_text().lines().count());
}

#[test]
fn values_and_comments() {
    let cfg = parse("# header\n\nlatent_dim = 6  # trailing\nbeta_scale=50\noptimize_sigma_v = false\nalign_reference = 2\n").unwrap();
    assert_eq!(cfg.latent_dim, 6);
    assert_eq!(cfg.beta_scale, 50.0);
    assert!(!cfg.optimize_sigma_v);
    assert_eq!(cfg.align_reference, 2);
    assert_eq!(cfg.model().latent_dim, 6);
    assert_eq!(cfg.fit().iters, cfg.fit_iters);
}

#[test]
fn unknown_key_is_rejected() {
    match parse("latent_dim = 3\nlatnet_dim = 4\n") {
        Err(AppError::Format { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("unknown key"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn out_of_range_values_are_rejected() {
    for bad in ["latent_dim = 0", "test_fraction = 1.0", "bootstrap = 50", "sigma_pos_scale = -1", "alpha = 0", "align_reference = -2", "fit_lr = nan"] {
        let e = parse(bad).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}");
    }
    assert!(parse("clf_variance = 20\nclf_max_variance = 10").is_err());
}

#[test]
fn malformed_lines_are_rejected() {
    assert!(matches!(parse("latent_dim 3"), Err(AppError::Format { line: 1, .. })));
    assert!(matches!(parse("seed = 1\nseed = 2"), Err(AppError::Format { line: 2, .. })));
    assert!(parse("latent_dim = three").is_err());
}
