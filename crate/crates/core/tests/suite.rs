use graphalign::encoder::EncoderDims;
use graphalign::graphdata::{load_directory, SplitKind, TaskKind};
use graphalign::pretrain::{split_contrastive_loss, PretrainedModel};
use graphalign::synthgen::{
    benchmark_suite_specs, generate_benchmark_suite, generate_suite, text_class_margin, SUITE_FEATURE_DIM,
    SUITE_TEXT_DIM,
};

const MASTER_SEED: u64 = 7;

fn dims() -> EncoderDims {
    EncoderDims {
        input_dim: SUITE_FEATURE_DIM,
        hidden_dim: 32,
        layers: 2,
    }
}

#[test]
fn suite_has_the_expected_domains() {
    let specs = benchmark_suite_specs(MASTER_SEED);
    let names: Vec<&str> = specs.iter().map(|s| s.domain.as_str()).collect();
    assert_eq!(names, ["easy", "mid", "hard", "edges", "graphs"]);
    let tasks: Vec<TaskKind> = specs.iter().map(|s| s.task).collect();
    assert_eq!(tasks[..3], [TaskKind::Node; 3]);
    assert_eq!(tasks[3], TaskKind::Edge);
    assert_eq!(tasks[4], TaskKind::Graph);
    let easy = &specs[0];
    let hard = &specs[2];
    assert_eq!((easy.text_noise, easy.label_noise), (0.05, 0.0));
    assert_eq!((hard.text_noise, hard.label_noise), (0.6, 0.3));
}

#[test]
fn written_suite_loads_and_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = generate_benchmark_suite(a.path(), MASTER_SEED).unwrap();
    generate_benchmark_suite(b.path(), MASTER_SEED).unwrap();
    assert_eq!(files.len(), 5);
    for (g, e) in &files {
        for p in [g, e] {
            let other = b.path().join(p.file_name().unwrap());
            assert_eq!(
                std::fs::read(p).unwrap(),
                std::fs::read(other).unwrap(),
                "{}",
                p.display()
            );
        }
    }
    let loaded = load_directory(a.path()).unwrap();
    assert_eq!(loaded.len(), 5);
    for ds in &loaded {
        assert!(ds.violations().is_empty(), "{}", ds.domain);
        assert_eq!(ds.text_dim(), SUITE_TEXT_DIM);
    }
}

/// HARD must be harder than EASY for a fixed untrained encoder at matched
/// sizes, checked on the frozen suite.
#[test]
fn hard_domain_is_harder_untrained() {
    let suite = generate_suite(MASTER_SEED).unwrap();
    let (easy, hard) = (&suite[0], &suite[2]);
    assert_eq!(easy.split.train.len(), hard.split.train.len());
    let model = PretrainedModel::new(dims(), SUITE_TEXT_DIM, 0).unwrap();
    let le = split_contrastive_loss(&model, easy, SplitKind::Train, 0.07).unwrap();
    let lh = split_contrastive_loss(&model, hard, SplitKind::Train, 0.07).unwrap();
    assert!(lh > le, "hard {lh} vs easy {le}");
}

#[test]
fn text_margin_falls_with_text_noise() {
    let suite = generate_suite(MASTER_SEED).unwrap();
    let m: Vec<f64> = suite[..3].iter().map(|d| text_class_margin(d).unwrap()).collect();
    assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
}
