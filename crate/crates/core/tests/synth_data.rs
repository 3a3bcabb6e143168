use ndarray::Array3;
use psunet_core::state::gaussian;
use psunet_core::synth::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn there_are_240_distinct_scenes() {
    let specs = SceneSpec::enumerate();
    assert_eq!(specs.len(), 240);
    let set: std::collections::BTreeSet<_> = specs.iter().collect();
    assert_eq!(set.len(), 240);
    let caps: std::collections::BTreeSet<_> = all_captions().into_iter().collect();
    assert_eq!(caps.len(), 240);
}

#[test]
fn oracle_recovers_every_clean_render() {
    for spec in SceneSpec::enumerate() {
        let c = oracle_classify(&render(&spec)).unwrap();
        assert_eq!(c.spec(), spec);
        assert!(c.flagged().is_empty(), "{spec:?} flagged {:?}", c.flagged());
    }
}

#[test]
fn oracle_tolerates_small_noise() {
    let specs = SceneSpec::enumerate();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let trials = 1000;
    let mut hits = 0;
    for i in 0..trials {
        let spec = specs[(i * 7) % 240];
        let noise: Array3<f32> = gaussian((3, 32, 32), &mut rng);
        let img = render(&spec) + &(noise * 0.05);
        if oracle_classify(&img).unwrap().spec() == spec {
            hits += 1;
        }
    }
    assert!(hits * 100 >= trials * 99, "{hits}/{trials}");
}

#[test]
fn pure_noise_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let img: Array3<f32> = gaussian((3, 32, 32), &mut rng);
        let c = oracle_classify(&img).unwrap();
        assert!(!c.flagged().is_empty(), "noise classified confidently: {c:?}");
    }
    let flat = Array3::<f32>::zeros((3, 32, 32));
    assert!(!oracle_classify(&flat).unwrap().flagged().is_empty());
}

#[test]
fn oracle_rejects_wrong_shape() {
    assert!(oracle_classify(&Array3::<f32>::zeros((3, 16, 16))).is_err());
    assert!(oracle_classify(&Array3::<f32>::zeros((1, 32, 32))).is_err());
}

#[test]
fn render_matches_geometry() {
    use Position::*;
    let spec = SceneSpec {
        shape: Shape::Square,
        color: Color::Blue,
        size: Size::Small,
        position: Center,
        background: Background::Light,
    };
    let img = render(&spec);
    // Square of half-width 4 about (16, 16) covers pixels 12..=19.
    assert_eq!(img[[2, 12, 12]], 1.0);
    assert_eq!(img[[0, 19, 19]], -1.0);
    assert_eq!(img[[0, 11, 12]], 0.5);
    assert_eq!(img[[1, 20, 16]], 0.5);
    let lit = img.index_axis(ndarray::Axis(0), 2).iter().filter(|&&v| v == 1.0).count();
    assert_eq!(lit, 64);
    assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn captions_follow_grammar_and_parse_back() {
    for spec in SceneSpec::enumerate() {
        let cap = spec.caption();
        assert_eq!(cap.split_whitespace().count(), slot::CAPTION_WORDS);
        let p = parse_caption(&cap);
        assert!(p.well_formed);
        assert_eq!(p.spec(), Some(spec));
    }
    let p = parse_caption("a small red circle at the top on a dark");
    assert_eq!(p, CaptionSlots::default());
    let p = parse_caption("a small purple circle at the top on a dark background");
    assert_eq!(p.color, None);
    assert_eq!(p.shape, Some(Shape::Circle));
    let p = parse_caption("the small red circle at the top on a dark background");
    assert!(!p.well_formed);
}

#[test]
fn datasets_are_deterministic_per_index() {
    let a = make_dataset(50, 3).unwrap();
    let b = make_dataset(80, 3).unwrap();
    assert_eq!(a[..], b[..50]);
    let c = make_dataset(50, 4).unwrap();
    assert_ne!(a, c);
    assert_eq!(spec_at(3, 17), a[17].spec);
    assert!(make_dataset(0, 0).is_err());
    for s in &a {
        assert_eq!(s.caption, caption_grammar(&s.spec));
        assert_eq!(s.image, render(&s.spec));
    }
}

#[test]
fn attributes_are_uniform() {
    let n = 6000usize;
    let mut shape = [0usize; 3];
    let mut pos = [0usize; 5];
    for i in 0..n as u64 {
        let s = spec_at(99, i);
        shape[s.shape.index()] += 1;
        pos[s.position.index()] += 1;
    }
    let check = |counts: &[usize]| {
        let p = 1.0 / counts.len() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sd, "{counts:?}");
        }
    };
    check(&shape);
    check(&pos);
}

#[test]
fn export_round_trips_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let samples = make_dataset(12, 5).unwrap();
    export_split(dir.path(), "train", &samples).unwrap();
    let bytes = std::fs::metadata(dir.path().join("train.images.f32")).unwrap().len();
    assert_eq!(bytes, 12 * 3 * 32 * 32 * 4);
    let header = std::fs::read_to_string(dir.path().join("train.tsv")).unwrap();
    assert!(header.starts_with("index\tcaption\tshape\tcolor\tsize\tposition\tbackground\n"));
    assert_eq!(load_split(dir.path(), "train").unwrap(), samples);

    let f = dir.path().join("train.images.f32");
    let mut raw = std::fs::read(&f).unwrap();
    raw.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&f, &raw).unwrap();
    assert!(load_split(dir.path(), "train").is_err());
    raw.truncate(raw.len() - 8);
    std::fs::write(&f, &raw).unwrap();
    assert!(load_split(dir.path(), "train").is_err());

    export_split(dir.path(), "test", &samples[..2]).unwrap();
    let t = dir.path().join("test.tsv");
    let text = std::fs::read_to_string(&t).unwrap().replace("circle", "blob").replace("square", "blob").replace("triangle", "blob");
    std::fs::write(&t, text).unwrap();
    assert!(load_split(dir.path(), "test").is_err());
}
