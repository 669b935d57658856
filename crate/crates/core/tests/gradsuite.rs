use gqstn::gradsuite::{self, DEFAULT_CASES, DEFAULT_TOL, OPS};

#[test]
fn every_op_passes_the_seeded_suite() {
    let t = std::time::Instant::now();
    let results = gradsuite::run(DEFAULT_CASES, 2024, DEFAULT_TOL, &[]).unwrap();
    assert_eq!(results.len(), OPS.len());
    let mut failed = Vec::new();
    for r in &results {
        assert_eq!(r.cases, DEFAULT_CASES);
        assert!(r.checked >= DEFAULT_CASES);
        // Skipped kink probes must stay rare.
        assert!(
            r.kinked * 100 < r.checked,
            "{}: {} kinked of {}",
            r.op,
            r.kinked,
            r.checked
        );
        if !r.passed {
            failed.push(format!("{} {:.3e} {:?}", r.op, r.max_rel_err, r.worst));
        }
    }
    assert!(failed.is_empty(), "failing ops: {failed:#?}");
    assert!(t.elapsed().as_secs() < 300);
}

#[test]
fn sampler_parameters_are_all_covered() {
    for p in [
        "sampler.image",
        "sampler.x",
        "sampler.y",
        "sampler.theta",
        "sampler.s",
        "classifier.input",
    ] {
        assert!(OPS.contains(&p), "{p}");
    }
    let r = gradsuite::run(3, 1, DEFAULT_TOL, &["sampler.".into()]).unwrap();
    assert_eq!(r.len(), 5);
}

#[test]
fn a_wrong_gradient_is_caught() {
    use gqstn::autodiff::{grad_check, Tensor};
    // d/dx of x·|x| computed as if |x| were a constant is off by |x|.
    let x = Tensor::vector(vec![0.7, -1.3]);
    let rep = grad_check(
        |g, v| {
            let c = g.constant(Tensor::vector(g.data(v).iter().map(|a| a.abs()).collect()));
            let m = g.mul(v, c)?;
            Ok(g.sum(m))
        },
        &x,
        1e-6,
        DEFAULT_TOL,
    )
    .unwrap();
    assert!(!rep.passed);
}
