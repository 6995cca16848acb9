mod common;

use std::cell::Cell;

use blurspace::deblur::resample_noise;
use blurspace::imaging::procedural_image;
use blurspace::objectives::ScalarFn;
use blurspace::{
    charbonnier, deblur, grad_check, hyper_laplacian, psnr, retrieve_kernel, DeblurConfig, Deblurrer, Error,
    HyperLaplacianPrior, ImagePrior, ImageTensor, KernelSpace, Phase, Tensor, TraceEntry,
};
use common::{tiny_arch, tiny_dataset, tiny_optimizer};

fn model() -> KernelSpace {
    let data = tiny_dataset(4);
    blurspace::train_kernel_space(&data, tiny_arch(), tiny_optimizer(40), 2, 1e-3)
        .unwrap()
        .state
        .model
}

fn small_budget() -> DeblurConfig {
    DeblurConfig {
        outer_iters: 3,
        inner_iters_first: 4,
        inner_iters_rest: 2,
        image_width: 8,
        ..DeblurConfig::default()
    }
}

fn blurry() -> ImageTensor {
    tiny_dataset(4).pairs()[0].blurry.clone()
}

fn values(trace: &[TraceEntry]) -> Vec<u64> {
    trace.iter().map(|e| e.loss.value.to_bits()).collect()
}

#[test]
fn trace_follows_the_alternating_schedule() {
    let m = model();
    let out = deblur(&m.operator, &m.operator_params, &blurry(), small_budget()).unwrap();
    let layout: Vec<(usize, Phase, usize)> = out.trace.iter().map(|e| (e.outer, e.phase, e.step)).collect();
    let mut expected = Vec::new();
    for outer in 0..3 {
        let inner = if outer == 0 { 4 } else { 2 };
        expected.extend((0..inner).map(|s| (outer, Phase::Kernel, s)));
        expected.push((outer, Phase::Image, 0));
    }
    assert_eq!(layout, expected);

    let mut running = f64::INFINITY;
    for e in &out.trace {
        running = running.min(e.loss.value);
        assert_eq!(e.best, running);
        let terms = ["charbonnier", "kernel_l2", "hyper_laplacian"];
        assert!(terms.iter().all(|t| e.loss.term(t).is_some()));
    }
    assert_eq!(out.image.shape(), (3, 16, 16));
    assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.kernel.shape(), tiny_arch().kernel_shape(16, 16).unwrap());
}

#[test]
fn deblurring_is_seeded() {
    let m = model();
    let run = |seed| {
        let cfg = DeblurConfig { seed, ..small_budget() };
        deblur(&m.operator, &m.operator_params, &blurry(), cfg).unwrap()
    };
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(values(&a.trace), values(&b.trace));
    assert_eq!(a.image, b.image);
    assert_eq!(a.kernel, b.kernel);
    assert_ne!(values(&a.trace), values(&c.trace));
}

#[test]
fn kernel_reinitialization_keeps_the_schedule() {
    let m = model();
    let cfg = DeblurConfig {
        reinit_kernel_each_outer: true,
        ..small_budget()
    };
    let out = deblur(&m.operator, &m.operator_params, &blurry(), cfg).unwrap();
    assert_eq!(out.trace.len(), 4 + 1 + 2 * (2 + 1));
    let warm = deblur(&m.operator, &m.operator_params, &blurry(), small_budget()).unwrap();
    assert_eq!(values(&out.trace[..5]), values(&warm.trace[..5]));
    assert_ne!(values(&out.trace[5..]), values(&warm.trace[5..]));
}

#[test]
fn early_stop_never_lengthens_a_run() {
    let m = model();
    let cfg = DeblurConfig {
        inner_iters_first: 60,
        early_stop: true,
        ..small_budget()
    };
    let out = retrieve_kernel(&m.operator, &m.operator_params, &blurry(), &blurry(), cfg.clone()).unwrap();
    assert!(out.trace.len() <= cfg.kernel_steps());
    assert!(out.trace.len() > 20);
}

#[test]
fn custom_priors_enter_the_objective() {
    let m = model();
    let brightness = |x: &ImageTensor| -> blurspace::Result<(f64, Vec<f32>)> {
        let v = x.data().iter().map(|a| *a as f64).sum::<f64>();
        Ok((v, vec![1.0; x.data().len()]))
    };
    let mut d = Deblurrer::new(&m.operator, &m.operator_params, small_budget()).unwrap();
    d.register_image_prior("brightness", 0.0, brightness).unwrap();
    let with = d.deblur(&blurry()).unwrap();
    let plain = deblur(&m.operator, &m.operator_params, &blurry(), small_budget()).unwrap();
    // a zero weight reports the term without changing the optimization
    assert_eq!(values(&with.trace), values(&plain.trace));
    assert!(with.trace.iter().all(|e| e.loss.term("brightness").is_some()));

    let mut d = Deblurrer::new(&m.operator, &m.operator_params, small_budget()).unwrap();
    d.register_image_prior("brightness", 1e-2, brightness).unwrap();
    let pushed = d.deblur(&blurry()).unwrap();
    assert_ne!(values(&pushed.trace), values(&plain.trace));
}

#[test]
fn prior_registration_is_validated() {
    let m = model();
    let mut d = Deblurrer::new(&m.operator, &m.operator_params, small_budget()).unwrap();
    let hl = HyperLaplacianPrior { alpha: 0.8 };
    assert!(matches!(
        d.register_image_prior("charbonnier", 1.0, hl),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        d.register_image_prior("tv", f64::NAN, hl),
        Err(Error::Config(_))
    ));
    d.register_image_prior("tv", 1.0, hl).unwrap();
    assert!(matches!(d.register_image_prior("tv", 1.0, hl), Err(Error::Config(_))));
}

#[test]
fn failing_prior_aborts_with_the_partial_trace() {
    let m = model();
    let calls = Cell::new(0usize);
    let flaky = move |x: &ImageTensor| -> blurspace::Result<(f64, Vec<f32>)> {
        calls.set(calls.get() + 1);
        let v = if calls.get() > 6 { f64::NAN } else { 0.0 };
        Ok((v, vec![0.0; x.data().len()]))
    };
    let mut d = Deblurrer::new(&m.operator, &m.operator_params, small_budget()).unwrap();
    d.register_image_prior("flaky", 1.0, flaky).unwrap();
    let aborted = d.deblur(&blurry()).unwrap_err();
    assert!(
        matches!(&aborted.error, Error::NonFinite { term, .. } if term == "flaky"),
        "{aborted}"
    );
    assert_eq!(aborted.trace.len(), 6);
}

#[test]
fn bad_targets_and_budgets_are_rejected() {
    let m = model();
    let gray = procedural_image(1, 1, 16);
    let err = deblur(&m.operator, &m.operator_params, &gray, small_budget()).unwrap_err();
    assert!(matches!(err.error, Error::Shape(_)));
    assert!(err.trace.is_empty());

    let cfg = DeblurConfig {
        outer_iters: 0,
        ..small_budget()
    };
    let err = deblur(&m.operator, &m.operator_params, &blurry(), cfg).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));

    let x = procedural_image(1, 3, 24);
    let err = retrieve_kernel(&m.operator, &m.operator_params, &x, &blurry(), small_budget()).unwrap_err();
    assert!(matches!(err.error, Error::Shape(_)));
}

#[test]
fn retrieval_reports_its_own_reconstruction() {
    let m = model();
    let data = tiny_dataset(4);
    let pair = &data.pairs()[1];
    let cfg = small_budget();
    let out = retrieve_kernel(&m.operator, &m.operator_params, &pair.sharp, &pair.blurry, cfg.clone()).unwrap();
    assert_eq!(out.trace.len(), cfg.kernel_steps());
    assert!(out
        .trace
        .iter()
        .all(|e| e.phase == Phase::Kernel && e.loss.term("hyper_laplacian").is_none()));
    let recon = m.apply_blur(&pair.sharp, &out.kernel).unwrap();
    assert_eq!(out.recon_psnr, psnr(&recon, &pair.blurry).unwrap());
}

#[test]
fn noise_resampling() {
    let flat = Tensor::full(vec![1, 8, 8], 0.25);
    let up = resample_noise(&flat, 20, 12).unwrap();
    assert_eq!(up.shape(), [1, 20, 12]);
    assert!(up.data().iter().all(|v| *v == 0.25));

    let ramp = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
    assert_eq!(resample_noise(&ramp, 4, 4).unwrap(), ramp);
    // bilinear interpolation reproduces a linear ramp exactly at the
    // half-pixel-centred source coordinate, clamped to the border
    let up = resample_noise(&ramp, 8, 6).unwrap();
    let src = |i: usize, n_out: usize| ((i as f64 + 0.5) * 4.0 / n_out as f64 - 0.5).clamp(0.0, 3.0);
    for y in 0..8 {
        for x in 0..6 {
            let want = 4.0 * src(y, 8) + src(x, 6);
            assert!((up.data()[y * 6 + x] as f64 - want).abs() < 1e-5, "({y}, {x})");
        }
    }
}

#[test]
fn hyper_laplacian_hook_matches_the_objective() {
    // checkerboard plus texture: every finite difference stays near ±0.5, far
    // from the smoothed kink at zero where a 1e-3 step would straddle it
    let texture = procedural_image(6, 3, 12);
    let x = ImageTensor::from_fn(3, 12, 12, |c, y, x| {
        let sign = if (c + y + x) % 2 == 0 { 1.0 } else { -1.0 };
        0.5 + 0.25 * sign + 0.05 * texture.get(c, y, x)
    });
    let hook = HyperLaplacianPrior { alpha: 0.8 };
    let (v, _) = hook.evaluate(&x).unwrap();
    assert!((v - hyper_laplacian(&x, 0.8).unwrap()).abs() <= 1e-12 * v.abs());
    let mut f = ScalarFn {
        value: |p: &[f32]| hook.evaluate(&ImageTensor::new(3, 12, 12, p.to_vec())?).map(|r| r.0),
        gradient: |p: &[f32]| hook.evaluate(&ImageTensor::new(3, 12, 12, p.to_vec())?).map(|r| r.1),
    };
    let r = grad_check(&mut f, x.data(), 1e-3).unwrap();
    assert!(r.passed, "{r:?}");
}

fn data_term(m: &KernelSpace, x: &ImageTensor, k: &blurspace::BlurKernel, y: &ImageTensor) -> f64 {
    charbonnier(&m.apply_blur(x, k).unwrap(), y, 1e-3).unwrap()
}

#[test]
fn kernel_phases_never_end_above_their_start() {
    let m = model();
    let out = deblur(&m.operator, &m.operator_params, &blurry(), small_budget()).unwrap();
    for outer in 0..3 {
        let phase: Vec<f64> = out
            .trace
            .iter()
            .filter(|e| e.outer == outer && e.phase == Phase::Kernel)
            .map(|e| e.loss.value)
            .collect();
        let kept = phase.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(kept <= phase[0]);
    }
}

#[test]
fn returned_solution_fits_the_data_better_than_the_start() {
    let m = model();
    let y = blurry();
    let cfg = DeblurConfig {
        outer_iters: 30,
        inner_iters_first: 20,
        inner_iters_rest: 5,
        ..small_budget()
    };
    let out = deblur(&m.operator, &m.operator_params, &y, cfg).unwrap();
    let start = out.trace[0].loss.term("charbonnier").unwrap();
    let end = data_term(&m, &out.image, &out.kernel, &y);
    assert!(end <= start, "data term {end} after vs {start} at the start");
}

#[test]
fn dropping_the_image_prior_does_not_worsen_the_data_fit() {
    let m = model();
    // identity case: the target is itself sharp
    let y = tiny_dataset(4).pairs()[0].sharp.clone();
    let run = |gamma: f64| {
        let mut cfg = DeblurConfig {
            outer_iters: 30,
            inner_iters_first: 20,
            inner_iters_rest: 5,
            ..small_budget()
        };
        cfg.weights.gamma = gamma;
        let out = deblur(&m.operator, &m.operator_params, &y, cfg).unwrap();
        data_term(&m, &out.image, &out.kernel, &y)
    };
    let with_prior = run(DeblurConfig::default().weights.gamma);
    let without = run(0.0);
    assert!(
        without <= with_prior,
        "γ=0 gives {without}, default γ gives {with_prior}"
    );
}
