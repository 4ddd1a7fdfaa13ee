use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mlt_bench::Fixture;
use mlt_core::autodiff::kernels::{conv2d_forward, valid_out, xcorr_forward, ConvDims};
use mlt_core::matcher::Mode;
use mlt_core::meta::compute_delta;
use mlt_core::Rng;

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let (h, w, cin, k, cout, stride) = (64, 64, 3, 5, 16, 2);
    let ho = valid_out(h, k, stride).unwrap();
    let wo = valid_out(w, k, stride).unwrap();
    let d = ConvDims {
        h,
        w,
        cin,
        k,
        cout,
        stride,
        ho,
        wo,
    };
    let input: Vec<f64> = (0..h * w * cin)
        .map(|_| rng.uniform_in(-1.0, 1.0))
        .collect();
    let kernel: Vec<f64> = (0..k * k * cin * cout)
        .map(|_| rng.uniform_in(-0.1, 0.1))
        .collect();
    c.bench_function("conv2d_forward 64x64x3 k5 s2 -> 16", |b| {
        b.iter(|| conv2d_forward(black_box(&input), black_box(&kernel), &d))
    });
}

fn xcorr(c: &mut Criterion) {
    let f = Fixture::desk(2, 2).unwrap();
    let fx = f
        .matcher
        .extract_features(&f.exemplar().unwrap(), None, Mode::Eval)
        .unwrap();
    let fz = f
        .matcher
        .extract_features(&f.search(1).unwrap(), None, Mode::Eval)
        .unwrap();
    let (h, w, ch) = fx.hwc().unwrap();
    let (sh, sw, _) = fz.hwc().unwrap();
    c.bench_function("xcorr_forward desk features", |b| {
        b.iter(|| {
            xcorr_forward(
                black_box(fx.data()),
                (h, w),
                black_box(fz.data()),
                (sh, sw),
                ch,
            )
        })
    });
}

fn matcher(c: &mut Criterion) {
    let f = Fixture::desk(2, 3).unwrap();
    let x = f.exemplar().unwrap();
    let z = f.search(1).unwrap();
    let fx = f.matcher.extract_features(&x, None, Mode::Eval).unwrap();
    c.bench_function("matcher respond desk", |b| {
        b.iter(|| f.matcher.respond(black_box(&fx), black_box(&z)).unwrap())
    });
    let zs: Vec<_> = (0..f.meta.config().m).map(|_| z.clone()).collect();
    c.bench_function("meta delta desk M patches", |b| {
        b.iter(|| compute_delta(&f.matcher, black_box(&x), black_box(&zs)).unwrap())
    });
}

criterion_group!(benches, conv, xcorr, matcher);
criterion_main!(benches);
