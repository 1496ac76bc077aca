use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gems_bench::{compressor as compressor_workload, level_logits, midterm as midterm_workload, qlu_operands};
use gems_core::encoder::lifecycle::qlu_quadratic;
use gems_core::encoder::midterm::MidPath;
use gems_core::eval::{beam_search_with, log_softmax};
use gems_core::numerics::Tape;

fn midterm(c: &mut Criterion) {
    let lengths = [256usize, 1024];
    let (store, enc, inputs) = midterm_workload(&lengths);
    let mut g = c.benchmark_group("midterm_forward");
    g.sample_size(10);
    for (n, h) in lengths.iter().zip(&inputs) {
        g.bench_with_input(BenchmarkId::new("dense", n), h, |b, h| {
            b.iter(|| black_box(enc.infer(&store, h, MidPath::Dense).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("sparse_k64", n), h, |b, h| {
            b.iter(|| black_box(enc.infer(&store, h, MidPath::Sparse(64)).unwrap()))
        });
    }
    g.finish();
}

fn compressor(c: &mut Criterion) {
    let lengths = [1024usize, 4096];
    let (store, qlu, inputs) = compressor_workload(&lengths);
    let mut g = c.benchmark_group("lifecycle_compress");
    g.sample_size(10);
    for (n, x) in lengths.iter().zip(&inputs) {
        g.bench_with_input(BenchmarkId::new("linear", n), x, |b, x| {
            b.iter(|| {
                let mut t = Tape::with_params(&store).no_grad();
                let xv = t.constant(x.clone());
                black_box(qlu.attend(&mut t, xv).unwrap());
            })
        });
    }
    let (q, k, v) = qlu_operands(1024);
    g.bench_function("quadratic_oracle_1024", |b| b.iter(|| black_box(qlu_quadratic(&q, &k, &v))));
    g.finish();
}

fn beams(c: &mut Criterion) {
    let tables = level_logits(&[64, 64, 64]);
    c.bench_function("beam_search_64x64x64_b100", |b| {
        b.iter(|| {
            beam_search_with(&[64, 64, 64], 100, |p| {
                let row = log_softmax(&tables[p[0].len()]);
                Ok(vec![row; p.len()])
            })
            .unwrap()
        })
    });
}

criterion_group!(benches, midterm, compressor, beams);
criterion_main!(benches);
