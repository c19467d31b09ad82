use std::hint::black_box;

use candle_core::DType;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmgen_core::datapipe::{match_ratio, ASPECT_RATIOS};
use mmgen_core::dualvitok::{DualTokenizer, TokenizerConfig};
use mmgen_core::harness::toydata::toy_dataset;
use mmgen_core::seqcodec::{parse, serialize, ImageTokenBlock, VocabLayout};
use mmgen_core::vq::{nearest_code, CodeTable};
use mmgen_core::IndexGrid;

fn codec(c: &mut Criterion) {
    let layout = VocabLayout::build(16, 1024, 4096, 64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = |h: usize, w: usize, k: u32, rng: &mut ChaCha8Rng| {
        IndexGrid::new(h, w, (0..h * w).map(|_| rng.random_range(0..k)).collect()).unwrap()
    };
    let block = ImageTokenBlock::new(grid(8, 8, 1024, &mut rng), grid(16, 16, 4096, &mut rng));
    let tokens = serialize(&block, &layout).unwrap();
    c.bench_function("serialize 8x8+16x16", |b| b.iter(|| serialize(black_box(&block), &layout).unwrap()));
    c.bench_function("parse 8x8+16x16", |b| b.iter(|| parse(black_box(&tokens), &layout).unwrap()));
}

fn quantizer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, d) = (1024, 32);
    let table = CodeTable::new(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("nearest_code 1024x32", |b| b.iter(|| nearest_code(&table, black_box(&v)).unwrap()));
}

fn datapipe(c: &mut Criterion) {
    c.bench_function("match_ratio", |b| {
        b.iter(|| match_ratio(black_box(1920), black_box(1080), &ASPECT_RATIOS).unwrap())
    });
}

fn tokenizer(c: &mut Criterion) {
    let tok = DualTokenizer::new(TokenizerConfig::toy(), 0, DType::F32).unwrap();
    let img = toy_dataset(0, 1, 32, 32).remove(0).image;
    let out = tok.encode(&img).unwrap();
    let block = out.to_block().unwrap();
    let mut group = c.benchmark_group("toy tokenizer 32x32");
    group.sample_size(20);
    group.bench_function("encode", |b| b.iter(|| tok.encode(black_box(&img)).unwrap()));
    group.bench_function("decode", |b| b.iter(|| tok.decode_block(black_box(&block)).unwrap()));
    group.finish();
}

criterion_group!(benches, codec, quantizer, datapipe, tokenizer);
criterion_main!(benches);
