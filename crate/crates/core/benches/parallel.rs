//! Rayon map against the sequential fallback on an enumeration workload:
//! one harmonic table and Gibbs-kernel sweep per random instance.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dprm_core::oracle::{compute_h, exact_gibbs_kernel, PositionLaw, RevealChain, TokenLaw};
use dprm_core::par::{map_indexed, map_indexed_seq};
use dprm_core::targets::{TableTarget, TerminalReward};
use dprm_core::{MaskedState, SeededRng, Vocab};

fn instance(i: usize) -> f64 {
    let mut rng = SeededRng::new(11, i as u64);
    let v = Vocab::new(3).unwrap();
    let len = 5;
    let target = TableTarget::random(v, len, 1, 0, 0.7, &mut rng).unwrap();
    let values = (0..3usize.pow(len as u32)).map(|_| rng.uniform()).collect();
    let chain = RevealChain {
        vocab: v,
        root: MaskedState::all_masked(&[], len),
        positions: PositionLaw::Uniform,
        tokens: TokenLaw::Posterior { target: &target, prompt: 0 },
        reward: TerminalReward::Table { values },
    };
    let h = compute_h(&chain, 1.0).unwrap();
    let mut acc = h.partition();
    for (s, _) in h.iter() {
        if !s.is_terminal() {
            acc += exact_gibbs_kernel(&chain, &h, s).unwrap()[0].1;
        }
    }
    acc
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("enumeration");
    group.sample_size(10);
    for n in [8usize, 32] {
        group.bench_with_input(BenchmarkId::new("rayon", n), &n, |b, &n| {
            b.iter(|| black_box(map_indexed(n, instance)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| black_box(map_indexed_seq(n, instance)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
