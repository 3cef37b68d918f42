use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use permrank_bench::{mean_diff_tests, shifted_dataset};
use permrank_core::dataset::DataView;
use permrank_core::npc::npc_pvalue;
use permrank_core::perm_engine::cmc_run;
use permrank_core::ranking::global_ranking;
use permrank_core::{Combiner, PermutationPlan, RankingOptions, Strategy};

fn cmc(c: &mut Criterion) {
    let mut group = c.benchmark_group("cmc_run");
    for p in [1, 10, 50] {
        let ds = shifted_dataset(2, 20, p, 1);
        let tests = mean_diff_tests(p);
        let plan = PermutationPlan::new(Strategy::Pip, 999, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(p), &p, |b, _| {
            b.iter(|| cmc_run(&DataView::full(&ds), &plan, (0, 1), black_box(&tests)).unwrap())
        });
    }
    let ds = shifted_dataset(2, 6, 3, 1);
    let tests = mean_diff_tests(3);
    let plan = PermutationPlan::new(Strategy::Exhaustive, 1, 1).unwrap();
    group.bench_function("exhaustive_6_6", |b| {
        b.iter(|| cmc_run(&DataView::full(&ds), &plan, (0, 1), black_box(&tests)).unwrap())
    });
    group.finish();
}

fn combine(c: &mut Criterion) {
    let ds = shifted_dataset(2, 20, 20, 2);
    let plan = PermutationPlan::new(Strategy::Pip, 1999, 2).unwrap();
    let tableau = cmc_run(&DataView::full(&ds), &plan, (0, 1), &mean_diff_tests(20))
        .unwrap()
        .tableau;
    let columns: Vec<usize> = (0..20).collect();
    let mut group = c.benchmark_group("npc");
    for combiner in [Combiner::FISHER, Combiner::TIPPETT, Combiner::LIPTAK, Combiner::Direct] {
        group.bench_function(combiner.to_string(), |b| {
            b.iter(|| npc_pvalue(black_box(&tableau), &columns, &combiner).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("global_ranking");
    group.sample_size(10);
    for groups in [3, 6] {
        let ds = shifted_dataset(groups, 10, 4, 3);
        let tests = mean_diff_tests(4);
        let plan = PermutationPlan::new(Strategy::Pip, 499, 3).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(groups), &groups, |b, _| {
            b.iter(|| {
                global_ranking(&DataView::full(&ds), &plan, &tests, &RankingOptions::default()).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, cmc, combine, ranking);
criterion_main!(benches);
