use std::collections::{BTreeMap, HashSet};

use modicl::dataset::{
    all_tasks, build_sequence, make_eval_sequences, sample_tasks_rectangular, split_inputs, BatchSampler, EvalSet,
    TaskVector,
};
use modicl::gfp::PrimeField;
use proptest::prelude::*;

fn split_params() -> impl Strategy<Value = (u32, usize, u64)> {
    prop::sample::select(vec![5u32, 7, 11]).prop_flat_map(|p| {
        let max = (p * p) as usize / 4;
        (Just(p), (1..=max).prop_map(|k| 4 * k), any::<u64>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn task_split_partitions_the_tasks((p, n_id, seed) in split_params()) {
        let f = PrimeField::new(p).unwrap();
        let s = sample_tasks_rectangular(n_id, &f, seed).unwrap();
        let id: HashSet<TaskVector> = s.in_distribution.iter().copied().collect();
        prop_assert_eq!(id.len(), n_id);
        prop_assert_eq!(s.in_distribution.len() + s.out_of_distribution.len(), (p * p) as usize);
        prop_assert!(s.out_of_distribution.iter().all(|t| !id.contains(t)));
        // every chosen task comes from an accepted rectangle
        let covered: HashSet<TaskVector> = s.rectangles.iter().flatten().copied().collect();
        prop_assert!(id.iter().all(|t| covered.contains(t)));
        for r in &s.rectangles {
            prop_assert!(r[0].a == r[1].a && r[2].a == r[3].a && r[0].a != r[2].a);
            prop_assert!(r[0].b == r[2].b && r[1].b == r[3].b && r[0].b != r[1].b);
        }
        prop_assert_eq!(&s, &sample_tasks_rectangular(n_id, &f, seed).unwrap());
    }

    #[test]
    fn input_split_sizes((p, alpha, seed) in (prop::sample::select(vec![5u32, 7, 11, 29]), 0.05f64..=1.0, any::<u64>())) {
        let f = PrimeField::new(p).unwrap();
        let s = split_inputs(alpha, &f, seed).unwrap();
        let n = (p * p) as usize;
        prop_assert_eq!(s.train.len(), (alpha * n as f64).round() as usize);
        let all: HashSet<(u32, u32)> = s.train.iter().chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn batches_are_balanced_and_share_streams(seed in any::<u64>(), step in 0u64..1000, per_task in 1usize..4) {
        let f = PrimeField::new(7).unwrap();
        let tasks = sample_tasks_rectangular(8, &f, 1).unwrap().in_distribution;
        let pool = split_inputs(0.7, &f, 2).unwrap().train;
        let sampler = BatchSampler::new(f, tasks.clone(), pool.clone(), 6, 8 * per_task, seed).unwrap();
        let batch = sampler.batch(step);
        prop_assert_eq!(batch.len(), 8 * per_task);
        let mut counts: BTreeMap<TaskVector, usize> = BTreeMap::new();
        for s in &batch.sequences {
            *counts.entry(s.task).or_default() += 1;
            let inputs = s.inputs();
            let distinct: HashSet<_> = inputs.iter().collect();
            prop_assert_eq!(distinct.len(), inputs.len());
            prop_assert!(inputs.iter().all(|i| pool.contains(i)));
            prop_assert_eq!(s, &build_sequence(&f, s.task, &inputs).unwrap());
        }
        prop_assert!(counts.values().all(|&c| c == per_task));
        prop_assert_eq!(counts.len(), 8);
        for chunk in batch.sequences.chunks(8) {
            prop_assert!(chunk.iter().all(|s| s.inputs() == chunk[0].inputs()));
        }
        prop_assert_eq!(&batch, &sampler.batch(step));
    }

    #[test]
    fn eval_sets_are_homogeneous(seed in any::<u64>(), which in prop::sample::select(EvalSet::ALL.to_vec())) {
        let f = PrimeField::new(11).unwrap();
        let tasks = sample_tasks_rectangular(16, &f, 3).unwrap();
        let inputs = split_inputs(0.7, &f, 4).unwrap();
        let seqs = make_eval_sequences(&f, which, 20, &tasks, &inputs, 8, seed).unwrap();
        for s in &seqs {
            prop_assert!(which.tasks(&tasks).contains(&s.task));
            prop_assert!(s.inputs().iter().all(|i| which.inputs(&inputs).contains(i)));
            prop_assert_eq!(s.labels(), s.inputs().iter().map(|&(x, y)| s.task.apply(&f, x, y)).collect::<Vec<_>>());
        }
    }
}

#[test]
fn split_edge_cases() {
    let f = PrimeField::new(29).unwrap();
    let s = sample_tasks_rectangular(128, &f, 0).unwrap();
    assert_eq!(s.in_distribution.len() + s.out_of_distribution.len(), 841);
    let full = sample_tasks_rectangular(840, &f, 0).unwrap();
    assert_eq!(full.out_of_distribution.len(), 1);
    assert!(sample_tasks_rectangular(6, &f, 0).is_err());
    assert!(sample_tasks_rectangular(844, &f, 0).is_err());
    assert!(split_inputs(0.0, &f, 0).is_err());
    assert!(split_inputs(1.0, &f, 0).unwrap().test.is_empty());
    let tasks = sample_tasks_rectangular(8, &f, 0).unwrap();
    let inputs = split_inputs(1.0, &f, 0).unwrap();
    assert!(make_eval_sequences(&f, EvalSet::IdTest, 4, &tasks, &inputs, 4, 0).is_err());
    assert_eq!(all_tasks(5).len(), 25);
}
