use lasp_core::comm::{spawn, WorldConfig};
use lasp_core::costmodel::{traffic_per_step, CostParams};
use lasp_core::data::{gen_data, stream};
use lasp_core::lasp2::{self, Lasp2Options, Schedule};
use lasp_core::numerics::{
    hadamard_mask, matmul, prefix_sum_states, suffix_sum_states, sum_states, transpose, CausalMask,
    Matrix,
};
use lasp_core::oracle::{linear_attn_serial, AttentionInstance};
use lasp_core::{lasp1, SequenceBatch};
use proptest::prelude::*;

fn integer_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1000i32..1000, rows * cols).prop_map(move |v| {
        Matrix::from_vec(rows, cols, v.into_iter().map(f64::from).collect()).unwrap()
    })
}

fn unit_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// `(N, T)` with `T | N`.
fn split_shape() -> impl Strategy<Value = (usize, usize)> {
    (prop::sample::select(vec![1usize, 2, 4, 8]), 1usize..5).prop_map(|(t, c)| (t * c, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Integer entries keep every partial sum exact, so the split point
    // cannot change a single bit.
    #[test]
    fn prefix_plus_suffix_is_full_sum(
        states in (1usize..7).prop_flat_map(|t| prop::collection::vec(integer_matrix(3, 3), t)),
        cut in 0usize..7,
    ) {
        let t = cut.min(states.len());
        let prefix = prefix_sum_states(&states, t).unwrap();
        let suffix = suffix_sum_states(&states, t + 1).unwrap();
        let full = sum_states(&states).unwrap();
        prop_assert_eq!(prefix.add(&suffix).unwrap(), full);
    }

    #[test]
    fn prefix_plus_suffix_is_close_on_reals(
        states in (1usize..9).prop_flat_map(|t| prop::collection::vec(unit_matrix(4, 4), t)),
        cut in 0usize..9,
    ) {
        let t = cut.min(states.len());
        let prefix = prefix_sum_states(&states, t).unwrap();
        let suffix = suffix_sum_states(&states, t + 1).unwrap();
        let full = sum_states(&states).unwrap();
        prop_assert!(prefix.add(&suffix).unwrap().max_abs_diff(&full).unwrap() <= 1e-14);
    }

    #[test]
    fn masking_is_idempotent(s in (1usize..10).prop_flat_map(|n| unit_matrix(n, n))) {
        let mask = CausalMask::new(s.rows());
        let once = hadamard_mask(&s, &mask).unwrap();
        prop_assert_eq!(hadamard_mask(&once, &mask).unwrap(), once);
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..65, 1usize..65, 1usize..65, 1usize..65).prop_flat_map(|(m, k, l, n)| {
            (unit_matrix(m, k), unit_matrix(k, l), unit_matrix(l, n))
        })
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10);
    }

    #[test]
    fn right_product_matches_left_product(seed in any::<u64>(), n in 1usize..65, d in 1usize..9) {
        let q: Matrix = gen_data(seed, stream::QUERY, n, d);
        let k: Matrix = gen_data(seed, stream::KEY, n, d);
        let v: Matrix = gen_data(seed, stream::VALUE, n, d);
        let left = matmul(&matmul(&q, &transpose(&k)).unwrap(), &v).unwrap();
        let inst = AttentionInstance::new(q, k, v, false).unwrap();
        prop_assert!(linear_attn_serial(&inst).unwrap().max_abs_diff(&left).unwrap() <= 1e-10);
    }

    #[test]
    fn lasp2_matches_oracle(seed in any::<u64>(), (n, t) in split_shape(), d in 1usize..9, masked: bool) {
        let batch = SequenceBatch::<f64>::random(seed, 1, 1, n, d);
        let run = lasp2::run(
            &WorldConfig::pure_sp(t).unwrap(),
            &batch,
            None,
            Lasp2Options { masked, schedule: Schedule::Sequential },
        ).unwrap();
        let inst = AttentionInstance::from_qkv(batch.slots[0].clone(), masked);
        let expected = linear_attn_serial(&inst).unwrap();
        prop_assert!(run.outputs[0].max_abs_diff(&expected).unwrap() <= 1e-10);
    }

    #[test]
    fn lasp1_and_lasp2_agree_bitwise(seed in any::<u64>(), (n, t) in split_shape(), d in 1usize..6) {
        let batch = SequenceBatch::<f64>::random(seed, 1, 2, n, d);
        let d_out = batch.random_grad_out(seed);
        let cfg = WorldConfig::pure_sp(t).unwrap();
        let a = lasp1::run(&cfg, &batch, Some(&d_out), true).unwrap();
        let b = lasp2::run(&cfg, &batch, Some(&d_out), Lasp2Options::masked()).unwrap();
        prop_assert_eq!(a.outputs, b.outputs);
        prop_assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn overlap_changes_nothing(seed in any::<u64>(), (n, t) in split_shape(), d in 1usize..6) {
        let batch = SequenceBatch::<f64>::random(seed, 2, 1, n, d);
        let d_out = batch.random_grad_out(seed);
        let cfg = WorldConfig::pure_sp(t).unwrap();
        let a = lasp2::run(&cfg, &batch, Some(&d_out), Lasp2Options::masked()).unwrap();
        let b = lasp2::run(&cfg, &batch, Some(&d_out), Lasp2Options::masked().overlapped()).unwrap();
        prop_assert_eq!(a.outputs, b.outputs);
        prop_assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn gathered_bytes_ignore_sequence_length(
        b in 1usize..3, h in 1usize..3, d in 1usize..6, c in 1usize..4, masked: bool,
    ) {
        let t = 4;
        let p = CostParams { world: 4, sp: 4, batch: b as u64, heads: h as u64, dim: d as u64, iterations: 1, element_bytes: 8 };
        for n in [t * c, 2 * t * c] {
            let batch = SequenceBatch::<f64>::random(1, b, h, n, d);
            let d_out = batch.random_grad_out(1);
            let opts = Lasp2Options { masked, schedule: Schedule::Sequential };
            let run = lasp2::run(&WorldConfig::pure_sp(t).unwrap(), &batch, Some(&d_out), opts).unwrap();
            for ledger in &run.comm.ledgers {
                prop_assert_eq!(ledger.gather_contributions(), vec![traffic_per_step(&p); 2]);
            }
        }
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), (n, t) in split_shape(), masked: bool) {
        let batch = SequenceBatch::<f64>::random(seed, 1, 1, n, 3);
        let d_out = batch.random_grad_out(seed);
        let cfg = WorldConfig::pure_sp(t).unwrap();
        let opts = Lasp2Options { masked, schedule: Schedule::Overlapped };
        let a = lasp2::run(&cfg, &batch, Some(&d_out), opts).unwrap();
        let b = lasp2::run(&cfg, &batch, Some(&d_out), opts).unwrap();
        prop_assert_eq!(a.outputs, b.outputs);
        prop_assert_eq!(a.grads, b.grads);
        prop_assert_eq!(a.comm.totals, b.comm.totals);
        prop_assert_eq!(a.comm.simulated_time.to_bits(), b.comm.simulated_time.to_bits());
    }

    #[test]
    fn all_gather_delivers_the_same_list_everywhere(world in 1usize..7, rows in 1usize..4) {
        let run = spawn(&WorldConfig::pure_sp(world).unwrap(), |ctx| {
            let mine: Matrix = gen_data(ctx.rank() as u64, stream::MATRIX, rows, 2);
            ctx.all_gather("check", vec![mine])
        }).unwrap();
        for r in &run.results {
            prop_assert_eq!(r, &run.results[0]);
        }
        prop_assert_eq!(run.comm.totals.bytes_sent, (world * rows * 2 * 8) as u64);
    }
}

#[test]
fn idle_program_records_nothing() {
    let run = spawn::<f64, _, _>(&WorldConfig::pure_sp(4).unwrap(), |ctx| Ok(ctx.rank())).unwrap();
    assert!(run.comm.totals.is_zero());
    assert!(run.comm.ledgers.iter().all(|l| l.stats.is_zero()));
}
