//! Worked examples for each module, checked end to end.

use lasp_core::comm::{TraceKind, WorldConfig};
use lasp_core::costmodel::{
    comm_steps_per_iteration, state_param_count, total_traffic, traffic_per_step, CostParams,
    Method,
};
use lasp_core::hybrid::{self, max_stack_diff, serial_stack_oracle, LayerKind, ModelSpec};
use lasp_core::lasp2::{self, Lasp2Options};
use lasp_core::numerics::Matrix;
use lasp_core::oracle::{
    finite_diff_grad, linear_attn_serial, linear_attn_serial_backward, max_relative_error,
    softmax_attn_reference, AttentionInstance,
};
use lasp_core::{lasp1, standard_sp, SequenceBatch};

fn world(t: usize) -> WorldConfig {
    WorldConfig::pure_sp(t).unwrap()
}

#[test]
fn lasp2_single_rank_unmasked_is_the_oracle_bit_for_bit() {
    let batch = SequenceBatch::<f64>::random(10, 1, 1, 16, 4);
    let d_out = batch.random_grad_out(10);
    let run = lasp2::run(&world(1), &batch, Some(&d_out), Lasp2Options::unmasked()).unwrap();
    let inst = AttentionInstance::from_qkv(batch.slots[0].clone(), false);
    assert_eq!(run.outputs[0], linear_attn_serial(&inst).unwrap());
    assert_eq!(
        run.grads.unwrap()[0],
        linear_attn_serial_backward(&inst, &d_out[0]).unwrap()
    );
}

#[test]
fn lasp2_four_ranks_within_tight_tolerance() {
    let batch = SequenceBatch::<f64>::random(11, 1, 1, 16, 4);
    let d_out = batch.random_grad_out(11);
    for masked in [false, true] {
        let opts = Lasp2Options {
            masked,
            ..Lasp2Options::default()
        };
        let run = lasp2::run(&world(4), &batch, Some(&d_out), opts).unwrap();
        let inst = AttentionInstance::from_qkv(batch.slots[0].clone(), masked);
        let o = linear_attn_serial(&inst).unwrap();
        let g = linear_attn_serial_backward(&inst, &d_out[0]).unwrap();
        assert!(run.outputs[0].max_abs_diff(&o).unwrap() <= 1e-12);
        assert!(run.grads.unwrap()[0].max_abs_diff(&g).unwrap() <= 1e-12);
    }
}

#[test]
fn lasp2_zero_upstream_gives_zero_gradients() {
    let batch = SequenceBatch::<f64>::random(12, 1, 2, 8, 3);
    let zeros = vec![Matrix::zeros(8, 3); 2];
    for opts in [Lasp2Options::masked(), Lasp2Options::unmasked()] {
        let run = lasp2::run(&world(2), &batch, Some(&zeros), opts).unwrap();
        assert!(run.grads.unwrap().iter().all(|g| g.max_abs() == 0.0));
    }
}

#[test]
fn lasp2_last_chunk_keys_and_values_see_only_their_own_queries() {
    // Gradients of the last chunk's K and V do not depend on earlier
    // chunks' upstream gradients.
    let batch = SequenceBatch::<f64>::random(13, 1, 1, 8, 2);
    let mut d_out = batch.random_grad_out(13);
    let a = lasp2::run(&world(4), &batch, Some(&d_out), Lasp2Options::masked()).unwrap();
    for i in 0..6 {
        for j in 0..2 {
            d_out[0].set(i, j, 0.0);
        }
    }
    let b = lasp2::run(&world(4), &batch, Some(&d_out), Lasp2Options::masked()).unwrap();
    let (ga, gb) = (&a.grads.unwrap()[0], &b.grads.unwrap()[0]);
    assert_eq!(ga.dk.slice_rows(6, 8), gb.dk.slice_rows(6, 8));
    assert_eq!(ga.dv.slice_rows(6, 8), gb.dv.slice_rows(6, 8));
}

#[test]
fn lasp2_with_data_parallel_groups() {
    let batch = SequenceBatch::<f64>::random(14, 2, 2, 8, 3);
    let d_out = batch.random_grad_out(14);
    let cfg = WorldConfig::new(4, 2).unwrap();
    let run = lasp2::run(&cfg, &batch, Some(&d_out), Lasp2Options::masked()).unwrap();
    let grads = run.grads.unwrap();
    for (slot, qkv) in batch.slots.iter().enumerate() {
        let inst = AttentionInstance::from_qkv(qkv.clone(), true);
        let o = linear_attn_serial(&inst).unwrap();
        assert!(run.outputs[slot].max_abs_diff(&o).unwrap() <= 1e-12);
        let g = linear_attn_serial_backward(&inst, &d_out[slot]).unwrap();
        assert!(grads[slot].max_abs_diff(&g).unwrap() <= 1e-12);
    }
    // one launch per pass in each of the two SP groups
    assert_eq!(run.comm.totals.allgather_launches, 4);
    for l in &run.comm.ledgers {
        assert_eq!(
            l.gather_contributions(),
            vec![(2 * 3 * 3 * 8) as u64; 2]
        );
    }
}

#[test]
fn lasp2_overlap_trace_on_every_rank() {
    let batch = SequenceBatch::<f64>::random(15, 1, 1, 16, 4);
    let run = lasp2::run(&world(4), &batch, None, Lasp2Options::masked().overlapped()).unwrap();
    assert_eq!(
        lasp2::overlapped_ranks(&run.comm, 4, lasp2::FORWARD_TAG),
        vec![0, 1, 2, 3]
    );
    let single = lasp2::run(&world(1), &batch, None, Lasp2Options::masked().overlapped()).unwrap();
    assert!(single
        .comm
        .trace
        .first(0, TraceKind::GatherCompleted, lasp2::FORWARD_TAG)
        .is_some());
}

#[test]
fn lasp1_ring_trace_is_sequential_in_both_directions() {
    let batch = SequenceBatch::<f64>::random(16, 1, 1, 8, 2);
    let d_out = batch.random_grad_out(16);
    let run = lasp1::run(&world(4), &batch, Some(&d_out), true).unwrap();
    let trace = &run.comm.trace;
    for t in 1..4 {
        let sent = trace
            .first(t - 1, TraceKind::SendIssued, lasp1::FORWARD_TAG)
            .unwrap();
        let got = trace
            .first(t, TraceKind::RecvCompleted, lasp1::FORWARD_TAG)
            .unwrap();
        assert!(sent < got);
    }
    for t in 0..3 {
        let sent = trace
            .first(t + 1, TraceKind::SendIssued, lasp1::BACKWARD_TAG)
            .unwrap();
        let got = trace
            .first(t, TraceKind::RecvCompleted, lasp1::BACKWARD_TAG)
            .unwrap();
        assert!(sent < got);
    }
}

#[test]
fn gathered_kv_matches_softmax_reference_unmasked_too() {
    let batch = SequenceBatch::<f64>::random(17, 1, 1, 16, 4);
    for t in [1, 2, 4, 8] {
        let run = standard_sp::run(&world(t), &batch, None, false).unwrap();
        let inst = AttentionInstance::from_qkv(batch.slots[0].clone(), false);
        let o = softmax_attn_reference(&inst).unwrap();
        assert!(run.outputs[0].max_abs_diff(&o).unwrap() <= 1e-12);
    }
}

#[test]
fn cost_model_reference_values() {
    let p = |b, h, d, eb| CostParams {
        world: 64,
        sp: 64,
        batch: b,
        heads: h,
        dim: d,
        iterations: 1,
        element_bytes: eb,
    };
    assert_eq!(traffic_per_step(&p(16, 16, 2048, 2)), 2_147_483_648);
    assert_eq!(traffic_per_step(&p(16, 32, 4096, 2)), 17_179_869_184);
    assert_eq!(state_param_count(16, 16, 2048), 1_073_741_824);
    assert_eq!(state_param_count(16, 32, 4096), 8_589_934_592);
    assert_eq!(comm_steps_per_iteration(Method::Lasp1, 64).unwrap(), 126);
    let ratio = total_traffic(Method::Lasp1, &p(16, 16, 2048, 2)).unwrap()
        / total_traffic(Method::Lasp2, &p(16, 16, 2048, 2)).unwrap();
    assert_eq!(ratio, 63);
}

#[test]
fn hybrid_single_layer_equals_its_method() {
    let spec = ModelSpec::new("L", 4, 1, 1, 18).unwrap();
    let x = spec.random_inputs::<f64>(16);
    let w = &spec.weights[0];
    let project = |m: &Matrix| lasp_core::numerics::matmul(&x[0], m).unwrap();
    let qkv = lasp_core::Qkv::new(project(&w.wq), project(&w.wk), project(&w.wv)).unwrap();
    let batch = SequenceBatch::single(qkv);

    let stack = hybrid::run(&world(4), &spec, &x, None, true).unwrap();
    let direct = lasp2::run(&world(4), &batch, None, Lasp2Options::masked()).unwrap();
    assert_eq!(stack.outputs[0], direct.outputs[0]);

    let spec = ModelSpec {
        layers: vec![LayerKind::Standard],
        ..spec
    };
    let stack = hybrid::run(&world(4), &spec, &x, None, true).unwrap();
    let direct = standard_sp::run(&world(4), &batch, None, true).unwrap();
    assert_eq!(stack.outputs[0], direct.outputs[0]);
}

#[test]
fn hybrid_stack_equivalence_over_patterns_and_splits() {
    for pattern in ["L", "N", "LN", "LLLN", "LNLN LNLN"] {
        let spec = ModelSpec::new(pattern, 4, 2, 1, 19).unwrap();
        let x = spec.random_inputs::<f64>(16);
        let g = spec.random_grad_out::<f64>(16);
        for causal in [true, false] {
            let oracle = serial_stack_oracle(&spec, &x, Some(&g), causal).unwrap();
            for t in [1, 2, 4] {
                let run = hybrid::run(&world(t), &spec, &x, Some(&g), causal).unwrap();
                let diff = max_stack_diff(&run, &oracle).unwrap();
                assert!(diff <= 1e-9, "{pattern} T={t} causal={causal}: {diff}");
                assert_eq!(
                    run.comm.totals.allgather_launches,
                    spec.launches_per_iteration()
                );
            }
        }
    }
}

#[test]
fn hybrid_single_rank_bidirectional_is_the_oracle_bit_for_bit() {
    for pattern in ["L", "N", "NN", "LNL"] {
        let spec = ModelSpec::new(pattern, 4, 1, 2, 20).unwrap();
        let x = spec.random_inputs::<f64>(8);
        let g = spec.random_grad_out::<f64>(8);
        let run = hybrid::run(&world(1), &spec, &x, Some(&g), false).unwrap();
        let oracle = serial_stack_oracle(&spec, &x, Some(&g), false).unwrap();
        assert_eq!(max_stack_diff(&run, &oracle).unwrap(), 0.0, "{pattern}");
    }
}

#[test]
fn hybrid_two_softmax_layers_compose() {
    let spec = ModelSpec::new("NN", 4, 1, 1, 21).unwrap();
    let x = spec.random_inputs::<f64>(8);
    let stack = serial_stack_oracle(&spec, &x, None, true).unwrap();
    let mut h = x[0].clone();
    for w in &spec.weights {
        let p = |m: &Matrix| lasp_core::numerics::matmul(&h, m).unwrap();
        let inst = AttentionInstance::new(p(&w.wq), p(&w.wk), p(&w.wv), true).unwrap();
        h = softmax_attn_reference(&inst).unwrap();
    }
    assert!(stack.outputs[0].max_abs_diff(&h).unwrap() <= 1e-15);
}

#[test]
fn hybrid_weight_gradients_match_finite_differences() {
    let spec = ModelSpec::new("L", 4, 1, 1, 22).unwrap();
    let x = spec.random_inputs::<f64>(8);
    let g = spec.random_grad_out::<f64>(8);
    let run = hybrid::run(&world(1), &spec, &x, Some(&g), true).unwrap();
    let dw = &run.weight_grads.unwrap()[0];
    for (which, analytic) in [(0, &dw.wq), (1, &dw.wk), (2, &dw.wv)] {
        let fd = finite_diff_grad(
            |w| {
                let mut s = spec.clone();
                match which {
                    0 => s.weights[0].wq = w.clone(),
                    1 => s.weights[0].wk = w.clone(),
                    _ => s.weights[0].wv = w.clone(),
                }
                hybrid::run(&world(1), &s, &x, None, true)?.outputs[0].dot(&g[0])
            },
            [
                &spec.weights[0].wq,
                &spec.weights[0].wk,
                &spec.weights[0].wv,
            ][which],
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(analytic, &fd).unwrap() <= 1e-6);
    }
}

#[test]
fn hybrid_rejects_bad_patterns() {
    assert!(matches!(
        ModelSpec::new("LLQN", 4, 1, 1, 0),
        Err(lasp_core::Error::InvalidPattern('Q'))
    ));
}
