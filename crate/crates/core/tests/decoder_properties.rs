//! Structural properties of the task interaction and task query blocks.

mod common;

use common::random_tensor;
use demt_core::decoder::{decoder_forward, task_interaction, task_query, DecoderParams};
use demt_core::mixer::{DeformedFeature, NormSettings};
use demt_core::params::Init;
use demt_core::{Ctx, Mode, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 9;
const C: usize = 4;

fn decoder(seed: u64) -> (ParamStore, DecoderParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DecoderParams::new(
        &mut store,
        &mut Init { rng: &mut rng },
        "decoder",
        C,
        2,
        NormSettings::default(),
    )
    .unwrap();
    (store, p)
}

fn features(tape: &mut Tape, tensors: &[Tensor]) -> Vec<DeformedFeature> {
    tensors
        .iter()
        .map(|t| DeformedFeature {
            tokens: tape.constant(t),
            spatial: (3, 3),
        })
        .collect()
}

fn task_maps(store: &mut ParamStore, p: &DecoderParams, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let feats = features(&mut tape, inputs);
    let mut cx = Ctx::new(&mut tape, store, Mode::Eval);
    let (_, aware) = decoder_forward(&mut cx, p, &feats).unwrap();
    aware.iter().map(|a| tape.value(a.map).to_vec()).collect()
}

#[test]
fn permuting_tasks_permutes_outputs_exactly() {
    for tasks in [2usize, 3] {
        for batch in [1usize, 2] {
            let (mut store, p) = decoder(tasks as u64);
            let inputs: Vec<Tensor> = (0..tasks)
                .map(|t| random_tensor(&[batch, N, C], 40 + t as u64))
                .collect();
            let base = task_maps(&mut store, &p, &inputs);
            let perm: Vec<usize> = (0..tasks).map(|i| (i + 1) % tasks).collect();
            let permuted: Vec<Tensor> = perm.iter().map(|&i| inputs[i].clone()).collect();
            let out = task_maps(&mut store, &p, &permuted);
            for (slot, &orig) in perm.iter().enumerate() {
                assert_eq!(out[slot], base[orig], "T={tasks} B={batch} slot {slot}");
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions_over_all_task_tokens() {
    let tasks = 3;
    let (mut store, p) = decoder(7);
    let inputs: Vec<Tensor> = (0..tasks)
        .map(|t| random_tensor(&[2, N, C], t as u64))
        .collect();
    let mut tape = Tape::new();
    let feats = features(&mut tape, &inputs);
    let mut cx = Ctx::new(&mut tape, &mut store, Mode::Eval);
    let (inter, aware) = decoder_forward(&mut cx, &p, &feats).unwrap();
    // Interaction: every one of the T·N tokens attends over all T·N tokens.
    assert_eq!(inter.attention.len(), 2 * 2);
    for &a in &inter.attention {
        let probs = tape.attention_probs(a).unwrap();
        assert_eq!(probs.len(), (tasks * N) * (tasks * N));
        for row in probs.chunks(tasks * N) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
    // Query: the task's own N tokens attend over the T·N interacted tokens.
    for task in &aware {
        for &a in &task.attention {
            let probs = tape.attention_probs(a).unwrap();
            assert_eq!(probs.len(), N * tasks * N);
            for row in probs.chunks(tasks * N) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn zero_query_smlp(store: &mut ParamStore, p: &DecoderParams) {
    for id in [p.query.smlp.norm.gamma, p.query.smlp.norm.beta] {
        store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

#[test]
fn zeroed_query_mlp_leaves_the_residual() {
    let (mut store, p) = decoder(3);
    zero_query_smlp(&mut store, &p);
    let inputs: Vec<Tensor> = (0..2).map(|t| random_tensor(&[2, N, C], 60 + t)).collect();
    let maps = task_maps(&mut store, &p, &inputs);
    for (map, input) in maps.iter().zip(&inputs) {
        assert_eq!(map.as_slice(), input.data());
    }
}

#[test]
fn queries_come_from_the_own_task_and_keys_from_the_interaction() {
    let (mut store, p) = decoder(4);
    let inputs: Vec<Tensor> = (0..2).map(|t| random_tensor(&[1, N, C], 80 + t)).collect();
    let mut tape = Tape::new();
    let feats = features(&mut tape, &inputs);
    let mut cx = Ctx::new(&mut tape, &mut store, Mode::Eval);
    let inter = task_interaction(&mut cx, &p.interaction, &feats).unwrap();
    let own = task_query(&mut cx, &p.query, &feats[0], &inter).unwrap();
    // A different query source with the same interacted keys changes the result,
    let other = task_query(&mut cx, &p.query, &feats[1], &inter).unwrap();
    // and so do different keys with the same queries.
    let shifted_tokens: Var = {
        let bumped = cx.tape.constant(&random_tensor(&[1, 2 * N, C], 99));
        cx.tape.add(inter.tokens, bumped).unwrap()
    };
    let mut shifted = inter.clone();
    shifted.tokens = shifted_tokens;
    let rekeyed = task_query(&mut cx, &p.query, &feats[0], &shifted).unwrap();
    let own_v = tape.value(own.map).to_vec();
    assert_ne!(own_v, tape.value(other.map));
    assert_ne!(own_v, tape.value(rekeyed.map));
    assert_eq!(tape.shape(own.map), &[1, 3, 3, C]);
}
