use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 16,
        max_seq_len: 12,
        max_decode_len: 5,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn config_validation() {
    assert!(tiny().validate().is_ok());
    assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
    assert!(ModelConfig { n_enc_layers: 0, ..tiny() }.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn encode_segment_shape_and_determinism() {
    let model = Model::new(tiny(), 1).unwrap();
    let q = [5, 6];
    let c = [7, 8, 9, 10, 11];
    let mut net = model.net();
    let (a, bounds) = net.encode_segment(&q, &c).unwrap();
    let (b, _) = net.encode_segment(&q, &c).unwrap();
    assert_eq!(net.graph.shape(a), &[q.len() + 1 + c.len(), 8]);
    assert_eq!(net.graph.value(a), net.graph.value(b));
    assert_eq!(bounds.question, 0..2);
    assert_eq!(bounds.sep, Some(2));
    assert_eq!(bounds.context, 3..8);
    assert_eq!(bounds.truncated, 0);
}

#[test]
fn overlong_segment_truncates_passage_tail() {
    let model = Model::new(tiny(), 1).unwrap();
    let mut net = model.net();
    let passage: Vec<Token> = (4..19).collect();
    let (states, bounds) = net.encode_segment(&[5, 6, 7], &passage).unwrap();
    assert_eq!(net.graph.value(states).rows(), 12);
    assert_eq!(bounds.question, 0..3);
    assert_eq!(bounds.truncated, passage.len() - 8);
    assert_eq!(&bounds.tokens[4..], &passage[..8]);
    // a question that cannot fit is rejected rather than truncated
    assert!(net.encode_segment(&[5; 12], &passage).is_err());
}

#[test]
fn passages_are_encoded_independently() {
    let model = Model::new(tiny(), 2).unwrap();
    let q = vec![5, 6];
    let p1 = vec![7, 8, 9, 10];
    let p2 = vec![11, 12, 13];
    let p2b = vec![14, 15, 16, 17, 18];
    let mut net = model.net();
    let a = net.encode_example(&q, &[p1.clone(), p2]).unwrap();
    let b = net.encode_example(&q, &[p1.clone(), p2b]).unwrap();
    let rows = a.boundaries.segments[0].len();
    let va = net.graph.value(a.states).data()[..rows * 8].to_vec();
    let vb = net.graph.value(b.states).data()[..rows * 8].to_vec();
    assert_eq!(va, vb);

    // batched encoding agrees with encoding the segment alone
    let (alone, _) = net.encode_segment(&q, &p1).unwrap();
    assert_eq!(net.graph.value(alone).data(), va.as_slice());
}

#[test]
fn fuse_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let s1 = g.constant(random_tensor(&mut rng, &[5, 4]));
    let s2 = g.constant(random_tensor(&mut rng, &[7, 4]));
    let model = Model::new(tiny(), 1).unwrap();
    let mut net = model.net();
    let v1 = net.graph.constant(g.value(s1).clone());
    let v2 = net.graph.constant(g.value(s2).clone());
    let seg = |n: usize| SegmentBounds::new(0, 0, 1, [vec![5, SEP], vec![6; n - 2]].concat(), 0);

    let one = net.fuse(vec![(v1, seg(5))]).unwrap();
    assert_eq!(net.graph.value(one.states), g.value(s1));
    assert_eq!(one.boundaries.segments.len(), 1);

    let two = net.fuse(vec![(v1, seg(5)), (v2, seg(7))]).unwrap();
    assert_eq!(two.boundaries.segments[0].span, 0..5);
    assert_eq!(two.boundaries.segments[1].span, 5..12);
    assert_eq!(two.boundaries.segments[1].context, 7..12);
    assert_eq!(two.boundaries.locate(8), Some((1, 1)));
    assert_eq!(two.boundaries.locate(5), None);
    let fused = net.graph.value(two.states);
    for j in [0usize, 4, 5, 9, 11] {
        let want = if j < 5 { g.value(s1).row(j) } else { g.value(s2).row(j - 5) };
        assert_eq!(fused.row(j), want);
    }
    assert!(net.fuse(vec![]).is_err());
}

fn attn_vars(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, zero_qk: bool) -> AttnVars {
    let mut w = |zero: bool| {
        let t = if zero { Tensor::zeros(&[d, d]) } else { random_tensor(rng, &[d, d]) };
        g.constant(t)
    };
    AttnVars {
        w_q: w(zero_qk),
        w_k: w(zero_qk),
        w_v: w(false),
        w_o: w(false),
    }
}

#[test]
fn cross_attention_zero_projection_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let layer = attn_vars(&mut g, &mut rng, 8, true);
    let states = g.constant(random_tensor(&mut rng, &[9, 8]));
    let h = g.constant(random_tensor(&mut rng, &[3, 8]));
    let fused = FusedEncoding {
        states,
        offset: 0,
        boundaries: Boundaries {
            segments: vec![SegmentBounds::new(0, 0, 1, vec![4, SEP, 5, 6, 7, 8, 9, 10, 11], 0)],
        },
    };
    let (out, records) = cross_attention(&mut g, h, &fused, &layer, 2).unwrap();
    assert_eq!(g.shape(out), &[3, 8]);
    assert_eq!(records.len(), 3);
    for r in &records {
        for p in r.probs_avg.iter().chain(r.probs_per_head.iter().flatten()) {
            assert!((p - 1.0 / 9.0).abs() < 1e-15);
        }
    }
}

#[test]
fn cross_attention_single_position_has_all_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let layer = attn_vars(&mut g, &mut rng, 8, false);
    let states = g.constant(random_tensor(&mut rng, &[1, 8]));
    let h = g.constant(random_tensor(&mut rng, &[2, 8]));
    let fused = FusedEncoding {
        states,
        offset: 0,
        boundaries: Boundaries {
            segments: vec![SegmentBounds::new(0, 0, 0, vec![4], 0)],
        },
    };
    let (_, records) = cross_attention(&mut g, h, &fused, &layer, 4).unwrap();
    for r in records {
        assert_eq!(r.probs_avg, vec![1.0]);
    }
}

#[test]
fn decode_records_cover_every_position_and_sum_to_one() {
    let model = Model::new(tiny(), 6).unwrap();
    let mut net = model.net();
    let fused = net
        .encode_example(&[5, 6], &[vec![7, 8, 9], vec![10, 11, 12, 13], vec![14]])
        .unwrap();
    let (logits, records) = net.decode_forward(&[BOS, 9, 10, 11], &fused).unwrap();
    assert_eq!(net.graph.shape(logits), &[4, 20]);
    assert_eq!(records.len(), 4);
    for r in &records {
        assert_eq!(r.probs_avg.len(), fused.len());
        assert!((r.probs_avg.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let n = r.probs_per_head.len() as f64;
        for j in 0..fused.len() {
            let mut s = 0.0;
            for h in &r.probs_per_head {
                s += h[j];
            }
            assert_eq!(r.probs_avg[j], s / n);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let model = Model::new(tiny(), 7).unwrap();
    let mut net = model.net();
    let fused = net.encode_example(&[5], &[vec![7, 8, 9, 10]]).unwrap();
    let (a, ra) = net.decode_forward(&[BOS, 9, 10, 11, 12], &fused).unwrap();
    let (b, rb) = net.decode_forward(&[BOS, 9, 10, 17, 12], &fused).unwrap();
    let (va, vb) = (net.graph.value(a), net.graph.value(b));
    for i in 0..3 {
        assert_eq!(va.row(i), vb.row(i));
        assert_eq!(ra[i], rb[i]);
    }
    assert_ne!(va.row(3), vb.row(3));
}

#[test]
fn decode_contract_errors() {
    let model = Model::new(tiny(), 7).unwrap();
    let mut net = model.net();
    let fused = net.encode_example(&[5], &[vec![7, 8]]).unwrap();
    assert!(net.decode_forward(&[9, 10], &fused).is_err());
    assert!(net.decode_forward(&[BOS, 4, 4, 4, 4, 4], &fused).is_err());
    assert!(net.decode_forward(&[BOS, 99], &fused).is_err());
}

#[test]
fn batched_decode_matches_single() {
    let model = Model::new(tiny(), 8).unwrap();
    let mut net = model.net();
    let q1 = vec![5, 6];
    let q2 = vec![7];
    let ps1 = vec![vec![8, 9, 10], vec![11, 12]];
    let ps2 = vec![vec![13, 14, 15, 16]];
    let fused = net.encode_examples(&[(&q1, &ps1), (&q2, &ps2)]).unwrap();
    let out = net
        .decode(&[
            DecodeRequest { prefix: &[BOS, 8], fused: &fused[0] },
            DecodeRequest { prefix: &[BOS, 13, 14], fused: &fused[1] },
        ])
        .unwrap();
    let batched = net.records(&out, 1);
    let batched_logits = net.graph.value(out.logits).row(out.row_starts[1] + 2).to_vec();

    let mut solo = model.net();
    let f2 = solo.encode_example(&q2, &ps2).unwrap();
    let (logits, records) = solo.decode_forward(&[BOS, 13, 14], &f2).unwrap();
    assert_eq!(records, batched);
    assert_eq!(solo.graph.value(logits).row(2), batched_logits.as_slice());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::new(tiny(), 9).unwrap();
    let bytes = write_checkpoint(&model).unwrap();
    assert_eq!(&bytes[..4], b"XAQA");
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(write_checkpoint(&back).unwrap(), bytes);

    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(read_checkpoint(&bad).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.xaqa");
    let model = Model::new(tiny(), 10).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}
