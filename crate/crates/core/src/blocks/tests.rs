use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{compare, GradcheckOptions};

fn small_cfg() -> BlockConfig {
    BlockConfig {
        d_att: 8,
        n_heads: 2,
        d_ff: 12,
        conv_kernel: 3,
        dropout: 0.0,
        ..BlockConfig::default()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Randomizes every parameter so that zero-initialized biases do not hide
/// gradient errors.
fn jitter(params: &mut ParameterSet<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.slots().into_iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn eval_with<R>(
    params: &ParameterSet<f64>,
    f: impl for<'g> Fn(&Ctx<'g, f64>) -> Result<R>,
) -> R {
    let g = Graph::new();
    let cx = Ctx::new(&g, params, false, 0.0);
    f(&cx).unwrap()
}

fn check_grads(
    params: &mut ParameterSet<f64>,
    f: &dyn for<'g> Fn(&Ctx<'g, f64>) -> Result<Var<'g, f64>>,
) -> f64 {
    let analytic = {
        let g = Graph::new();
        let cx = Ctx::new(&g, params, false, 0.0);
        let loss = f(&cx).unwrap();
        let mut grads = g.backward(loss).unwrap();
        cx.bound().slot_grads(&mut grads)
    };
    let report = compare(
        params,
        &analytic,
        |p| Ok(eval_with(p, |cx| Ok(f(cx)?.item()))),
        &GradcheckOptions::default(),
    )
    .unwrap();
    report.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}

/// Weighted sum so every output coordinate has a distinct sensitivity.
fn probe<'g>(cx: &Ctx<'g, f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cx.constant(random(&y.shape(), &mut rng));
    Ok(y.mul(w)?.sum())
}

#[test]
fn config_validation() {
    assert!(BlockConfig::default().validate().is_ok());
    let bad_heads = BlockConfig { n_heads: 3, ..BlockConfig::default() };
    assert!(matches!(bad_heads.validate(), Err(Error::Config { .. })));
    let even = BlockConfig { conv_kernel: 4, ..BlockConfig::default() };
    assert!(even.validate().is_err());
    let drop = BlockConfig { dropout: 1.0, ..BlockConfig::default() };
    assert!(drop.validate().is_err());
}

#[test]
fn init_depends_on_name_not_order() {
    let mut a = ParameterSet::<f64>::new();
    let mut b = ParameterSet::<f64>::new();
    {
        let mut pa = ParamBuilder::new(&mut a, 5);
        pa.linear("x", 3, 4, true).unwrap();
        pa.linear("y", 3, 4, true).unwrap();
    }
    {
        let mut pb = ParamBuilder::new(&mut b, 5);
        pb.linear("y", 3, 4, true).unwrap();
        pb.linear("x", 3, 4, true).unwrap();
    }
    assert_eq!(a.by_name("x.weight").unwrap().data(), b.by_name("x.weight").unwrap().data());
    assert_ne!(a.by_name("x.weight").unwrap().data(), a.by_name("y.weight").unwrap().data());
}

#[test]
fn single_frame_attends_to_itself() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let att = RelSelfAttention::new(&mut ParamBuilder::new(&mut params, 1), "att", &cfg).unwrap();
    jitter(&mut params, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 8], &mut rng);
    let (y, w, expect) = eval_with(&params, |cx| {
        let xv = cx.constant(x.clone());
        let (y, w) = att.forward_with_weights(cx, xv, &FrameMask::all_valid(1))?;
        let v = att.value.forward(cx, att.norm.forward(cx, xv)?)?;
        let expect = xv.add(att.out.forward(cx, v)?)?;
        Ok((y.value(), w, expect.value()))
    });
    assert!(w.data().iter().all(|&p| p == 1.0));
    for (a, b) in y.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_frames_get_zero_weight() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let att = RelSelfAttention::new(&mut ParamBuilder::new(&mut params, 1), "att", &cfg).unwrap();
    jitter(&mut params, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[5, 8], &mut rng);
    let mask = FrameMask::from_flags(vec![true, false, true, true, false]);
    let w = eval_with(&params, |cx| Ok(att.forward_with_weights(cx, cx.constant(x.clone()), &mask)?.1));
    for row in w.data().chunks(5) {
        assert_eq!(row[1], 0.0);
        assert_eq!(row[4], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mask_length_mismatch_is_shape_error() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let att = RelSelfAttention::new(&mut ParamBuilder::new(&mut params, 1), "att", &cfg).unwrap();
    let g = Graph::new();
    let cx = Ctx::new(&g, &params, false, 0.0);
    let x = cx.constant(Tensor::zeros(&[3, 8]));
    assert!(matches!(att.forward(&cx, x, &FrameMask::all_valid(4)), Err(Error::Shape(_))));
}

#[test]
fn permutation_equivariant_without_position_terms() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let att = RelSelfAttention::new(&mut ParamBuilder::new(&mut params, 1), "att", &cfg).unwrap();
    jitter(&mut params, 6);
    for id in [att.pos.weight, att.pos_bias_u, att.pos_bias_v] {
        let shape = params.get(id).shape().to_vec();
        params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 8], &mut rng);
    let perm = [2usize, 0, 3, 1];
    let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |x: &Tensor<f64>| {
        eval_with(&params, |cx| Ok(att.forward(cx, cx.constant(x.clone()), &FrameMask::all_valid(4))?.value()))
    };
    let (y, py) = (run(&x), run(&px));
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in py.row(k).iter().zip(y.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn relative_positions_break_permutation_symmetry() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let att = RelSelfAttention::new(&mut ParamBuilder::new(&mut params, 1), "att", &cfg).unwrap();
    jitter(&mut params, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 8], &mut rng);
    let rev = Tensor::from_rows(&[x.row(2).to_vec(), x.row(1).to_vec(), x.row(0).to_vec()]).unwrap();
    let run = |x: &Tensor<f64>| {
        eval_with(&params, |cx| Ok(att.forward(cx, cx.constant(x.clone()), &FrameMask::all_valid(3))?.value()))
    };
    let (y, ry) = (run(&x), run(&rev));
    let gap: f64 = ry.row(0).iter().zip(y.row(2)).map(|(a, b)| (a - b).abs()).sum();
    assert!(gap > 1e-6);
}

#[test]
fn relative_table_is_centered() {
    let t = relative_table_probe(3, 4);
    // Middle row encodes distance zero.
    assert_eq!(t.row(2), &[0.0, 1.0, 0.0, 1.0]);
    assert!((t.row(0)[0] - 2f64.sin()).abs() < 1e-15);
}

fn relative_table_probe(t: usize, d: usize) -> Tensor<f64> {
    super::attention::relative_table(t, d)
}

#[test]
fn cross_attention_contracts() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let ca = CrossAttention::new(&mut ParamBuilder::new(&mut params, 1), "ca", &cfg).unwrap();
    jitter(&mut params, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&[6, 8], &mut rng);
    let one = random(&[1, 8], &mut rng);
    let (y, w) = eval_with(&params, |cx| {
        let (y, w) = ca.forward_with_weights(cx, cx.constant(q.clone()), cx.constant(one.clone()), &FrameMask::all_valid(1))?;
        Ok((y.value(), w))
    });
    assert_eq!(y.shape(), &[6, 8]);
    assert!(w.data().iter().all(|&p| p == 1.0));

    let kv = random(&[3, 8], &mut rng);
    let mask = FrameMask::prefix(3, 2);
    let w = eval_with(&params, |cx| {
        Ok(ca.forward_with_weights(cx, cx.constant(q.clone()), cx.constant(kv.clone()), &mask)?.1)
    });
    for row in w.data().chunks(3) {
        assert_eq!(row[2], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let g = Graph::new();
    let cx = Ctx::new(&g, &params, false, 0.0);
    let empty = cx.constant(Tensor::zeros(&[0, 8]));
    let r = ca.forward(&cx, cx.constant(q.clone()), empty, &FrameMask::all_valid(0));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn frontend_lengths() {
    assert_eq!(subsampled_len(16), 4);
    assert_eq!(subsampled_len(4), 1);
    assert_eq!(subsampled_len(17), 5);
    for t in 4..200 {
        let expect = ((t - 1) / 2 + 1 - 1) / 2 + 1;
        assert_eq!(subsampled_len(t), expect);
        assert!(subsampled_len(t) * 4 >= t);
    }
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let fe = Frontend::new(&mut ParamBuilder::new(&mut params, 1), "fe", 5, &cfg).unwrap();
    let (shape, mask) = eval_with(&params, |cx| {
        let (y, m) = fe.forward(cx, cx.constant(Tensor::zeros(&[16, 5])), &FrameMask::all_valid(16))?;
        Ok((y.shape(), m))
    });
    assert_eq!(shape, vec![4, 8]);
    assert_eq!(mask.valid_count(), 4);
    let g = Graph::new();
    let cx = Ctx::new(&g, &params, false, 0.0);
    let r = fe.forward(&cx, cx.constant(Tensor::zeros(&[3, 5])), &FrameMask::all_valid(3));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn zero_head_gives_standard_normal() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let head = GaussianHead::new(&mut ParamBuilder::new(&mut params, 1), "h", 3, &cfg).unwrap();
    let ids: Vec<_> = params.slots().into_iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = params.get(id).shape().to_vec();
        params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let out = eval_with(&params, |cx| Ok(head.forward_packed(cx, cx.constant(Tensor::full(&[4, 8], 0.7)))?.value()));
    assert_eq!(out.shape(), &[4, 6]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

struct Stack {
    frontend: Frontend,
    layers: Vec<ConformerLayer>,
    decoder: TransformerCaLayer,
    head: GaussianHead,
}

fn stack(params: &mut ParameterSet<f64>) -> Stack {
    let cfg = small_cfg();
    let mut b = ParamBuilder::new(params, 11);
    Stack {
        frontend: Frontend::new(&mut b, "fe", 3, &cfg).unwrap(),
        layers: (0..2)
            .map(|i| ConformerLayer::new(&mut b, &format!("enc.{i}"), &cfg).unwrap())
            .collect(),
        decoder: TransformerCaLayer::new(&mut b, "dec", &cfg).unwrap(),
        head: GaussianHead::new(&mut b, "head", 2, &cfg).unwrap(),
    }
}

fn run_stack<'g>(
    s: &Stack,
    cx: &Ctx<'g, f64>,
    x: &Tensor<f64>,
    x_mask: &FrameMask,
    tokens: &Tensor<f64>,
    tok_mask: &FrameMask,
) -> Result<Var<'g, f64>> {
    let (mut h, mask) = s.frontend.forward(cx, cx.constant(x.clone()), x_mask)?;
    for layer in &s.layers {
        h = layer.forward(cx, h, &mask)?;
    }
    let c = cx.constant(tokens.clone());
    let h = s.decoder.forward(cx, h, &mask, c, tok_mask)?;
    s.head.forward_packed(cx, h)
}

#[test]
fn stack_gradients_match_finite_differences() {
    let mut params = ParameterSet::<f64>::new();
    let s = stack(&mut params);
    jitter(&mut params, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[9, 3], &mut rng);
    let tokens = random(&[2, 8], &mut rng);
    let worst = check_grads(&mut params, &|cx| {
        let y = run_stack(&s, cx, &x, &FrameMask::all_valid(9), &tokens, &FrameMask::all_valid(2))?;
        probe(cx, y, 14)
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn padding_never_reaches_valid_outputs() {
    let mut params = ParameterSet::<f64>::new();
    let s = stack(&mut params);
    jitter(&mut params, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&[10, 3], &mut rng);
    let tokens = random(&[2, 8], &mut rng);
    let base = eval_with(&params, |cx| {
        Ok(run_stack(&s, cx, &x, &FrameMask::all_valid(10), &tokens, &FrameMask::all_valid(2))?.value())
    });
    let mut padded_x = x.data().to_vec();
    padded_x.extend((0..9 * 3).map(|_| rng.random_range(-5.0..5.0)));
    let padded_x = Tensor::new(&[19, 3], padded_x).unwrap();
    let mut padded_t = tokens.data().to_vec();
    padded_t.extend((0..8).map(|_| rng.random_range(-5.0..5.0)));
    let padded_t = Tensor::new(&[3, 8], padded_t).unwrap();
    let padded = eval_with(&params, |cx| {
        Ok(run_stack(&s, cx, &padded_x, &FrameMask::prefix(19, 10), &padded_t, &FrameMask::prefix(3, 2))?.value())
    });
    let n = base.len();
    assert_eq!(&padded.data()[..n], base.data());
}

#[test]
fn dropout_only_in_training() {
    let mut params = ParameterSet::<f64>::new();
    let s = stack(&mut params);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[8, 3], &mut rng);
    let tokens = random(&[2, 8], &mut rng);
    let run = |training: bool, seed: u64| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &params, training, 0.3);
        cx.set_stream(seed);
        run_stack(&s, &cx, &x, &FrameMask::all_valid(8), &tokens, &FrameMask::all_valid(2))
            .unwrap()
            .value()
    };
    assert_eq!(run(false, 1).data(), run(false, 2).data());
    assert_eq!(run(true, 1).data(), run(true, 1).data());
    assert_ne!(run(true, 1).data(), run(true, 2).data());
}

#[test]
fn blocks_preserve_shape() {
    let cfg = small_cfg();
    let mut params = ParameterSet::<f64>::new();
    let mut b = ParamBuilder::new(&mut params, 1);
    let conf = ConformerLayer::new(&mut b, "c", &cfg).unwrap();
    let tca = TransformerCaLayer::new(&mut b, "t", &cfg).unwrap();
    let shapes = eval_with(&params, |cx| {
        let x = cx.constant(Tensor::full(&[7, 8], 0.1));
        let m = cx.constant(Tensor::full(&[3, 8], 0.2));
        let a = conf.forward(cx, x, &FrameMask::all_valid(7))?.shape();
        let b = tca.forward(cx, x, &FrameMask::all_valid(7), m, &FrameMask::all_valid(3))?.shape();
        Ok((a, b))
    });
    assert_eq!(shapes, (vec![7, 8], vec![7, 8]));
}
