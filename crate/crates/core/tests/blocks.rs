mod common;

use common::*;
use yolite::blocks::*;
use yolite::tensor::*;

fn leaky(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |n, c, y, x| {
        let v = t.at(n, c, y, x);
        if v < 0.0 {
            v / 10.0
        } else {
            v
        }
    })
    .unwrap()
}

fn cbl_oracle(p: &ConvParams, x: &Tensor) -> Tensor {
    leaky(&conv_oracle(x, p))
}

fn cat(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    Tensor::from_fn(Shape::new(1, sa.c + sb.c, sa.h, sa.w), |n, c, y, x| {
        if c < sa.c {
            a.at(n, c, y, x)
        } else {
            b.at(n, c - sa.c, y, x)
        }
    })
    .unwrap()
}

fn randomize(rng: &mut TestRng, p: &mut ConvParams) {
    *p = rng.conv(p.in_channels, p.out_channels, p.kernel, p.stride, p.pad, p.bias.is_some(), p.bn.is_some());
}

fn randomize_all<T: ConvOwner>(rng: &mut TestRng, block: &mut T) {
    for (_, p) in block.convs_mut() {
        randomize(rng, p);
    }
}

#[test]
fn csp_block_matches_composed_oracle() {
    let mut rng = TestRng::new(21);
    for c in [2usize, 4, 8] {
        let mut b = CspBlock::new(c).unwrap();
        randomize_all(&mut rng, &mut b);
        let x = rng.tensor(Shape::new(1, c, 10, 10));
        let out = b.forward(&x, Exec::Parallel).unwrap();

        let x0 = cbl_oracle(&b.conv0, &x);
        let second = Tensor::from_fn(Shape::new(1, c / 2, 10, 10), |n, ch, y, xx| x0.at(n, ch + c / 2, y, xx)).unwrap();
        let x1 = cbl_oracle(&b.conv1, &second);
        let x2 = cbl_oracle(&b.conv2, &x1);
        let x3 = cbl_oracle(&b.conv3, &cat(&x2, &x1));
        let want = pool_oracle(&cat(&x0, &x3), PoolKind::Max, 2, 2);
        assert_eq!(bits(&out.route), bits(&x3));
        assert_eq!(bits(&out.out), bits(&want));
        assert_eq!(out.out.shape(), b.output_shape(x.shape()));
    }
}

#[test]
fn resblock_d_matches_composed_oracle() {
    let mut rng = TestRng::new(22);
    for c in [2usize, 4, 8] {
        let mut b = ResBlockD::new(c).unwrap();
        randomize_all(&mut rng, &mut b);
        let x = rng.tensor(Shape::new(1, c, 12, 12));
        let out = b.forward(&x, Exec::Parallel).unwrap();
        let a = conv_oracle(&cbl_oracle(&b.a_down, &cbl_oracle(&b.a_reduce, &x)), &b.a_expand);
        let p = conv_oracle(&pool_oracle(&x, PoolKind::Avg, 2, 2), &b.b_proj);
        let sum = Tensor::new(a.shape(), a.data().iter().zip(p.data()).map(|(u, v)| u + v).collect()).unwrap();
        assert_eq!(bits(&out), bits(&leaky(&sum)));
        assert_eq!(out.shape(), Shape::new(1, 2 * c, 6, 6));
    }
}

#[test]
fn cbam_with_zero_weights_is_quarter_of_input() {
    let mut rng = TestRng::new(23);
    for c in [4usize, 8, 16] {
        let cbam = Cbam::new(c, CBAM_REDUCTION).unwrap();
        let f = rng.tensor(Shape::new(1, c, 7, 9));
        let y = cbam.forward(&f, Exec::Serial).unwrap();
        for (a, b) in y.data().iter().zip(f.data()) {
            assert_eq!(*a, 0.25 * b);
        }
    }
}

#[test]
fn cbam_matches_equation_transcription() {
    let mut rng = TestRng::new(24);
    for case in 0..30 {
        let c = [4usize, 8, 12, 16][case % 4];
        let mut cbam = Cbam::new(c, CBAM_REDUCTION).unwrap();
        randomize_all(&mut rng, &mut cbam);
        let (h, w) = (rng.inclusive(3, 14), rng.inclusive(3, 14));
        let f = rng.tensor(Shape::new(1, c, h, w));
        let got = cbam.forward(&f, Exec::Parallel).unwrap();
        let want = cbam_oracle(&f, &cbam.fc1, &cbam.fc2, &cbam.spatial);
        for (i, (g, e)) in got.data().iter().zip(&want).enumerate() {
            assert!(rel_close(*g as f64, *e, 1e-5, 1e-2), "case {case} elem {i}: {g} vs {e}");
        }
    }
}

#[test]
fn aux_block_concatenates_first_conv_with_attended_second() {
    let mut rng = TestRng::new(25);
    let mut b = AuxBlock::new(8, CBAM_REDUCTION).unwrap();
    randomize_all(&mut rng, &mut b);
    let x = rng.tensor(Shape::new(1, 8, 10, 10));
    let out = b.forward(&x, Exec::Parallel).unwrap();
    assert_eq!(out.shape(), b.output_shape(x.shape()));
    let a = cbl_oracle(&b.conv1, &x);
    let second = cbl_oracle(&b.conv2, &a);
    assert_eq!(out.slice_channels(0, 8).unwrap(), a);
    let attended = cbam_oracle(&second, &b.cbam.fc1, &b.cbam.fc2, &b.cbam.spatial);
    let tail = out.slice_channels(8, 16).unwrap();
    for (g, e) in tail.data().iter().zip(&attended) {
        assert!(rel_close(*g as f64, *e, 1e-5, 1e-2));
    }
}

#[test]
fn fusion_adds_shapes_of_stage_and_aux() {
    let mut rng = TestRng::new(26);
    let mut stage = ResBlockD::new(8).unwrap();
    let mut aux = AuxBlock::new(8, CBAM_REDUCTION).unwrap();
    randomize_all(&mut rng, &mut stage);
    randomize_all(&mut rng, &mut aux);
    let x = rng.tensor(Shape::new(1, 8, 16, 16));
    let (s, a) = (stage.forward(&x, Exec::Serial).unwrap(), aux.forward(&x, Exec::Serial).unwrap());
    let fused = fuse(&s, &a).unwrap();
    assert_eq!(fused.shape(), Shape::new(1, 16, 8, 8));
    assert_eq!(fused, add(&s, &a).unwrap());
}

#[test]
fn blocks_reject_bad_configuration_and_inputs() {
    assert!(CspBlock::new(3).is_err());
    assert!(ResBlockD::new(0).is_err());
    assert!(Cbam::new(6, 4).is_err());
    let b = CspBlock::new(4).unwrap();
    assert!(matches!(
        b.forward(&Tensor::zeros(Shape::new(1, 2, 4, 4)), Exec::Serial),
        Err(BlockError::Channels { .. })
    ));
}

#[test]
fn serial_and_parallel_blocks_agree_bitwise() {
    let mut rng = TestRng::new(27);
    let mut b = AuxBlock::new(16, CBAM_REDUCTION).unwrap();
    randomize_all(&mut rng, &mut b);
    let x = rng.tensor(Shape::new(1, 16, 20, 20));
    assert_eq!(
        bits(&b.forward(&x, Exec::Serial).unwrap()),
        bits(&b.forward(&x, Exec::Parallel).unwrap())
    );
}
