use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stslab::network::{ConvLayer, Layer, Network, NetworkSpec};
use stslab::probe::probe_network;
use stslab::tensor::{slice_time, Tensor, VideoBatch};

fn random_stack(rng: &mut impl Rng) -> NetworkSpec {
    let c0 = rng.gen_range(1..=3);
    let c1 = rng.gen_range(1..=4);
    let c2 = rng.gen_range(1..=4);
    let c3 = rng.gen_range(1..=3);
    let kt = [1, 3, 3];
    NetworkSpec::new(
        c0,
        vec![
            Layer::Conv(ConvLayer::new("a", c0, c1, kt)),
            Layer::Relu,
            Layer::Conv(ConvLayer::new("b", c1, c2, [3, 3, 3])),
            Layer::Relu,
            Layer::Conv(ConvLayer::new("c", c2, c3, [1, 1, 1])),
        ],
    )
    .unwrap()
}

/// A clip whose only nonzero frame is `p` reaches output frame `q` of the
/// temporal conv through tap `p - q + 1` alone, so that output frame equals
/// the network probed at that tap applied to frame `p`.
#[test]
fn one_hot_frame_response_matches_probed_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let spec = random_stack(&mut rng);
        let net = Network::<f64>::init(spec.clone(), &mut rng).unwrap();
        let ckpt = net.to_checkpoint();
        let (frames, p) = (5, 2);
        let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
        let image = Tensor::<f64>::random_uniform(&[2, spec.input_channels, h, w], -1.0, 1.0, &mut rng);
        let clip = Tensor::from_fn(&[2, spec.input_channels, frames, h, w], |i| {
            if i[2] == p {
                image.get(&[i[0], i[1], i[3], i[4]]).unwrap()
            } else {
                0.0
            }
        });
        let y3d = VideoBatch::new(net.forward(&clip).unwrap()).unwrap();
        for t in 0..3 {
            let (spec2d, ckpt2d) = probe_network(&spec, &ckpt, t).unwrap();
            assert!(spec2d.is_2d());
            let net2d = Network::<f64>::from_checkpoint(spec2d, &ckpt2d).unwrap();
            let y2d = VideoBatch::new(net2d.forward(&image).unwrap()).unwrap();
            let q = p + 1 - t;
            assert!(slice_time(&y3d, q).unwrap().bits_eq(&slice_time(&y2d, 0).unwrap()), "t={t}");
        }
    }
}

#[test]
fn zero_init_sts_network_probed_off_center_has_zero_conv_output() {
    use stslab::init::{init_sts_from_2d, zero_init_3d};
    use stslab::sts::StsConfig;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = StsConfig::new(4, 4, 3, 3).unwrap();
    let spec = NetworkSpec::new(
        4,
        vec![
            Layer::Sts { name: "s".into(), config: cfg },
            Layer::Conv(ConvLayer::new("z", 4, 2, [3, 3, 3])),
        ],
    )
    .unwrap();
    let mut net = Network::<f64>::init(spec.clone(), &mut rng).unwrap();
    let w2d = Tensor::<f64>::random_uniform(&[4, 4, 3, 3], -1.0, 1.0, &mut rng);
    let p = init_sts_from_2d(&w2d, &cfg).unwrap();
    net.set_param("s.alpha0", p.alpha0).unwrap();
    net.set_param("s.alpha1", p.alpha1).unwrap();
    net.set_param("s.alpha2", p.alpha2).unwrap();
    net.set_param("s.beta", p.beta).unwrap();
    let z2d = Tensor::<f64>::random_uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
    net.set_param("z.weight", zero_init_3d(&z2d).unwrap()).unwrap();

    let image = Tensor::<f64>::random_uniform(&[3, 4, 6, 6], -1.0, 1.0, &mut rng);
    for t in [0, 2] {
        let (spec2d, ckpt2d) = probe_network(&spec, &net.to_checkpoint(), t).unwrap();
        let probed = Network::<f64>::from_checkpoint(spec2d, &ckpt2d).unwrap();
        let y = probed.forward(&image).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "t={t}");
    }
}
