//! Gating acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikehsi::convert::{convert, CalibrationConfig};
use spikehsi::data::{extract_patches, generate_synthetic, normalize, split, SynthParams};
use spikehsi::energy::{flops_ann, EnergyConstants, OpKind};
use spikehsi::metrics::{argmax, ConfusionMatrix, Metrics};
use spikehsi::network::{
    build_cnn3d, snn_forward, InputDescriptor, LayerKind, LayerSpec, Mode, Model, NetworkBuilder, SnnOptions,
};
use spikehsi::neuron::{LifParams, SpikeFunction};
use spikehsi::quant::{
    affine_quantized_conv, dequantize, fake_quantize, quantize, scale_quantized_conv, QuantParams, QuantScheme,
};
use spikehsi::tensor::{conv_reference, ConvGeometry, CountMacs, NoCount, Tensor};
use spikehsi::train::{
    evaluate_ann, evaluate_snn, loss_and_output_grad, output_weight_grad, qstdb_backward, train_ann, train_snn,
    InferenceConfig, LrSchedule, TrainConfig,
};

use common::{naive_two_layer, random_input, random_two_layer, rel_err, tape_two_layer, two_layer_spec};

type Outcome = Result<String, String>;

fn check(cond: bool, what: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what)
    }
}

// ---------------------------------------------------------------- 1

fn dynamics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t = 100;
    let mut spikes = 0.0;
    for net in 0..50 {
        let bands = rng.random_range(2..24);
        let hidden = rng.random_range(1..32);
        let classes = rng.random_range(2..6);
        let m = random_two_layer(&mut rng, bands, hidden, classes, t);
        let x = random_input(&mut rng, bands);
        let lif = m.lif.as_ref().unwrap()[0];
        let out = snn_forward(&m.spec, &m.weights, &[lif], &x, &SnnOptions::with_timesteps(t)).map_err(|e| e.to_string())?;
        let (u_ref, s_ref) = naive_two_layer(m.weights[0].data(), m.weights[1].data(), lif, x.data(), t);
        let same = out.potentials.data().iter().zip(&u_ref).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same && out.spike_totals[0] == s_ref, format!("net {net}: potentials differ from the naive simulator"))?;
        spikes += s_ref;
    }
    Ok(format!("50 nets x T=100 bit-identical ({spikes} hidden spikes)"))
}

// ---------------------------------------------------------------- 2

struct Case {
    m: Model,
    x: Tensor,
    label: usize,
}

fn grad_case(rng: &mut ChaCha8Rng, t: usize) -> Case {
    let (bands, hidden, classes) = (rng.random_range(3..8), rng.random_range(2..7), rng.random_range(2..5));
    Case {
        m: random_two_layer(rng, bands, hidden, classes, t),
        x: random_input(rng, bands),
        label: rng.random_range(0..classes),
    }
}

fn loss_of(m: &Model, x: &Tensor, label: usize, opts: &SnnOptions) -> f64 {
    let out = snn_forward(&m.spec, &m.weights, m.lif.as_ref().unwrap(), x, opts).unwrap();
    loss_and_output_grad(&out.potentials, label).unwrap().0
}

fn output_layer_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let t = 5;
    let opts = SnnOptions {
        record: true,
        ..SnnOptions::with_timesteps(t)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c = grad_case(&mut rng, t);
        let lif = c.m.lif.clone().unwrap();
        let out = snn_forward(&c.m.spec, &c.m.weights, &lif, &c.x, &opts).unwrap();
        let (_, g) = loss_and_output_grad(&out.potentials, c.label).unwrap();
        let rec = out.record.unwrap();
        let pre: Vec<Tensor> = rec.o[0].iter().map(|o| Tensor::from_vec(o.clone())).collect();
        let analytic = output_weight_grad(&g, &pre, t).unwrap();
        let full = qstdb_backward(&c.m.spec, &c.m.weights, &lif, &rec, g.data(), 0.3).unwrap();
        check(full.weights[1] == analytic.data(), "Q-STDB classifier gradient differs from (p-y) x sum o".into())?;
        let h = 1e-6;
        let mut fd = Vec::new();
        for i in 0..c.m.weights[1].len() {
            let mut p = c.m.clone();
            p.weights[1].data_mut()[i] += h;
            let lp = loss_of(&p, &c.x, c.label, &opts);
            p.weights[1].data_mut()[i] -= 2.0 * h;
            let lm = loss_of(&p, &c.x, c.label, &opts);
            fd.push((lp - lm) / (2.0 * h));
        }
        worst = worst.max(rel_err(analytic.data(), &fd));
    }
    check(worst <= 1e-6, format!("relative error {worst:.3e} > 1e-6"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn bptt_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (t, gamma) = (5, 0.3);
    let opts = SnnOptions {
        record: true,
        ..SnnOptions::with_timesteps(t)
    };
    let mut worst: f64 = 0.0;
    let mut active = 0;
    for _ in 0..50 {
        let c = grad_case(&mut rng, t);
        let lif = c.m.lif.clone().unwrap();
        let out = snn_forward(&c.m.spec, &c.m.weights, &lif, &c.x, &opts).unwrap();
        let (loss, g) = loss_and_output_grad(&out.potentials, c.label).unwrap();
        let grads = qstdb_backward(&c.m.spec, &c.m.weights, &lif, &out.record.unwrap(), g.data(), gamma).unwrap();
        let o = tape_two_layer(c.m.weights[0].data(), c.m.weights[1].data(), lif[0], c.x.data(), c.label, t, gamma, false);
        check((o.loss - loss).abs() <= 1e-12 * loss.abs().max(1.0), "tape loss differs from the forward pass".into())?;
        if o.w0.iter().any(|&v| v != 0.0) {
            active += 1;
        }
        for (a, b) in [
            (grads.weights[0].as_slice(), o.w0.as_slice()),
            (grads.weights[1].as_slice(), o.w1.as_slice()),
            (&[grads.thresholds[0]][..], &[o.threshold][..]),
            (&[grads.leaks[0]][..], &[o.leak][..]),
        ] {
            worst = worst.max(rel_err(a, b));
        }
    }
    check(active >= 25, format!("only {active}/50 nets had an active surrogate path"))?;
    check(worst <= 1e-10, format!("relative error {worst:.3e} > 1e-10"))?;
    Ok(format!("50 nets, weights/threshold/leak max relative error {worst:.2e}"))
}

fn smooth_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (t, gamma) = (5, 0.3);
    let opts = SnnOptions {
        record: true,
        spike_fn: SpikeFunction::Relaxed { gamma },
        ..SnnOptions::with_timesteps(t)
    };
    let h = 1e-6;
    let central = |m: &Model, x: &Tensor, label: usize, f: &dyn Fn(&mut Model, f64)| {
        let mut p = m.clone();
        f(&mut p, h);
        let lp = loss_of(&p, x, label, &opts);
        let mut p = m.clone();
        f(&mut p, -h);
        let lm = loss_of(&p, x, label, &opts);
        (lp - lm) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c = grad_case(&mut rng, t);
        let lif = c.m.lif.clone().unwrap();
        let out = snn_forward(&c.m.spec, &c.m.weights, &lif, &c.x, &opts).unwrap();
        let (_, g) = loss_and_output_grad(&out.potentials, c.label).unwrap();
        let grads = qstdb_backward(&c.m.spec, &c.m.weights, &lif, &out.record.unwrap(), g.data(), gamma).unwrap();
        for l in 0..2 {
            let fd: Vec<f64> = (0..c.m.weights[l].len())
                .map(|i| central(&c.m, &c.x, c.label, &|p, d| p.weights[l].data_mut()[i] += d))
                .collect();
            worst = worst.max(rel_err(&grads.weights[l], &fd));
        }
        let fv = central(&c.m, &c.x, c.label, &|p, d| p.lif.as_mut().unwrap()[0].threshold += d);
        let fl = central(&c.m, &c.x, c.label, &|p, d| p.lif.as_mut().unwrap()[0].leak += d);
        worst = worst.max(rel_err(&[grads.thresholds[0]], &[fv]));
        worst = worst.max(rel_err(&[grads.leaks[0]], &[fl]));
    }
    check(worst <= 1e-4, format!("relative error {worst:.3e} > 1e-4"))?;
    Ok(format!("relaxed-spike network, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_ratio: f64 = 0.0;
    for n in 0..10_000 {
        let scheme = if n % 2 == 0 { QuantScheme::Scale } else { QuantScheme::Affine };
        let bits = rng.random_range(2..=16);
        let len = rng.random_range(1..64);
        let (c, r) = (rng.random_range(-3.0..3.0), rng.random_range(1e-3..5.0));
        let data: Vec<f64> = (0..len).map(|_| c + r * rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(data);
        let p = QuantParams::calibrate(t.data(), bits, scheme).map_err(|e| e.to_string())?;
        let back = dequantize(&quantize(&t, &p), &p);
        for (a, b) in t.data().iter().zip(back.data()) {
            worst_ratio = worst_ratio.max((a - b).abs() * 2.0 * p.scale);
        }
        check(back == fake_quantize(&t, &p), "fake quantization differs from quantize/dequantize".into())?;
        if scheme == QuantScheme::Scale {
            check(p.quantize_value(0.0) == 0 && p.fake_quantize_value(0.0) == 0.0, "zero does not map to zero".into())?;
        }
    }
    check(worst_ratio <= 1.0 + 1e-9, format!("roundtrip error reached {worst_ratio:.6} x 1/(2s)"))?;

    let (mut worst_scale, mut worst_affine): (f64, f64) = (0.0, 0.0);
    for _ in 0..40 {
        let ci = rng.random_range(1..4);
        let geom = ConvGeometry::conv3d(
            ci,
            rng.random_range(1..4),
            [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)],
            [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3)],
            [rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..2)],
        );
        let ext = [rng.random_range(3..7), rng.random_range(3..7), rng.random_range(3..7)];
        let x = Tensor::new(
            vec![ci, ext[0], ext[1], ext[2]],
            (0..ci * ext.iter().product::<usize>()).map(|_| rng.random_range(-1.0..2.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            geom.weight_shape(),
            (0..geom.weight_shape().iter().product()).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let bits = rng.random_range(3..9);
        for scheme in [QuantScheme::Scale, QuantScheme::Affine] {
            let px = QuantParams::calibrate(x.data(), bits, scheme).unwrap();
            let pw = QuantParams::calibrate(w.data(), bits, scheme).unwrap();
            let (xq, wq) = (quantize(&x, &px), quantize(&w, &pw));
            let reference = conv_reference(
                dequantize(&xq, &px).data(),
                ext,
                dequantize(&wq, &pw).data(),
                &geom,
                &mut NoCount,
            )
            .unwrap();
            match scheme {
                QuantScheme::Scale => {
                    let y = scale_quantized_conv(&xq, &wq, px.scale, pw.scale, &geom).unwrap();
                    worst_scale = worst_scale.max(rel_err(y.data(), &reference));
                }
                QuantScheme::Affine => {
                    let y = affine_quantized_conv(&xq, &px, &wq, &pw, &geom).unwrap();
                    worst_affine = worst_affine.max(rel_err(y.data(), &reference));
                }
            }
        }
    }
    check(worst_scale <= 1e-12, format!("scale conv relative error {worst_scale:.3e}"))?;
    check(worst_affine <= 1e-10, format!("affine decomposition relative error {worst_affine:.3e}"))?;
    Ok(format!(
        "1e4 tensors within 1/(2s) (worst {worst_ratio:.4}); scale conv {worst_scale:.1e}; affine 3-term {worst_affine:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

/// Multiply-accumulate slots of a layer counted by visiting every output
/// and every kernel tap.
fn brute_force_macs(layer: &LayerSpec) -> u64 {
    let conv = |g: &ConvGeometry, ext: [usize; 3]| -> u64 {
        let mut n = 0;
        let out: Vec<usize> = (0..3).map(|a| (ext[a] + 2 * g.padding[a] - g.kernel[a]) / g.stride[a] + 1).collect();
        for _co in 0..g.out_channels {
            for _od in 0..out[0] {
                for _oh in 0..out[1] {
                    for _ow in 0..out[2] {
                        for _ci in 0..g.in_channels {
                            for _ in 0..g.kernel[0] * g.kernel[1] * g.kernel[2] {
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
        n
    };
    let s = &layer.input_shape;
    match &layer.kind {
        LayerKind::Conv3d { geometry } => conv(geometry, [s[1], s[2], s[3]]),
        LayerKind::Conv2d { geometry } => conv(geometry, [1, s[s.len() - 2], s[s.len() - 1]]),
        LayerKind::Linear { .. } | LayerKind::Classifier { .. } => {
            let mut n = 0;
            for _ in 0..layer.output_len() {
                for _ in 0..layer.input_len() {
                    n += 1;
                }
            }
            n
        }
        _ => 0,
    }
}

fn energy() -> Outcome {
    let c = EnergyConstants::default();
    let e = |k, b| c.op_energy(k, b).unwrap();
    let table = [
        e(OpKind::Mac, 32),
        e(OpKind::Ac, 32),
        e(OpKind::Mac, 6),
        e(OpKind::Ac, 6),
    ];
    check(table == [3.2, 0.1, 0.26, 0.02], format!("Table IV constants returned as {table:?}"))?;
    let ac_ratio = table[0] / table[1];
    check((ac_ratio / 32.0 - 1.0).abs() <= 0.01, format!("32-bit MAC/AC ratio {ac_ratio}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut geometries = 0;
    while geometries < 100 {
        let input = InputDescriptor {
            channels: rng.random_range(1..4),
            bands: rng.random_range(1..12),
            patch_size: rng.random_range(1..8),
        };
        let mut b = NetworkBuilder::new("probe", input);
        let built = match geometries % 3 {
            0 => b
                .conv3d(
                    rng.random_range(1..5),
                    [rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4)],
                    [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3)],
                    [rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..2)],
                )
                .is_ok(),
            1 => b
                .conv2d(
                    rng.random_range(1..5),
                    [rng.random_range(1..4), rng.random_range(1..4)],
                    [rng.random_range(1..3), rng.random_range(1..3)],
                    [rng.random_range(0..2), rng.random_range(0..2)],
                )
                .is_ok(),
            _ => b.linear(rng.random_range(1..40)).is_ok(),
        };
        if !built {
            continue;
        }
        let spec = b.classifier(2).unwrap().build(Mode::Ann, 5).unwrap();
        for layer in &spec.layers {
            let f = flops_ann(layer);
            let brute = brute_force_macs(layer);
            check(f == brute, format!("{}: Table III gives {f}, counted {brute}", layer.name))?;
            if let LayerKind::Conv3d { geometry } | LayerKind::Conv2d { geometry } = &layer.kind {
                let s = &layer.input_shape;
                let ext = if matches!(layer.kind, LayerKind::Conv3d { .. }) {
                    [s[1], s[2], s[3]]
                } else {
                    [1, s[s.len() - 2], s[s.len() - 1]]
                };
                let mut counter = CountMacs::default();
                let x = vec![1.0; layer.input_len()];
                let w = vec![1.0; geometry.weight_shape().iter().product()];
                conv_reference(&x, ext, &w, geometry, &mut counter).unwrap();
                check(counter.0 == f, format!("{}: instrumented kernel counted {}", layer.name, counter.0))?;
            }
        }
        geometries += 1;
    }

    let mac_ratio = table[0] / table[2];
    // Table IV rounds to two decimals: 0.26 stands for [0.255, 0.265)
    let (lo, hi) = (3.2 / 0.265, 3.2 / 0.255);
    check((mac_ratio - 12.3).abs() < 0.05, format!("6-bit MAC ratio {mac_ratio}"))?;
    check(lo <= 12.5 && 12.5 <= hi, format!("12.5 outside the rounding interval [{lo:.3}, {hi:.3}]"))?;
    Ok(format!(
        "constants verbatim; MAC/AC {ac_ratio:.2}; 100 geometries exact; MAC32/MAC6 {mac_ratio:.3} (rounding range {lo:.2}..{hi:.2})"
    ))
}

// ---------------------------------------------------------------- 5

fn metrics() -> Outcome {
    let m = Metrics::from_confusion(ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap()).unwrap();
    let (oa, aa, kappa) = (85.0 / 100.0, (50.0 / 60.0 + 35.0 / 40.0) / 2.0, (0.85 - 0.51) / (1.0 - 0.51));
    check((m.oa - oa).abs() <= 1e-9, format!("OA {}", m.oa))?;
    check((m.aa - aa).abs() <= 1e-9 && (m.aa - 0.85417).abs() < 5e-6, format!("AA {}", m.aa))?;
    check(
        (m.kappa - kappa).abs() <= 1e-9 && (m.kappa - 0.69388).abs() < 5e-6,
        format!("kappa {}", m.kappa),
    )?;
    let perfect = Metrics::from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    check(perfect.kappa == 1.0, format!("perfect kappa {}", perfect.kappa))?;
    let chance = Metrics::from_confusion(ConfusionMatrix::from_rows(&[vec![25, 25], vec![25, 25]]).unwrap()).unwrap();
    check(chance.kappa == 0.0, format!("chance kappa {}", chance.kappa))?;
    Ok(format!("OA {:.5} AA {:.5} kappa {:.5}; edge cases exact", m.oa, m.aa, m.kappa))
}

// ---------------------------------------------------------------- 6

fn end_to_end() -> Outcome {
    let (cube, labels) = generate_synthetic(&SynthParams::default()).map_err(|e| e.to_string())?;
    let set = extract_patches(&normalize(&cube), &labels, 5).map_err(|e| e.to_string())?;
    check(set.len() == 300 && set.num_classes == 3 && set.bands() == Some(16), "unexpected synthetic set".into())?;
    let (train, test) = split(&set, 0.4, 0).map_err(|e| e.to_string())?;
    let spec = build_cnn3d(16, 3).map_err(|e| e.to_string())?;

    let mut ann_cfg = TrainConfig::ann_default();
    ann_cfg.batch_size = 10;
    ann_cfg.eval_each_epoch = false;
    ann_cfg.schedule = LrSchedule {
        initial: 0.01,
        decay: 0.1,
        milestones: vec![6, 8],
        epochs: 10,
    };
    let ann = train_ann(Model::init(spec, 0), &train, &test, &ann_cfg, &mut |_| {})
        .map_err(|e| e.to_string())?
        .last;
    let ann_oa = evaluate_ann(&ann, &test).map_err(|e| e.to_string())?.oa;

    let batch: Vec<Tensor> = train.patches.iter().take(50).cloned().collect();
    let (snn, _) = convert(&ann, &batch, &CalibrationConfig::default()).map_err(|e| e.to_string())?;
    let mut snn_cfg = TrainConfig::snn_default();
    snn_cfg.batch_size = 10;
    snn_cfg.eval_each_epoch = false;
    snn_cfg.schedule = LrSchedule {
        initial: 1e-3,
        decay: 0.5,
        milestones: vec![],
        epochs: 3,
    };
    let inference = InferenceConfig::default();
    let snn = train_snn(snn, &train, &test, &snn_cfg, &inference, &mut |_| {})
        .map_err(|e| e.to_string())?
        .last;
    let snn_oa = evaluate_snn(&snn, &test, &inference).map_err(|e| e.to_string())?.metrics.oa;
    check(ann_oa >= 0.99, format!("ANN test OA {ann_oa:.4} < 0.99"))?;
    check(snn_oa >= 0.95, format!("6-bit SNN test OA {snn_oa:.4} < 0.95"))?;
    Ok(format!("ANN test OA {ann_oa:.4}; 6-bit T=5 SNN test OA {snn_oa:.4}"))
}

// ---------------------------------------------------------------- 7

fn conversion_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (bands, hidden, classes) = (16, 32, 4);
    let mut ann = Model::init(two_layer_spec(bands, hidden, classes, Mode::Ann, 100), 7);
    ann.weights[0] = Tensor::new(vec![hidden, bands], common::normal_vec(&mut rng, hidden * bands, 0.5)).unwrap();
    let draw = |rng: &mut ChaCha8Rng| {
        Tensor::new(vec![1, bands, 1, 1], (0..bands).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let calib: Vec<Tensor> = (0..50).map(|_| draw(&mut rng)).collect();
    let (snn, _) = convert(&ann, &calib, &CalibrationConfig::default()).map_err(|e| e.to_string())?;
    let lif: Vec<LifParams> = snn.lif.clone().unwrap();
    let mut agree = 0;
    for _ in 0..200 {
        let x = draw(&mut rng);
        let a = argmax(ann.ann_logits(&x).unwrap().data());
        let out = snn_forward(&snn.spec, &snn.weights, &lif, &x, &SnnOptions::with_timesteps(100)).unwrap();
        agree += (argmax(out.potentials.data()) == a) as usize;
    }
    let frac = agree as f64 / 200.0;
    check(frac >= 0.9, format!("agreement {agree}/200"))?;
    Ok(format!("T=100 agrees with the ANN on {agree}/200 inputs ({:.1}%)", 100.0 * frac))
}

type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1", "dynamics oracle equivalence", Duration::from_secs(10), dynamics_oracle),
        ("2a", "output-layer finite differences", Duration::from_secs(60), output_layer_fd),
        ("2b", "Q-STDB vs brute-force BPTT", Duration::from_secs(60), bptt_oracle),
        ("2c", "smooth-regime finite differences", Duration::from_secs(60), smooth_fd),
        ("3", "quantization", Duration::from_secs(10), quantization),
        ("4", "energy model", Duration::from_secs(10), energy),
        ("5", "metrics", Duration::from_secs(1), metrics),
        ("6", "end-to-end desk-scale training", Duration::from_secs(300), end_to_end),
        ("7", "conversion fidelity", Duration::from_secs(60), conversion_fidelity),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > budget => Err(format!("{d}; took {took:.1?}, budget {budget:?}")),
            r => r,
        };
        match result {
            Ok(d) => println!("PASS [{id}] {name}: {d} ({took:.2?})"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {d} ({took:.2?})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
