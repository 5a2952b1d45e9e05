mod common;

use common::{config, model_and_channel, nonzero_bits, small_config};
use proptest::prelude::*;
use simlink::deploy::{
    apply_calibration, partition, quantize_model, reassemble, CalibrationSet, DeployBundle, PhaseMap, Quantization, Role,
};
use simlink::emnn::{rx_group, ue_group, Mode, GROUP_BS, GROUP_TX};
use simlink::metasurface::{MetasurfaceStack, PanelLayout, Polarization, Side};
use simlink::wavemath::{RngStreams, ParamKind};

#[test]
fn three_users_give_four_bundles_that_reassemble_exactly() {
    let cfg = small_config(3, 3, 2);
    for mode in [Polarization::Single, Polarization::Dual] {
        let (model, ch) = model_and_channel(&cfg, mode, 1);
        let bundles = partition(&model, "abc", None);
        assert_eq!(bundles.len(), 4);
        assert_eq!(bundles[0].role, Role::Bs);
        for (j, b) in bundles[1..].iter().enumerate() {
            assert_eq!(b.role, Role::Ue { user: j });
            // Key audit: nothing belonging to another user or to the BS.
            assert!(b.params.iter().all(|p| p.group == rx_group(j) || p.group == ue_group(j)));
        }
        assert!(bundles[0].params.iter().all(|p| p.group == GROUP_BS || p.group == GROUP_TX));
        let total: usize = bundles.iter().map(|b| b.params.len()).sum();
        assert_eq!(total, model.store.len());

        // Through the byte format and back.
        let bundles: Vec<DeployBundle> = bundles
            .iter()
            .map(|b| DeployBundle::from_bytes(&b.to_bytes().unwrap(), "mem").unwrap())
            .collect();
        let back = reassemble(&model.spec, model.prop.clone(), &bundles).unwrap();
        assert_eq!(back.store, model.store);
        let bits = nonzero_bits(8, 9, 2);
        let run = |m: &simlink::emnn::EmnnModel| {
            m.forward(&bits, &ch, &[0.5; 8], &mut RngStreams::new(3).stream("n", 0), Mode::Eval)
                .unwrap()
        };
        assert_eq!(run(&back), run(&model));
    }
}

#[test]
fn reassembly_rejects_missing_and_duplicated_bundles() {
    let cfg = small_config(2, 2, 1);
    let (model, _) = model_and_channel(&cfg, Polarization::Single, 1);
    let bundles = partition(&model, "h", None);
    assert!(reassemble(&model.spec, model.prop.clone(), &bundles[..2]).is_err());
    let mut dup = bundles.clone();
    dup.push(bundles[1].clone());
    assert!(reassemble(&model.spec, model.prop.clone(), &dup).is_err());
}

#[test]
fn quantised_bundles_carry_only_codebook_phases() {
    let cfg = small_config(1, 4, 1);
    let (model, _) = model_and_channel(&cfg, Polarization::Dual, 1);
    let q = Quantization::new(3).unwrap();
    let qm = quantize_model(&model, 3).unwrap();
    for b in partition(&qm, "h", Some(q)) {
        assert_eq!(b.quantization, Some(q));
        for p in b.params.iter().filter(|p| p.kind == ParamKind::Phase) {
            for &t in &p.data {
                assert_eq!(q.phase(q.level(t)), t);
            }
        }
    }
    // DNN weights stay at full precision.
    for ((_, a), (_, b)) in model.store.iter().zip(qm.store.iter()) {
        if a.kind != ParamKind::Phase {
            assert_eq!(a.data, b.data);
        }
    }
}

fn table_two_stack() -> MetasurfaceStack {
    let layout = PanelLayout {
        side: Side::Tx,
        units_x: 10,
        units_y: 10,
        unit_spacing: 0.00535,
        layer_spacing: 0.00535,
        layer_count: 3,
        antennas_x: 4,
        antennas_y: 4,
    };
    let mut s = MetasurfaceStack::zeros(layout, Polarization::Single);
    let mut rng = RngStreams::new(4).stream("phases", 0);
    for layer in s.phases.iter_mut() {
        for t in layer[0].iter_mut() {
            *t = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
        }
    }
    s
}

#[test]
fn phase_map_has_one_record_per_unit_in_layer_major_order() {
    let stack = table_two_stack();
    let q = Quantization::new(8).unwrap();
    let map = PhaseMap::from_stack(&stack, q).unwrap();
    assert_eq!(map.records(), 300);
    let text = map.to_text();
    let records: Vec<&str> = text.lines().skip(3).collect();
    assert_eq!(records.len(), 300);
    assert!(records[0].starts_with("1,0,0,0,"));
    assert!(records[1].starts_with("1,0,0,1,"));
    assert!(records[10].starts_with("1,0,1,0,"));
    assert!(records[100].starts_with("2,0,0,0,"));
    assert!(records[299].starts_with("3,0,9,9,"));

    let back = PhaseMap::from_text(&text, "mem").unwrap();
    assert_eq!(back, map);
    let programmed = back.to_stack(&stack.layout).unwrap();
    for (a, b) in programmed.phases.iter().flatten().flatten().zip(stack.phases.iter().flatten().flatten()) {
        let d = (a - b).rem_euclid(std::f64::consts::TAU);
        assert!(d.min(std::f64::consts::TAU - d) <= std::f64::consts::PI / 256.0 + 1e-12);
    }
}

#[test]
fn phase_map_rejects_reordered_or_truncated_records() {
    let map = PhaseMap::from_stack(&table_two_stack(), Quantization::new(4).unwrap()).unwrap();
    let text = map.to_text();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(3, 4);
    assert!(PhaseMap::from_text(&lines.join("\n"), "swapped").is_err());
    let truncated: Vec<&str> = text.lines().take(100).collect();
    assert!(PhaseMap::from_text(&truncated.join("\n"), "short").is_err());
}

#[test]
fn analytic_calibration_leaves_the_forward_pass_unchanged() {
    let cfg = small_config(1, 4, 2);
    let (model, ch) = model_and_channel(&cfg, Polarization::Single, 1);
    let cal = CalibrationSet::from_propagation(&model.prop, "analytic");
    let cal = CalibrationSet::from_text(&cal.to_text(), "mem").unwrap();
    let mut calibrated = model.clone();
    apply_calibration(&mut calibrated, &cal).unwrap();
    let bits = nonzero_bits(6, 4, 5);
    let rng = || RngStreams::new(1).stream("n", 0);
    let a = model.forward(&bits, &ch, &[0.2; 6], &mut rng(), Mode::Eval).unwrap();
    let b = calibrated.forward(&bits, &ch, &[0.2; 6], &mut rng(), Mode::Eval).unwrap();
    for (x, y) in a.soft.iter().zip(&b.soft) {
        for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn halving_a_receive_gap_quarters_the_received_power() {
    let cfg = config(&[
        "system.subcarriers=1",
        "system.users=1",
        "system.user_positions=[[3.0, 0.0, 6.0]]",
        "system.bits_per_user=[4]",
        "sim.layers_tx=1",
        "sim.layers_rx=1",
        "sim.units_tx=[3, 3]",
        "sim.units_rx=[3, 3]",
        "sim.antennas_tx=[2, 2]",
        "sim.antennas_rx=[2, 2]",
    ]);
    let (model, ch) = model_and_channel(&cfg, Polarization::Single, 1);
    let mut cal = CalibrationSet::from_propagation(&model.prop, "scaled");
    cal.entries.retain(|e| e.side == Side::Rx);
    assert_eq!(cal.entries.len(), 1);
    let m = &mut cal.entries[0].matrix;
    for z in m.as_mut_slice() {
        *z *= 0.5;
    }
    let mut scaled = model.clone();
    apply_calibration(&mut scaled, &cal).unwrap();
    let bits = nonzero_bits(16, 4, 7);
    let rng = || RngStreams::new(1).stream("n", 0);
    let a = model.forward(&bits, &ch, &[1.0; 16], &mut rng(), Mode::Eval).unwrap();
    let b = scaled.forward(&bits, &ch, &[1.0; 16], &mut rng(), Mode::Eval).unwrap();
    let ratio = b.diagnostics.rx_power[0][0] / a.diagnostics.rx_power[0][0];
    assert!((ratio - 0.25).abs() < 1e-12, "ratio {ratio}");
}

#[test]
fn malformed_calibration_leaves_the_model_untouched() {
    let cfg = small_config(1, 4, 2);
    let (model, _) = model_and_channel(&cfg, Polarization::Single, 1);
    assert!(CalibrationSet::from_text("not a calibration file\n", "junk").is_err());

    // The first entries are valid; only the last has the wrong shape.
    let mut cal = CalibrationSet::from_propagation(&model.prop, "bad");
    for e in cal.entries.iter_mut() {
        for z in e.matrix.as_mut_slice() {
            *z *= 2.0;
        }
    }
    let last = cal.entries.len() - 1;
    cal.entries[last].matrix = simlink::wavemath::CMat::zeros(1, 1);
    let mut target = model.clone();
    let err = apply_calibration(&mut target, &cal).unwrap_err().to_string();
    assert!(err.contains("expected") && err.contains("found"), "{err}");
    assert_eq!(target.prop, model.prop);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_bit_flip_is_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let cfg = small_config(1, 2, 1);
        let (model, _) = model_and_channel(&cfg, Polarization::Single, 1);
        let bytes = partition(&model, "h", None)[1].to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let i = pos.index(flipped.len());
        flipped[i] ^= 1 << bit;
        prop_assert!(DeployBundle::from_bytes(&flipped, "flipped").is_err());
    }
}
