//! Cross-module checks: the time-domain Ramsey pipeline against the
//! dressed-state route, table generation invariants, inversion round trips
//! and uncertainty propagation.

use qudit_sensor::analysis::dressed_shift;
use qudit_sensor::dynamics::DriveTone;
use qudit_sensor::fitting::ShiftMeasurement;
use qudit_sensor::lookup::{
    self, generate, invert, propagate_uncertainty, tls_offset_study, Device, GridSpec,
    LookupError, SensingProtocol,
};
use qudit_sensor::real::{ghz_to_rad, rad_to_mhz};
use qudit_sensor::transmon;

fn protocol() -> SensingProtocol<f64> {
    let params = transmon::reference_device::<f64>().unwrap();
    SensingProtocol::new(params)
}

/// Doubled sensing window: admits the sub-MHz second-transition shifts of
/// weak fields (the limits scale as 1/Δt_max).
fn protocol_long() -> SensingProtocol<f64> {
    let mut p = protocol();
    p.delta_t_max = 1600.0;
    p.n_steps = 160;
    p
}

fn small_grid() -> GridSpec<f64> {
    GridSpec {
        amp_min: 0.0,
        amp_max: ghz_to_rad(0.15),
        n_amp: 5,
        freq_min: ghz_to_rad(5.1),
        freq_max: ghz_to_rad(5.5),
        n_freq: 9,
    }
}

fn measurement(delta: f64, sigma: f64, idx: u8) -> ShiftMeasurement<f64> {
    ShiftMeasurement {
        transition_index: idx,
        delta,
        sigma,
        gate_freq: 0.0,
        bare_freq: 0.0,
    }
}

#[test]
fn pipeline_matches_dressed_oracle_on_grid_sample() {
    let protocol = protocol();
    let device = Device::new(&protocol.transmon).unwrap();
    for &amp_ghz in &[0.05, 0.12] {
        for &freq_ghz in &[5.05, 5.35] {
            let field = DriveTone::new(ghz_to_rad(amp_ghz), ghz_to_rad(freq_ghz));
            let (d1o, d2o) = dressed_shift(&field, &device.spectrum, &device.coupling).unwrap();
            let (d1, d2) = lookup::measure_shifts_tabulated(field, &protocol, &device).unwrap();
            let d1_khz = rad_to_mhz(d1 - d1o) * 1e3;
            let d2_khz = rad_to_mhz(d2 - d2o) * 1e3;
            assert!(
                d1_khz.abs() < 5.0 && d2_khz.abs() < 5.0,
                "({amp_ghz}, {freq_ghz}): pipeline vs oracle {d1_khz:+.3} / {d2_khz:+.3} kHz"
            );
        }
    }
}

#[test]
fn generated_table_invariants_and_round_trip() {
    let protocol = protocol_long();
    let table = generate(&small_grid(), &protocol).unwrap();
    assert_eq!(table.holes(), 0, "holes in the small table");

    // axes strictly increasing
    for w in table.amp_axis.windows(2) {
        assert!(w[1] > w[0]);
    }
    for w in table.freq_axis.windows(2) {
        assert!(w[1] > w[0]);
    }
    // zero-amplitude row carries zero shift
    for j in 0..table.freq_axis.len() {
        assert_eq!(table.delta1[[0, j]], 0.0);
        assert_eq!(table.delta2[[0, j]], 0.0);
    }
    for i in 0..table.amp_axis.len() {
        for j in 0..table.freq_axis.len() {
            let d1 = table.delta1[[i, j]];
            let d2 = table.delta2[[i, j]];
            // fields above the first transition: Δ1 ≥ Δ2 ≥ 0
            assert!(
                d1 >= d2 && d2 >= -1e-9,
                "ordering violated at ({i},{j}): {d1} {d2}"
            );
            // monotone growth with amplitude along every column
            if i > 0 {
                assert!(d1 > table.delta1[[i - 1, j]] - 1e-12);
                assert!(d2 > table.delta2[[i - 1, j]] - 1e-12);
            }
        }
    }
    // Δ1 decreases with detuning along every row (above the zero row)
    for i in 1..table.amp_axis.len() {
        for j in 1..table.freq_axis.len() {
            assert!(
                table.delta1[[i, j]] < table.delta1[[i, j - 1]],
                "Δ1 not decreasing with detuning at ({i},{j})"
            );
        }
    }

    // exact entry inverts to the grid node with zero distance
    let (i, j) = (3, 2);
    let t1 = measurement(table.delta1[[i, j]], 0.0, 1);
    let t2 = measurement(table.delta2[[i, j]], 0.0, 2);
    let hit = invert(&t1, &t2, &table).unwrap();
    assert!(hit.distance < 1e-12, "distance {}", hit.distance);
    assert!((hit.amp - table.amp_axis[i]).abs() < 1e-9);
    assert!((hit.freq - table.freq_axis[j]).abs() < 1e-9);
    assert!(!hit.ambiguous);

    // zero measurement error propagates to zero field uncertainty
    let (amp_err, freq_err) = propagate_uncertainty(&t1, &t2, &table).unwrap();
    assert_eq!(amp_err, 0.0);
    assert_eq!(freq_err, 0.0);

    // off-grid field round trip through the physical pipeline
    let device = Device::new(&protocol.transmon).unwrap();
    let field = DriveTone::new(ghz_to_rad(0.1037), ghz_to_rad(5.2741));
    let (d1, d2) = lookup::measure_shifts_tabulated(field, &protocol, &device).unwrap();
    let s1 = measurement(d1, 0.0, 1);
    let s2 = measurement(d2, 0.0, 2);
    let got = invert(&s1, &s2, &table).unwrap();
    let cell_amp = table.amp_axis[1] - table.amp_axis[0];
    let cell_freq = table.freq_axis[1] - table.freq_axis[0];
    assert!(
        (got.amp - field.amplitude).abs() < cell_amp,
        "amp error {} vs cell {}",
        rad_to_mhz(got.amp - field.amplitude),
        rad_to_mhz(cell_amp)
    );
    assert!(
        (got.freq - field.frequency).abs() < cell_freq,
        "freq error {} vs cell {}",
        rad_to_mhz(got.freq - field.frequency),
        rad_to_mhz(cell_freq)
    );

    // uncertainty corners bracket the central estimate
    let t1 = measurement(s1.delta, ghz_to_rad(10e-6), 1);
    let t2 = measurement(s2.delta, ghz_to_rad(10e-6), 2);
    let central = invert(&t1, &t2, &table).unwrap();
    let (amp_err, freq_err) = propagate_uncertainty(&t1, &t2, &table).unwrap();
    assert!(amp_err > 0.0 && freq_err > 0.0);
    assert!(amp_err < ghz_to_rad(0.05), "amp_err {}", rad_to_mhz(amp_err));
    // corner spread brackets the centre by construction of the half-spread
    assert!(central.amp + amp_err <= table.amp_axis.last().unwrap() + cell_amp);

    // table persists losslessly
    let dir = std::env::temp_dir().join(format!("qudit-sensor-pl-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("table.csv");
    qudit_sensor::io::write_table(&path, &table).unwrap();
    let back: lookup::LookupGrid<f64> = qudit_sensor::io::read_table(&path).unwrap();
    assert_eq!(back.content_hash, table.content_hash);
    let again = invert(&t1, &t2, &back).unwrap();
    assert!((again.freq - central.freq).abs() < ghz_to_rad(1e-6));

    // TLS offset study: zero offset is exactly zero, and the response is
    // locally linear in the offset
    let dataset = vec![(t1, t2)];
    let zero = tls_offset_study(0.0, &dataset, &table).unwrap();
    assert_eq!(zero, 0.0);
    let u10 = tls_offset_study(ghz_to_rad(10e-6), &dataset, &table).unwrap();
    let u20 = tls_offset_study(ghz_to_rad(20e-6), &dataset, &table).unwrap();
    assert!(u10 > 0.0);
    let ratio = u20 / u10;
    assert!(
        (1.6..=2.4).contains(&ratio),
        "offset response not locally linear: ratio {ratio}"
    );
}

#[test]
fn invert_rejects_out_of_range_and_wrong_pipeline() {
    let protocol = protocol();
    let grid = GridSpec {
        n_amp: 3,
        n_freq: 3,
        ..small_grid()
    };
    let table = generate(&grid, &protocol).unwrap();
    let lims = protocol.limits();

    // Δ2 below the lower sensing limit
    let t1 = measurement(ghz_to_rad(3e-3), 0.0, 1);
    let t2 = measurement(lims.delta2_min * 0.5, 0.0, 2);
    match invert(&t1, &t2, &table) {
        Err(LookupError::OutsideLimits(msg)) => {
            assert!(msg.contains("1.2500"), "limit context missing: {msg}")
        }
        other => panic!("expected OutsideLimits, got {other:?}"),
    }

    // Δ1 above the upper sensing limit
    let t1 = measurement(lims.delta1_max * 1.5, 0.0, 1);
    let t2 = measurement(ghz_to_rad(2e-3), 0.0, 2);
    assert!(matches!(
        invert(&t1, &t2, &table),
        Err(LookupError::OutsideLimits(_))
    ));

    // shift pair inside limits but outside what the table spans
    let t1 = measurement(ghz_to_rad(9e-3), 0.0, 1);
    let t2 = measurement(ghz_to_rad(5e-3), 0.0, 2);
    assert!(matches!(
        invert(&t1, &t2, &table),
        Err(LookupError::OutsideHull(_, _))
    ));

    // pipeline hash mismatch
    let mut other = protocol.clone();
    other.gate_amp *= 1.5;
    assert!(matches!(
        table.check_pipeline(&other),
        Err(LookupError::HashMismatch { .. })
    ));
    table.check_pipeline(&protocol).unwrap();
}

#[test]
fn single_cell_grid_inverts_to_its_entry() {
    let protocol = protocol_long();
    let grid = GridSpec {
        amp_min: ghz_to_rad(0.097),
        amp_max: ghz_to_rad(0.097),
        n_amp: 1,
        freq_min: ghz_to_rad(5.297),
        freq_max: ghz_to_rad(5.297),
        n_freq: 1,
    };
    let table = generate(&grid, &protocol).unwrap();
    let t1 = measurement(table.delta1[[0, 0]], 0.0, 1);
    let t2 = measurement(table.delta2[[0, 0]], 0.0, 2);
    let hit = invert(&t1, &t2, &table).unwrap();
    assert_eq!(hit.amp, table.amp_axis[0]);
    assert_eq!(hit.freq, table.freq_axis[0]);
    assert!(hit.distance < 1e-12);
}

#[test]
fn generic_scalar_smoke_at_f32() {
    // the cheap closed-form paths run at reduced precision too
    let lims = lookup::limits::<f32>(80, 800.0);
    assert!((rad_to_mhz(lims.delta1_max) - 10.0).abs() < 1e-3);
    let p = lookup::power_dbm(ghz_to_rad(0.097_f32), ghz_to_rad(5.297_f32));
    assert!((p + 116.7).abs() < 0.2, "p = {p}");
    let pair =
        qudit_sensor::analysis::PhasePulsePair::at_detuning(1.0_f32, 0.5, 0.7).unwrap();
    let p1 = qudit_sensor::analysis::phase_p1(&pair);
    assert!((0.0..=1.0).contains(&p1));
    let n = qudit_sensor::analysis::thermal_photons(1.0_f32, 4.0).unwrap();
    assert!((n - 82.85).abs() < 0.5);
    // spectrum fit at f32 tolerances
    let params = transmon::fit_ej_ec(4.685_f32, 4.405, 0.0, 30, 7);
    // 1 kHz on a GHz scale sits at the f32 resolution limit; accept either
    // a successful fit or a clean non-convergence report
    if let Ok(p) = params {
        let (spec, _) = transmon::diagonalize(&p).unwrap();
        assert!((spec.transition(1) - 4.685).abs() < 1e-3);
    }
}
