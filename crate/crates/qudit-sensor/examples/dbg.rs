use qudit_sensor::analysis::dressed_shift;
use qudit_sensor::dynamics::DriveTone;
use qudit_sensor::lookup::{self, Device, SensingProtocol};
use qudit_sensor::real::{ghz_to_rad, rad_to_mhz};
use qudit_sensor::transmon;
use std::time::Instant;

fn main() {
    let params = transmon::reference_device::<f64>().unwrap();
    let device = Device::new(&params).unwrap();
    let mut protocol = SensingProtocol::new(params.clone());
    protocol.delta_t_max = 1600.0;
    protocol.n_steps = 160;
    let t0 = Instant::now();
    let mut worst: (f64, f64) = (0.0, 0.0);
    for amp in [0.03, 0.06, 0.09, 0.12, 0.15] {
        for freq in [5.0, 5.15, 5.3, 5.45, 5.6] {
            let field = DriveTone::new(ghz_to_rad(amp), ghz_to_rad(freq));
            let (d1o, d2o) = dressed_shift(&field, &device.spectrum, &device.coupling).unwrap();
            let (d1, d2) = lookup::measure_shifts_tabulated(field, &protocol, &device).unwrap();
            let e1 = (rad_to_mhz(d1 - d1o) * 1e3).abs();
            let e2 = (rad_to_mhz(d2 - d2o) * 1e3).abs();
            if e1 > worst.0 { worst.0 = e1; }
            if e2 > worst.1 { worst.1 = e2; }
            if e1 > 4.0 || e2 > 4.0 { println!("  ({amp},{freq}): {e1:.2}/{e2:.2}"); }
        }
    }
    println!("5x5 @ n=128: worst {:.3}/{:.3} kHz in {:.1?}", worst.0, worst.1, t0.elapsed());
    // TLS dataset estimate: A=0.097, 18 pts over [5.15, 5.58]
    let grid = lookup::GridSpec::reduced_grid();
    let t1 = Instant::now();
    let table = lookup::generate(&grid, &protocol).unwrap();
    println!("reduced table: {:.1?}, holes {}", t1.elapsed(), table.holes());
    let mut dataset = Vec::new();
    for k in 0..18 {
        let f = 5.15 + 0.43 * k as f64 / 17.0;
        let field = DriveTone::new(ghz_to_rad(0.097), ghz_to_rad(f));
        let (d1, d2) = lookup::measure_shifts_tabulated(field, &protocol, &device).unwrap();
        let m = |i, d| qudit_sensor::ShiftMeasurement64 { transition_index: i, delta: d, sigma: ghz_to_rad(5e-6), gate_freq: 0.0, bare_freq: 0.0 };
        dataset.push((m(1, d1), m(2, d2)));
    }
    let u = lookup::tls_offset_study(ghz_to_rad(20e-6), &dataset, &table).unwrap();
    println!("TLS 20 kHz -> mean dF = {:.2} MHz", rad_to_mhz(u));
}
