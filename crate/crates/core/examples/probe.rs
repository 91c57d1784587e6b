use wheelgen_core::geometry::{build_default_domain, volume_fraction_of};
use wheelgen_core::synth::{render_wheel, SyntheticWheelSpec};
use wheelgen_core::topopt::{run_topopt, SimpConfig};

fn main() {
    let domain = build_default_domain(64).unwrap();
    let reference = render_wheel(&SyntheticWheelSpec {
        resolution: 64,
        spoke_count: 5,
        spoke_width: 0.22,
        twist: 0.35,
        ..SyntheticWheelSpec::default_for(64)
    }).unwrap();
    println!("target vol {:.4}", volume_fraction_of(&reference, &domain).unwrap());
    let config = SimpConfig { ..SimpConfig::for_resolution(64) };
    let t0 = std::time::Instant::now();
    for lambda in [0.0, 0.0005, 0.005, 0.05, 0.5, 5.0] {
        let t = std::time::Instant::now();
        let r = run_topopt(&domain, Some(&reference), lambda, 0.1, None, &config).unwrap();
        let gray = r.x_physical.values.iter().filter(|&&v| v > 0.1 && v < 0.9).count() as f64 / 4096.0;
        println!("lambda {lambda:7}: c {:9.4} sim {:8.2} it {:3} conv {} gray {:.3} [{:?}]",
            r.compliance, r.similarity_l1, r.iterations, r.converged, gray, t.elapsed());
    }
    println!("total {:?}", t0.elapsed());
}
